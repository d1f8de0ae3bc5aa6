import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxsem import gradcore as gc
from voxsem.gradcore import LayerSpec, ParamStore, Tape, Tensor


def _store(**arrays):
    p = ParamStore()
    for k, v in arrays.items():
        p.add(k, np.asarray(v, float), "test")
    return p


def _check(params, build, tol=1e-6):
    def loss_fn(ps):
        tape = Tape(ps)
        return build(tape), tape
    return gc.grad_check(params, loss_fn)


# -- init ---------------------------------------------------------------------

def test_glorot_unit_fans_bounded():
    w = gc.glorot_init(1, 1, seed=3, shape=(1000,))
    assert np.all(np.abs(w) <= np.sqrt(3.0))


def test_glorot_mean_near_zero():
    w = gc.glorot_init(100, 100, seed=7)
    assert w.size == 10 ** 4
    assert abs(w.mean()) < 0.02
    assert np.abs(w).max() <= np.sqrt(6.0 / 200)


def test_glorot_deterministic():
    assert np.array_equal(gc.glorot_init(5, 7, 11), gc.glorot_init(5, 7, 11))


def test_glorot_zero_fan_rejected():
    with pytest.raises(ValueError):
        gc.glorot_init(0, 3, 0)


# -- forward --------------------------------------------------------------------

def test_dense_identity():
    p = _store(**{"d.W": np.eye(3), "d.b": np.zeros(3)})
    v = np.array([[1.0, -2.0, 0.5]])
    out, _ = gc.forward(p, [LayerSpec("dense", "d", 3, 3)], v)
    assert np.array_equal(out.data, v)


def test_activation_fixed_points():
    z = Tensor(np.zeros(1))
    assert gc.elu(z).data[0] == 0.0
    assert gc.sigmoid(z).data[0] == 0.5
    x = Tensor(np.array([-1.0, 2.0]))
    assert np.allclose(gc.elu(x).data, [np.exp(-1) - 1, 2.0])


def test_conv_hand_oracle():
    x = np.zeros((1, 1, 4, 4, 4))
    x[0, 0, 2:4, 0:2, 2:4] = 1.0
    p = _store(**{"c.W": np.ones((1, 1, 2, 2, 2)), "c.b": np.zeros(1)})
    out, _ = gc.forward(p, [LayerSpec("conv3", "c", 1, 1, kernel=2, stride=2)], x)
    assert out.shape == (1, 1, 2, 2, 2)
    assert out.data[0, 0, 1, 0, 1] == 8.0
    assert out.data.sum() == 8.0


def _naive_conv(x, w, b, s, p):
    B, D = x.shape[0], x.shape[2]
    O, k = w.shape[0], w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0)) + ((p, p),) * 3)
    n = (D + 2 * p - k) // s + 1
    out = np.zeros((B, O, n, n, n))
    for bi in range(B):
        for o in range(O):
            for i in range(n):
                for j in range(n):
                    for l in range(n):
                        patch = xp[bi, :, i * s:i * s + k, j * s:j * s + k, l * s:l * s + k]
                        out[bi, o, i, j, l] = np.sum(patch * w[o]) + b[o]
    return out


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 2), st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 3, 4]),
       st.integers(1, 2), st.integers(0, 1), st.integers(0, 10 ** 6))
def test_conv_matches_naive_loops(B, C, O, k, s, p, seed):
    rng = np.random.default_rng(seed)
    D = 6
    x, w, b = rng.normal(size=(B, C, D, D, D)), rng.normal(size=(O, C, k, k, k)), rng.normal(size=O)
    got = gc.conv3d(Tensor(x), Tensor(w), Tensor(b), s, p).data
    assert np.allclose(got, _naive_conv(x, w, b, s, p))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.sampled_from([2, 3, 4]), st.integers(1, 2),
       st.integers(0, 1), st.integers(0, 10 ** 6))
def test_tconv_is_adjoint_of_conv(C, O, k, s, p, seed):
    # <conv(x), y> == <x, tconv(y)> with zero biases and the same kernel
    rng = np.random.default_rng(seed)
    D = 6
    w = rng.normal(size=(O, C, k, k, k))
    x = rng.normal(size=(1, C, D, D, D))
    y_shape = gc.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(O)), s, p).shape
    y = rng.normal(size=y_shape)
    lhs = np.sum(gc.conv3d(Tensor(x), Tensor(w), Tensor(np.zeros(O)), s, p).data * y)
    tx = gc.conv_transpose3d(Tensor(y), Tensor(w), Tensor(np.zeros(C)), s, p,
                             output_padding=D - ((y_shape[2] - 1) * s - 2 * p + k))
    assert tx.shape == x.shape
    assert np.isclose(lhs, np.sum(x * tx.data))


@pytest.mark.parametrize("D", [4, 8, 16])
def test_conv_then_tconv_restores_shape(D):
    layers = [LayerSpec("conv3", "c", 1, 2, kernel=4, stride=2, padding=1),
              LayerSpec("tconv3", "t", 2, 1, kernel=4, stride=2, padding=1)]
    p = ParamStore()
    gc.init_layers(p, layers, "g", 0)
    out, _ = gc.forward(p, layers, np.ones((1, 1, D, D, D)))
    assert out.shape == (1, 1, D, D, D)


def test_shape_error_names_layer():
    p = ParamStore()
    layers = [LayerSpec("dense", "first", 4, 3), LayerSpec("dense", "second", 5, 2)]
    gc.init_layers(p, layers, "g", 0)
    with pytest.raises(gc.ShapeError, match="second"):
        gc.forward(p, layers, np.ones((2, 4)))


def test_eval_forward_is_pure():
    layers = [LayerSpec("dense", "a", 6, 5), LayerSpec("elu"), LayerSpec("dropout", rate=0.5),
              LayerSpec("dense", "b", 5, 2), LayerSpec("sigmoid")]
    p = ParamStore()
    gc.init_layers(p, layers, "g", 1)
    x = np.random.default_rng(0).normal(size=(3, 6))
    a, _ = gc.forward(p, layers, x, "eval", seed=1)
    b, _ = gc.forward(p, layers, x, "eval", seed=2)
    assert np.array_equal(a.data, b.data)
    c, _ = gc.forward(p, layers, x, "train", seed=1)
    assert not np.array_equal(a.data, c.data)


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("conv3", "c", 1, 1, kernel=0)
    with pytest.raises(ValueError):
        LayerSpec("dropout", rate=1.0)
    with pytest.raises(ValueError):
        LayerSpec("batchnorm")


# -- backward -------------------------------------------------------------------

def test_sum_gradient_is_ones():
    p = _store(w=np.arange(6.0).reshape(2, 3))
    tape = Tape(p)
    g = gc.backward(tape, gc.tsum(tape.param("w")))
    assert np.array_equal(g["w"], np.ones((2, 3)))


def test_sigmoid_slope_at_zero():
    p = _store(w=np.array([[0.0]]))
    tape = Tape(p)
    loss = gc.tsum(gc.sigmoid(gc.matmul(Tensor(np.array([[2.0]])), tape.param("w"))))
    # d loss / d(wx) = 1/4, and d(wx)/dw = x = 2
    assert gc.backward(tape, loss)["w"][0, 0] == pytest.approx(0.5)


def test_untouched_parameter_gets_zero_gradient():
    p = _store(a=np.ones(3), b=np.ones(2))
    tape = Tape(p)
    g = gc.backward(tape, gc.tsum(tape.param("a")))
    assert np.array_equal(g["b"], np.zeros(2))


def test_non_scalar_loss_rejected():
    p = _store(a=np.ones(3))
    tape = Tape(p)
    with pytest.raises(gc.ShapeError):
        gc.backward(tape, tape.param("a"))


def test_quadratic_grad_check_exact():
    p = _store(p=np.random.default_rng(0).normal(size=(4, 3)))
    err = _check(p, lambda t: gc.tsum(gc.square(t.param("p"))))
    assert err < 1e-8


def test_three_layer_net_grad_check():
    layers = [LayerSpec("dense", "a", 5, 7), LayerSpec("elu"), LayerSpec("dense", "b", 7, 4),
              LayerSpec("elu"), LayerSpec("dense", "c", 4, 1), LayerSpec("sigmoid")]
    p = ParamStore()
    gc.init_layers(p, layers, "g", 2)
    x = np.random.default_rng(1).normal(size=(6, 5))
    err = _check(p, lambda t: gc.tsum(gc.forward(p, layers, x, tape=t)[0]))
    assert err < 1e-4


def test_encoder_stack_grad_check():
    layers = [LayerSpec("conv3", "c0", 1, 2, kernel=4, stride=2, padding=1), LayerSpec("elu"),
              LayerSpec("conv3", "c1", 2, 3, kernel=4, stride=2, padding=1), LayerSpec("elu"),
              LayerSpec("dense", "d", 24, 5)]
    p = ParamStore()
    gc.init_layers(p, layers, "g", 3)
    x = (np.random.default_rng(2).random((2, 1, 8, 8, 8)) < 0.4).astype(float)
    err = _check(p, lambda t: gc.tsum(gc.square(gc.forward(p, layers, x, tape=t)[0])))
    assert err < 1e-4


def test_decoder_stack_grad_check():
    layers = [LayerSpec("dense", "d", 4, 16), LayerSpec("elu"),
              LayerSpec("reshape", shape=(2, 2, 2, 2)),
              LayerSpec("tconv3", "t0", 2, 2, kernel=4, stride=2, padding=1), LayerSpec("elu"),
              LayerSpec("tconv3", "t1", 2, 1, kernel=4, stride=2, padding=1), LayerSpec("sigmoid")]
    p = ParamStore()
    gc.init_layers(p, layers, "g", 4)
    z = np.random.default_rng(3).normal(size=(2, 4))
    target = (np.random.default_rng(4).random((2, 1, 8, 8, 8)) < 0.5).astype(float)

    def build(t):
        out = gc.forward(p, layers, z, tape=t)[0]
        return gc.tsum(gc.square(out - target))
    assert _check(p, build) < 1e-4


@pytest.mark.parametrize("op", ["add", "sub", "mul", "exp", "log", "sqrt", "elu", "sigmoid",
                                "log_sigmoid", "mean", "getitem", "take_rows", "concat",
                                "reshape", "clip"])
def test_op_gradients(op):
    rng = np.random.default_rng(abs(hash(op)) % 2 ** 32)
    a0, b0 = rng.uniform(0.5, 2.0, (3, 4)), rng.uniform(0.5, 2.0, (1, 4))
    p = _store(a=a0, b=b0)

    def build(t):
        a, b = t.param("a"), t.param("b")
        f = {
            "add": lambda: a + b, "sub": lambda: a - b, "mul": lambda: a * b,
            "exp": lambda: gc.exp(a), "log": lambda: gc.log(a), "sqrt": lambda: gc.sqrt(a),
            "elu": lambda: gc.elu(a - 1.2), "sigmoid": lambda: gc.sigmoid(a),
            "log_sigmoid": lambda: gc.log_sigmoid(a - 1.0), "mean": lambda: gc.mean(a * a),
            "getitem": lambda: a[1:, ::2], "take_rows": lambda: gc.take_rows(a, [2, 0, 2]),
            "concat": lambda: gc.concat([a, b], axis=0), "reshape": lambda: gc.reshape(a, (4, 3)),
            "clip": lambda: gc.clip(a, 0.8, 1.7),
        }[op]()
        return gc.tsum(gc.square(f))
    assert _check(p, build) < 1e-6


def test_dropout_fixed_seed_grad_check():
    p = _store(a=np.random.default_rng(5).normal(size=(4, 6)))

    def build(t):
        return gc.tsum(gc.square(gc.dropout(t.param("a"), 0.3, np.random.default_rng(9))))
    assert _check(p, build) < 1e-6


def test_grad_check_detects_nondeterminism():
    p = _store(a=np.ones(3))
    counter = iter(range(10 ** 6))

    def loss_fn(ps):
        t = Tape(ps)
        return gc.tsum(t.param("a")) + float(next(counter)), t
    with pytest.raises(RuntimeError):
        gc.grad_check(p, loss_fn)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_broadcast_mul_add_gradients(n, m, seed):
    rng = np.random.default_rng(seed)
    p = _store(a=rng.normal(size=(n, m)), b=rng.normal(size=(m,)))
    assert _check(p, lambda t: gc.tsum(gc.square(t.param("a") * t.param("b") + t.param("b")))) < 1e-5


# -- Adam -----------------------------------------------------------------------

def test_adam_zero_gradient_no_change():
    p = _store(a=np.array([1.0, -2.0]))
    gc.adam_step(p, {"a": np.zeros(2)}, lr=0.1)
    assert np.array_equal(p["a"], [1.0, -2.0])
    assert p.step == 1


def test_adam_first_step_is_signed_lr():
    g = np.array([3.0, -0.2, 1e-3])
    p = _store(a=np.zeros(3))
    gc.adam_step(p, {"a": g}, lr=0.01, eps=1e-12)
    assert np.allclose(p["a"], -0.01 * np.sign(g), rtol=1e-8)


def test_adam_constant_gradient_step_tends_to_lr():
    p = _store(a=np.zeros(1))
    prev = 0.0
    for _ in range(5000):
        gc.adam_step(p, {"a": np.array([0.7])}, lr=1e-3)
        step, prev = prev - p["a"][0], p["a"][0]
    assert step == pytest.approx(1e-3, rel=1e-6)


def test_adam_zero_lr_bit_identical():
    a0 = np.random.default_rng(0).normal(size=(3, 3))
    p = _store(a=a0.copy())
    gc.adam_step(p, {"a": np.ones((3, 3))}, lr=0.0)
    assert np.array_equal(p["a"], a0)
    assert p.m["a"].shape == p["a"].shape == p.v["a"].shape
