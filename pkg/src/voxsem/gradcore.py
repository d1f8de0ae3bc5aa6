"""Minimal reverse-mode autodiff over numpy arrays.

Only what the shape networks need: dense, 3D (transposed) convolution,
ELU / sigmoid / dropout, a handful of elementwise and reduction ops,
Adam, and a finite-difference checker.  Everything runs in float64.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class Tensor:
    """A node in the computation graph.

    Leaves carry ``name`` when they wrap a parameter.  Interior nodes keep
    their parents and a closure that maps the output gradient to parent
    gradients.
    """

    __slots__ = ("data", "parents", "backward_fn", "name", "requires_grad")
    # make ndarray (op) Tensor defer to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data, parents=(), backward_fn=None, name=None, requires_grad=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, name={self.name!r})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, requires_grad=False)


def _unbroadcast(grad, shape):
    # only scalar / trailing-vector broadcasting is used by the callers
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise / structural ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor(a.data + b.data, (a, b), bw)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Tensor(a.data - b.data, (a, b), bw)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return Tensor(a.data * b.data, (a, b), bw)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} do not chain")

    def bw(g):
        return g @ b.data.T, a.data.T @ g

    return Tensor(a.data @ b.data, (a, b), bw)


def exp(a):
    out = np.exp(a.data)
    return Tensor(out, (a,), lambda g: (g * out,))


def log(a):
    return Tensor(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    return Tensor(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a):
    out = np.sqrt(a.data)
    return Tensor(out, (a,), lambda g: (0.5 * g / out,))


def relu(a):
    mask = a.data > 0
    return Tensor(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def elu(a):
    x = a.data
    neg = np.expm1(np.minimum(x, 0.0))
    out = np.where(x >= 0, x, neg)
    slope = np.where(x >= 0, 1.0, neg + 1.0)
    return Tensor(out, (a,), lambda g: (g * slope,))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    out = _sigmoid(a.data)
    return Tensor(out, (a,), lambda g: (g * out * (1.0 - out),))


def log_sigmoid(a):
    """log(sigmoid(x)) without overflow."""
    x = a.data
    out = np.minimum(x, 0.0) - np.log1p(np.exp(-np.abs(x)))
    return Tensor(out, (a,), lambda g: (g * _sigmoid(-x),))


def clip(a, lo, hi, one_sided=False):
    """Clamp to [lo, hi].

    Outside the interval the gradient is zero, unless ``one_sided`` is set:
    then it still flows when a descent step would move the value back
    inside (so a clamped value is never stuck on the wrong side).
    """
    x = a.data
    below, above = x < lo, x > hi
    inside = ~(below | above)

    def bw(g):
        if not one_sided:
            return (g * inside,)
        return (g * (inside | (below & (g < 0)) | (above & (g > 0))),)

    return Tensor(np.clip(x, lo, hi), (a,), bw)


def tsum(a, axis=None):
    shape = a.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor(a.data.sum(axis=axis), (a,), bw)


def mean(a):
    return mul(tsum(a), 1.0 / a.data.size)


def reshape(a, shape):
    old = a.shape
    return Tensor(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def getitem(a, idx):
    shape = a.shape

    def bw(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], (a,), bw)


def take_rows(a, rows):
    """``a[rows]`` for an integer row index array (repeats allowed)."""
    rows = np.asarray(rows, dtype=np.intp)
    return getitem(a, rows)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor(np.concatenate([t.data for t in tensors], axis=axis), tensors, bw)


def dropout(a, rate, rng):
    """Inverted dropout: survivors are scaled by 1/(1-rate)."""
    if rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return Tensor(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# 3D convolution


def _conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def _im2col(x, k, s, p):
    # x: (B, C, D, H, W) -> cols: (B, Do, Ho, Wo, C, k, k, k)
    if p:
        x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p)))
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))[:, :, ::s, ::s, ::s]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7))


def _col2im(cols, in_shape, k, s, p):
    # adjoint of _im2col
    B, C, D, H, W = in_shape
    _, Do, Ho, Wo = cols.shape[:4]
    out = np.zeros((B, C, D + 2 * p, H + 2 * p, W + 2 * p))
    cols = cols.transpose(0, 4, 5, 6, 7, 1, 2, 3)  # B, C, k, k, k, Do, Ho, Wo
    for i in range(k):
        for j in range(k):
            for m in range(k):
                out[:, :, i:i + s * Do:s, j:j + s * Ho:s, m:m + s * Wo:s] += cols[:, :, i, j, m]
    if p:
        out = out[:, :, p:-p, p:-p, p:-p]
    return out


def _conv_apply(x, w, s, p):
    # x: (B, C, D, H, W), w: (O, C, k, k, k) -> (B, O, Do, Ho, Wo)
    O, C, k = w.shape[0], w.shape[1], w.shape[2]
    cols = _im2col(x, k, s, p)
    B, Do, Ho, Wo = cols.shape[:4]
    out = cols.reshape(-1, C * k ** 3) @ w.reshape(O, -1).T
    return out.reshape(B, Do, Ho, Wo, O).transpose(0, 4, 1, 2, 3), cols


def _conv_input_grad(g, w, in_shape, s, p):
    # g: (B, O, Do, Ho, Wo) -> dx with in_shape
    O, C, k = w.shape[0], w.shape[1], w.shape[2]
    B, _, Do, Ho, Wo = g.shape
    gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, O)
    dcols = (gm @ w.reshape(O, -1)).reshape(B, Do, Ho, Wo, C, k, k, k)
    return _col2im(dcols, in_shape, k, s, p)


def conv3d(x, w, b, stride=1, padding=0):
    """x (B, Cin, D, H, W) * w (Cout, Cin, k, k, k) + b (Cout,)."""
    if x.data.ndim != 5 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv3d input {x.shape} does not match kernel {w.shape}")
    out, cols = _conv_apply(x.data, w.data, stride, padding)
    out += b.data[None, :, None, None, None]
    in_shape = x.shape

    def bw(g):
        O = w.shape[0]
        gm = g.transpose(0, 2, 3, 4, 1).reshape(-1, O)
        dw = (gm.T @ cols.reshape(gm.shape[0], -1)).reshape(w.shape)
        dx = _conv_input_grad(g, w.data, in_shape, stride, padding)
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    return Tensor(out, (x, w, b), bw)


def conv_transpose3d(x, w, b, stride=1, padding=0, output_padding=0):
    """Adjoint of conv3d.  w has shape (Cin, Cout, k, k, k)."""
    if x.data.ndim != 5 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"tconv3d input {x.shape} does not match kernel {w.shape}")
    k = w.shape[2]
    B, _, D, H, W = x.shape
    size = [(n - 1) * stride - 2 * padding + k + output_padding for n in (D, H, W)]
    out_shape = (B, w.shape[1], *size)
    out = _conv_input_grad(x.data, w.data, out_shape, stride, padding)
    out += b.data[None, :, None, None, None]

    def bw(g):
        dx, cols = _conv_apply(g, w.data, stride, padding)
        # crop in case output_padding produced extra windows
        dx = dx[:, :, :D, :H, :W]
        cols = cols[:, :D, :H, :W]
        xm = x.data.transpose(0, 2, 3, 4, 1).reshape(-1, w.shape[0])
        dw = (xm.T @ cols.reshape(xm.shape[0], -1)).reshape(w.shape)
        return dx, dw, g.sum(axis=(0, 2, 3, 4))

    return Tensor(out, (x, w, b), bw)


# ---------------------------------------------------------------------------
# parameters, layers, tape


def glorot_init(fan_in: int, fan_out: int, seed: int, shape=None) -> np.ndarray:
    if fan_in < 1 or fan_out < 1:
        raise ValueError(f"glorot_init needs positive fans, got ({fan_in}, {fan_out})")
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    if shape is None:
        shape = (fan_in, fan_out)
    return np.random.default_rng(seed).uniform(-bound, bound, size=shape)


@dataclass
class ParamStore:
    """Named parameter arrays with their group and Adam state."""

    values: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    def add(self, name, value, group):
        if name in self.values:
            raise KeyError(f"duplicate parameter {name!r}")
        self.values[name] = np.asarray(value, dtype=DTYPE)
        self.groups[name] = group
        self.m[name] = np.zeros_like(self.values[name])
        self.v[name] = np.zeros_like(self.values[name])

    def __getitem__(self, name):
        return self.values[name]

    def __contains__(self, name):
        return name in self.values

    def names(self, group=None):
        return [n for n in self.values if group is None or self.groups[n] == group]

    def copy(self) -> "ParamStore":
        return copy.deepcopy(self)

    def num_params(self):
        return sum(v.size for v in self.values.values())


class Tape:
    """Records which parameters a forward pass touched."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.leaves = {}

    def param(self, name) -> Tensor:
        leaf = self.leaves.get(name)
        if leaf is None:
            leaf = Tensor(self.params[name], name=name, requires_grad=True)
            self.leaves[name] = leaf
        return leaf


def _topo(root):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(tape: Tape, loss: Tensor) -> dict:
    """Gradient of a scalar ``loss`` for every parameter in ``tape.params``."""
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo(loss)):
        g = grads.pop(id(node), None)
        if g is None or node.backward_fn is None:
            if node.name is not None and g is not None:
                grads[id(node)] = g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    out = {}
    for name, value in tape.params.values.items():
        leaf = tape.leaves.get(name)
        g = grads.get(id(leaf)) if leaf is not None else None
        out[name] = np.zeros_like(value) if g is None else np.asarray(g).reshape(value.shape)
    return out


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential stack.

    ``kind`` is one of dense, conv3, tconv3, elu, sigmoid, dropout, reshape.
    ``name`` prefixes the parameter names (``<name>.W``, ``<name>.b``).
    """

    kind: str
    name: str = ""
    fan_in: int = 0
    fan_out: int = 0
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    output_padding: int = 0
    rate: float = 0.0
    shape: tuple = ()

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kernel < 1 or self.stride < 1:
            raise ValueError(f"layer {self.name!r}: kernel and stride must be >= 1")
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"layer {self.name!r}: dropout rate must be in [0, 1)")

    @property
    def has_params(self):
        return self.kind in ("dense", "conv3", "tconv3")


KINDS = ("dense", "conv3", "tconv3", "elu", "sigmoid", "dropout", "reshape")


def init_layers(params: ParamStore, layers, group: str, seed: int):
    """Glorot weights and zero biases for every parametric layer."""
    rng = np.random.default_rng(seed)
    for spec in layers:
        s = int(rng.integers(2 ** 31))
        if spec.kind == "dense":
            params.add(f"{spec.name}.W", glorot_init(spec.fan_in, spec.fan_out, s), group)
            params.add(f"{spec.name}.b", np.zeros(spec.fan_out), group)
        elif spec.kind == "conv3":
            k3 = spec.kernel ** 3
            shape = (spec.fan_out, spec.fan_in, spec.kernel, spec.kernel, spec.kernel)
            params.add(f"{spec.name}.W", glorot_init(spec.fan_in * k3, spec.fan_out * k3, s, shape), group)
            params.add(f"{spec.name}.b", np.zeros(spec.fan_out), group)
        elif spec.kind == "tconv3":
            k3 = spec.kernel ** 3
            shape = (spec.fan_in, spec.fan_out, spec.kernel, spec.kernel, spec.kernel)
            params.add(f"{spec.name}.W", glorot_init(spec.fan_in * k3, spec.fan_out * k3, s, shape), group)
            params.add(f"{spec.name}.b", np.zeros(spec.fan_out), group)


def forward(params: ParamStore, layers, x, mode="eval", seed=0, tape=None):
    """Run a sequential stack.  Returns (output, tape).

    Dropout is active only in ``mode == "train"``; its masks come from
    ``seed`` so a fixed seed gives a deterministic function.
    """
    if tape is None:
        tape = Tape(params)
    rng = np.random.default_rng(seed)
    h = as_tensor(x)
    for i, spec in enumerate(layers):
        label = spec.name or f"#{i}:{spec.kind}"
        try:
            h = _apply(spec, h, tape, mode, rng)
        except ShapeError as exc:
            raise ShapeError(f"layer {label}: {exc}") from None
    return h, tape


def _apply(spec, h, tape, mode, rng):
    kind = spec.kind
    if kind == "dense":
        if h.data.ndim != 2:
            h = reshape(h, (h.shape[0], -1))
        if h.shape[1] != spec.fan_in:
            raise ShapeError(f"expected {spec.fan_in} inputs, got {h.shape[1]}")
        return add(matmul(h, tape.param(f"{spec.name}.W")), tape.param(f"{spec.name}.b"))
    if kind == "conv3":
        if h.data.ndim != 5 or h.shape[1] != spec.fan_in:
            raise ShapeError(f"expected (B, {spec.fan_in}, D, H, W), got {h.shape}")
        if min(h.shape[2:]) + 2 * spec.padding < spec.kernel:
            raise ShapeError(f"input {h.shape} smaller than kernel {spec.kernel}")
        return conv3d(h, tape.param(f"{spec.name}.W"), tape.param(f"{spec.name}.b"),
                      spec.stride, spec.padding)
    if kind == "tconv3":
        if h.data.ndim != 5 or h.shape[1] != spec.fan_in:
            raise ShapeError(f"expected (B, {spec.fan_in}, D, H, W), got {h.shape}")
        return conv_transpose3d(h, tape.param(f"{spec.name}.W"), tape.param(f"{spec.name}.b"),
                                spec.stride, spec.padding, spec.output_padding)
    if kind == "elu":
        return elu(h)
    if kind == "sigmoid":
        return sigmoid(h)
    if kind == "dropout":
        return dropout(h, spec.rate, rng) if mode == "train" else h
    if kind == "reshape":
        if int(np.prod(spec.shape)) != int(np.prod(h.shape[1:])):
            raise ShapeError(f"cannot reshape {h.shape[1:]} to {spec.shape}")
        return reshape(h, (h.shape[0], *spec.shape))
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# optimisation and checking


def adam_step(params: ParamStore, grads: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam, in place.  Returns ``params``."""
    params.step += 1
    t = params.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        value = params.values[name]
        if g.shape != value.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, expected {value.shape}")
        m = params.m[name] = beta1 * params.m[name] + (1.0 - beta1) * g
        v = params.v[name] = beta2 * params.v[name] + (1.0 - beta2) * g * g
        if lr != 0.0:
            params.values[name] = value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params


def grad_check(params: ParamStore, loss_fn, eps=1e-6, names=None, max_entries=None, seed=0):
    """Compare analytic gradients with central differences.

    ``loss_fn(params)`` must return ``(loss_tensor, tape)``.  The error is
    measured per parameter tensor as
    ``|a - n| / max(|a|, |n|, 1e-8)`` with Euclidean norms, and the maximum
    over tensors is returned.  ``max_entries`` caps how many entries per
    tensor are probed (chosen at random from ``seed``).
    """
    loss, tape = loss_fn(params)
    again, _ = loss_fn(params)
    if loss.data.item() != again.data.item():
        raise RuntimeError("loss_fn is not deterministic; fix dropout/sampling seeds")
    analytic = backward(tape, loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in names or list(params.values):
        value = params.values[name]
        flat = value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for n, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn(params)[0].data.item()
            flat[i] = orig - eps
            down = loss_fn(params)[0].data.item()
            flat[i] = orig
            numeric[n] = (up - down) / (2 * eps)
        a = analytic[name].reshape(-1)[idx]
        err = np.linalg.norm(a - numeric) / max(np.linalg.norm(a), np.linalg.norm(numeric), 1e-8)
        worst = max(worst, err)
    return worst
