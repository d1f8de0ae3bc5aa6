import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxsem import store, vae, slam
from voxsem.inference import MetricsReport
from voxsem.store import ConfigError, FormatError, RunConfig
from voxsem.vae import ShapeVAE, TrainConfig, Vocab
from voxsem.voxeldata import DataConfig, build_dataset

SMALL = dict(resolution=8, channels=(4, 8), dense_hidden=(16,), prior_hidden=8)


@pytest.fixture
def model():
    m = ShapeVAE(TrainConfig(**SMALL), Vocab(2, 2, 12, 5))
    m.history = [{"total": 1.5, "kl": 0.5, "recon": 1.0, "reg": 0.0}]
    m.trained_pairs = np.array([[True, False], [True, True]])
    return m


# -- checkpoints ------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, model):
    views = np.random.default_rng(0).random((3, 8, 8, 8)) < 0.3
    p = tmp_path / "m.ckpt"
    store.save_checkpoint(p, model)
    m2 = store.load_checkpoint(p)
    a, b = vae.encode(model, views), vae.encode(m2, views)
    assert np.array_equal(a.mean, b.mean) and np.array_equal(a.std, b.std)
    for n in model.params.names():
        assert np.array_equal(model.params[n], m2.params[n])
        assert np.array_equal(model.params.m[n], m2.params.m[n])
    assert m2.history == model.history
    assert np.array_equal(m2.trained_pairs, model.trained_pairs)
    assert m2.config == model.config and m2.vocab == model.vocab
    store.save_checkpoint(tmp_path / "again.ckpt", m2)
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_bad_magic(tmp_path, model):
    p = tmp_path / "m.ckpt"
    store.save_checkpoint(p, model)
    data = bytearray(p.read_bytes())
    data[0] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(FormatError, match="offset 0"):
        store.load_checkpoint(p)


def test_checkpoint_bad_version_and_truncation(tmp_path, model):
    p = tmp_path / "m.ckpt"
    store.save_checkpoint(p, model)
    data = p.read_bytes()
    p.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(FormatError, match="version"):
        store.load_checkpoint(p)
    p.write_bytes(data[:-5])
    with pytest.raises(FormatError, match="truncated"):
        store.load_checkpoint(p)
    p.write_bytes(data[:7])
    with pytest.raises(FormatError):
        store.load_checkpoint(p)


def test_checkpoint_other_block_dims_rejected_on_use(tmp_path):
    m = ShapeVAE(TrainConfig(**SMALL, block_dims=(4, 4, 2, 2)), Vocab(2, 2, 12, 5))
    store.save_checkpoint(tmp_path / "m.ckpt", m)
    m2 = store.load_checkpoint(tmp_path / "m.ckpt")
    with pytest.raises(ValueError, match="latent dim"):
        vae.decode(m2, np.zeros(24))


# -- grids and datasets ------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 2 ** 31 - 1), st.booleans(), st.booleans())
def test_grid_round_trip(r, seed, with_view, noisy):
    rng = np.random.default_rng(seed)
    full = rng.random((r, r, r)) < 0.5
    view = rng.random((r, r, r)) < 0.5 if with_view else None
    f2, v2, n2 = store.unpack_grid(store.pack_grid(full, view, noisy))
    assert np.array_equal(f2.astype(bool), full) and n2 == noisy
    assert (v2 is None) == (view is None)
    if with_view:
        assert np.array_equal(v2.astype(bool), view)


def test_grid_errors():
    data = store.pack_grid(np.ones((4, 4, 4)))
    with pytest.raises(FormatError, match="magic"):
        store.unpack_grid(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        store.unpack_grid(data[:-1])
    with pytest.raises(ValueError):
        store.pack_grid(np.ones((2, 3, 4)))


def test_dataset_round_trip(tmp_path):
    ds = build_dataset(DataConfig(n_classes=2, n_instances=2, n_test_instances=1, resolution=8), 0)
    store.save_dataset(tmp_path / "ds", ds)
    ds2 = store.load_dataset(tmp_path / "ds")
    assert ds2.split == ds.split and ds2.config == ds.config
    for a, b in zip(ds.samples, ds2.samples):
        assert a.label == b.label and a.noisy == b.noisy
        assert np.array_equal(a.full, b.full) and np.array_equal(a.view, b.view)
    with pytest.raises(FileNotFoundError):
        store.load_dataset(tmp_path / "nothing")


# -- CSV --------------------------------------------------------------------------------------------

@settings(max_examples=100, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_csv_floats_round_trip(x):
    assert float(store._cell(x)) == x


def _report(pr=None):
    cm = np.array([[3, 1], [0, 4]])
    e = np.array([[0.0, 2.5], [2.5, 0.0]])
    pr = np.array([[0.0, 1.0], [1.0, 0.5]]) if pr is None else pr
    return MetricsReport(cm, np.array([0.75, 1.0]), 0.875, e, e / 10, pr, 0.9, 0.8, 0.6, 1.0, 2.0)


def test_export_metrics_layout_and_repeatability(tmp_path):
    paths = store.export_metrics(tmp_path / "a", _report())
    store.export_metrics(tmp_path / "b", _report())
    names = [p.name for p in paths]
    assert names == ["confusion.csv", "distances_euclid.csv", "distances_cosine.csv",
                     "pr_curve.csv", "summary.csv"]
    assert (tmp_path / "a" / "confusion.csv").read_text() == "true,pred_0,pred_1\n0,3,1\n1,0,4\n"
    for n in names:
        assert (tmp_path / "a" / n).read_bytes() == (tmp_path / "b" / n).read_bytes()
    header, rows = store.read_csv(tmp_path / "a" / "summary.csv")
    assert header == ["metric", "value"] and dict(rows)["accuracy"] == "0.875"


def test_export_empty_pr_curve(tmp_path):
    store.export_metrics(tmp_path, _report(np.zeros((0, 2))))
    assert (tmp_path / "pr_curve.csv").read_text() == "recall,precision\n"


def test_export_em_result(tmp_path):
    cfg = slam.SlamConfig(n_keyframes=5, n_landmarks=2)
    w = slam.simulate_world(cfg, 0)
    res = slam.em_run(w, cfg)
    paths = store.export_metrics(tmp_path, res)
    assert [p.name for p in paths] == ["em_summary.csv", "em_cost.csv", "weights.csv"]
    _, rows = store.read_csv(tmp_path / "em_cost.csv")
    assert [float(r[1]) for r in rows] == res.cost_history
    store.export_em(tmp_path, res, w)
    header, rows = store.read_csv(tmp_path / "trajectory.csv")
    assert header == list(slam.TRAJECTORY_HEADER) and len(rows) == 5


# -- run configuration -------------------------------------------------------------------------------

def test_config_parse_and_echo(tmp_path):
    text = """# a comment
train.lr = 0.002
train.channels = 4, 8
data.resolution = 8
train.resolution = 8
slam.injective = true
run.seed = 7
"""
    cfg = RunConfig.parse(text).validate()
    assert cfg.train.lr == 0.002 and cfg.train.channels == (4, 8)
    assert cfg.slam.injective is True and cfg.seed == 7
    cfg.echo(tmp_path)
    again = RunConfig.load(tmp_path / "resolved.cfg")
    assert again.to_text() == cfg.to_text()
    assert RunConfig().train.epochs == TrainConfig().epochs


@pytest.mark.parametrize("text,match", [
    ("train.bogus = 1", "unknown key"),
    ("nosection = 1", "section.name"),
    ("model.lr = 1", "unknown section"),
    ("train.lr = fast", "cannot parse"),
    ("just words", "expected"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        RunConfig.parse(text)


def test_config_cross_section_check():
    with pytest.raises(ConfigError, match="resolution"):
        RunConfig.parse("train.resolution = 8").validate()
    with pytest.raises(ConfigError):
        RunConfig.parse("slam.n_keyframes = 1").validate()


def test_config_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="missing.cfg"):
        RunConfig.load(tmp_path / "missing.cfg")
