"""Checkpoints, dataset files, metrics CSV and run configuration.

Binary formats are little-endian.  Floats in CSV use 17 significant
digits, which round-trips every float64.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .vae import ShapeVAE, TrainConfig, Vocab, config_dict
from .voxeldata import DataConfig, Dataset, LabelTuple, Sample
from .slam import EMResult, SlamConfig, TRAJECTORY_HEADER, World, trajectory_rows

CKPT_MAGIC = b"VSEM"
CKPT_VERSION = 1
GRID_MAGIC = b"VXG1"
GRID_HEADER = struct.Struct("<4sIII")


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic(4) version(u32) header_len(u32) header(JSON, utf-8) tensors
# The header lists every tensor with its shape and dtype in storage order.


def _tensor_list(model: ShapeVAE):
    p = model.params
    out = []
    for name in p.names():
        out += [(f"value/{name}", p.values[name]), (f"adam_m/{name}", p.m[name]),
                (f"adam_v/{name}", p.v[name])]
    out.append(("trained_pairs", model.trained_pairs.astype(np.uint8)))
    return out


def save_checkpoint(path, model: ShapeVAE):
    tensors = _tensor_list(model)
    header = {
        "config": config_dict(model.config),
        "vocab": asdict(model.vocab),
        "history": model.history,
        "adam_step": model.params.step,
        "groups": {n: model.params.groups[n] for n in model.params.names()},
        "tensors": [{"name": n, "shape": list(a.shape), "dtype": "u1" if a.dtype == np.uint8 else "f8"}
                    for n, a in tensors],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
        for _, a in tensors:
            dt = "<u1" if a.dtype == np.uint8 else "<f8"
            f.write(np.ascontiguousarray(a, dtype=dt).tobytes())


def load_checkpoint(path) -> ShapeVAE:
    data = Path(path).read_bytes()
    if len(data) < 12:
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at offset 0")
    version, hlen = struct.unpack_from("<II", data, 4)
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at offset 4")
    if 12 + hlen > len(data):
        raise FormatError(f"{path}: truncated header at offset {len(data)}")
    try:
        header = json.loads(data[12:12 + hlen])
    except ValueError as e:
        raise FormatError(f"{path}: corrupt header at offset 12: {e}") from None
    off = 12 + hlen
    arrays = {}
    for t in header["tensors"]:
        dt = np.dtype("<u1" if t["dtype"] == "u1" else "<f8")
        n = int(np.prod(t["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(data):
            raise FormatError(f"{path}: truncated tensor {t['name']!r} at offset {off}")
        arrays[t["name"]] = np.frombuffer(data, dt, count=n // dt.itemsize,
                                          offset=off).reshape(t["shape"]).copy()
        off += n
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes at offset {off}")
    config = TrainConfig.from_dict(header["config"])
    vocab = Vocab(**header["vocab"])
    params = gc.ParamStore()
    names = [t["name"][6:] for t in header["tensors"] if t["name"].startswith("value/")]
    for name in names:
        group = header["groups"][name]
        params.add(name, arrays[f"value/{name}"].astype(np.float64), group)
        params.m[name] = arrays[f"adam_m/{name}"].astype(np.float64)
        params.v[name] = arrays[f"adam_v/{name}"].astype(np.float64)
    params.step = int(header["adam_step"])
    model = ShapeVAE(config, vocab, params)
    fresh = ShapeVAE(config, vocab)
    for name in fresh.params.names():
        if name not in params or params[name].shape != fresh.params[name].shape:
            raise FormatError(f"{path}: parameter {name!r} does not match the stored config")
    model.history = header["history"]
    model.trained_pairs = arrays["trained_pairs"].astype(bool)
    return model


# ---------------------------------------------------------------------------
# voxel grids and datasets


def pack_grid(full, view=None, noisy=False) -> bytes:
    full = np.asarray(full, bool)
    r = full.shape[0]
    if full.shape != (r, r, r):
        raise ValueError(f"grid must be cubic, got {full.shape}")
    flags = (1 if noisy else 0) | (2 if view is not None else 0)
    out = GRID_HEADER.pack(GRID_MAGIC, r, flags, 0) + np.packbits(full.ravel(), bitorder="little").tobytes()
    if view is not None:
        out += np.packbits(np.asarray(view, bool).ravel(), bitorder="little").tobytes()
    return out


def unpack_grid(data: bytes, where="grid"):
    """Returns (full, view or None, noisy)."""
    if len(data) < GRID_HEADER.size:
        raise FormatError(f"{where}: truncated header at offset {len(data)}")
    magic, r, flags, _ = GRID_HEADER.unpack_from(data)
    if magic != GRID_MAGIC:
        raise FormatError(f"{where}: bad magic {magic!r} at offset 0")
    nbytes = (r ** 3 + 7) // 8
    need = GRID_HEADER.size + nbytes * (2 if flags & 2 else 1)
    if len(data) != need:
        raise FormatError(f"{where}: expected {need} bytes, found {len(data)} (offset {len(data)})")

    def grid(off):
        bits = np.unpackbits(np.frombuffer(data, np.uint8, nbytes, off), bitorder="little")
        return bits[:r ** 3].reshape(r, r, r).astype(np.float64)

    full = grid(GRID_HEADER.size)
    view = grid(GRID_HEADER.size + nbytes) if flags & 2 else None
    return full, view, bool(flags & 1)


def save_dataset(directory, ds: Dataset):
    d = Path(directory)
    (d / "grids").mkdir(parents=True, exist_ok=True)
    records = []
    for n, (s, sp) in enumerate(zip(ds.samples, ds.split)):
        name = f"grids/{n:06d}.vxg"
        (d / name).write_bytes(pack_grid(s.full, s.view, s.noisy))
        records.append({"file": name, "split": sp, **asdict(s.label)})
    manifest = {"format": "voxsem-dataset", "version": 1, "config": asdict(ds.config),
                "n_classes": ds.n_classes, "n_instances": ds.n_instances, "n_views": ds.n_views,
                "n_translations": ds.n_translations, "resolution": ds.resolution,
                "samples": records}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"no dataset manifest at {mpath}")
    m = json.loads(mpath.read_text())
    samples, split = [], []
    for rec in m["samples"]:
        full, view, noisy = unpack_grid((d / rec["file"]).read_bytes(), rec["file"])
        label = LabelTuple(rec["class_id"], rec["instance_id"], rec["viewpoint_id"],
                           rec["translation_id"])
        samples.append(Sample(label, full, view, noisy))
        split.append(rec["split"])
    return Dataset(samples, split, m["n_classes"], m["n_instances"], m["n_views"],
                   m["n_translations"], m["resolution"], DataConfig(**m["config"]))


# ---------------------------------------------------------------------------
# CSV


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    Path(path).write_text(buf.getvalue())


def read_csv(path):
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    return rows[0], rows[1:]


def _matrix_rows(m):
    return [[i, *row] for i, row in enumerate(np.asarray(m))]


def export_metrics(directory, report):
    """Write a MetricsReport or EMResult as CSV files; returns the paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    if isinstance(report, EMResult):
        return export_em(d, report)
    n = len(report.confusion)
    paths = [d / "confusion.csv", d / "distances_euclid.csv", d / "distances_cosine.csv",
             d / "pr_curve.csv", d / "summary.csv"]
    write_csv(paths[0], ["true"] + [f"pred_{j}" for j in range(n)], _matrix_rows(report.confusion))
    m = len(report.dist_euclid)
    write_csv(paths[1], ["class"] + [f"class_{j}" for j in range(m)], _matrix_rows(report.dist_euclid))
    write_csv(paths[2], ["class"] + [f"class_{j}" for j in range(m)], _matrix_rows(report.dist_cosine))
    write_csv(paths[3], ["recall", "precision"], [list(r) for r in np.asarray(report.pr_curve)])
    write_csv(paths[4], ["metric", "value"], sorted(report.summary().items()))
    return paths


def export_em(directory, res: EMResult, world: World | None = None):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = [d / "em_summary.csv", d / "em_cost.csv", d / "weights.csv"]
    write_csv(paths[0], ["metric", "value"], sorted(res.diagnostics.items()))
    write_csv(paths[1], ["iteration", "cost"], list(enumerate(res.cost_history)))
    export_weights(paths[2], res.weights)
    if world is not None:
        paths.append(d / "trajectory.csv")
        write_csv(paths[-1], TRAJECTORY_HEADER, trajectory_rows(world, res))
    return paths


def export_weights(path, weights):
    rows = [[t, k, j, w[k, j]] for t, w in enumerate(weights)
            for k in range(w.shape[0]) for j in range(w.shape[1])]
    write_csv(path, ["t", "detection", "landmark", "weight"], rows)


# ---------------------------------------------------------------------------
# run configuration


class ConfigError(ValueError):
    pass


_SECTIONS = {"train": TrainConfig, "data": DataConfig, "slam": SlamConfig}
_RUN_DEFAULTS = {"out": "out", "seed": 0}


class RunConfig:
    """Resolved settings: one dataclass per section plus ``run.out`` and ``run.seed``."""

    def __init__(self, train=None, data=None, slam=None, out="out", seed=0):
        self.train = train or TrainConfig()
        self.data = data or DataConfig()
        self.slam = slam or SlamConfig()
        self.out = out
        self.seed = int(seed)

    @staticmethod
    def _convert(default, raw, key):
        raw = raw.strip()
        try:
            if isinstance(default, bool):
                low = raw.lower()
                if low not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(raw)
                return low in ("true", "1", "yes")
            if isinstance(default, int):
                return int(raw)
            if isinstance(default, float):
                return float(raw)
            if isinstance(default, tuple):
                elem = type(default[0]) if default else float
                return tuple(elem(v) for v in raw.split(",") if v.strip())
            return raw
        except ValueError:
            raise ConfigError(f"{key}: cannot parse {raw!r} as {type(default).__name__}") from None

    def set(self, key, raw):
        if "." not in key:
            raise ConfigError(f"key {key!r} must look like section.name")
        section, name = key.split(".", 1)
        if section == "run":
            if name not in _RUN_DEFAULTS:
                raise ConfigError(f"unknown key {key!r}")
            setattr(self, name, self._convert(_RUN_DEFAULTS[name], raw, key))
            return
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section in {key!r}")
        obj = getattr(self, section)
        if name not in {f.name for f in fields(obj)}:
            raise ConfigError(f"unknown key {key!r}")
        setattr(obj, name, self._convert(getattr(obj, name), raw, key))

    @classmethod
    def parse(cls, text, source="<config>"):
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'section.key = value'")
            key, raw = line.split("=", 1)
            try:
                cfg.set(key.strip(), raw)
            except ConfigError as e:
                raise ConfigError(f"{source}:{n}: {e}") from None
        return cfg

    @classmethod
    def load(cls, path):
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {path}")
        return cls.parse(p.read_text(), str(path))

    def items(self):
        out = [("run.out", self.out), ("run.seed", self.seed)]
        for section in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                out.append((f"{section}.{f.name}", getattr(obj, f.name)))
        return out

    def to_text(self):
        def fmt(v):
            if isinstance(v, tuple):
                return ", ".join(fmt(x) for x in v)
            if isinstance(v, bool):
                return "true" if v else "false"
            return repr(float(v)) if isinstance(v, float) else str(v)
        return "".join(f"{k} = {fmt(v)}\n" for k, v in self.items())

    def validate(self):
        try:
            self.train.validate()
            self.data.validate()
            self.slam.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from None
        if self.train.resolution != self.data.resolution:
            raise ConfigError("train.resolution must equal data.resolution")
        return self

    def echo(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "resolved.cfg").write_text(self.to_text())
        return d / "resolved.cfg"
