"""Synthetic voxel shapes, single-view rendering and dataset assembly.

Grids are boolean numpy arrays of shape (D, D, D) indexed [x, y, z] with z
pointing up.  Voxel (i, j, k) occupies the unit cube [i, i+1] x [j, j+1] x
[k, k+1].
"""
from __future__ import annotations

import functools
import itertools
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

CLASS_NAMES = ("box", "tube", "pyramid", "table", "chair", "l_bracket")
MIN_RESOLUTION = 4
MIN_SHAPE_RESOLUTION = 8


def offset_table(max_shift=2):
    """All integer offsets with every component in [-max_shift, max_shift]."""
    r = range(-max_shift, max_shift + 1)
    return np.array(list(itertools.product(r, r, r)), dtype=int)


def _check_grid(grid):
    grid = np.asarray(grid)
    if grid.ndim != 3 or len(set(grid.shape)) != 1:
        raise ValueError(f"expected a cubic grid, got shape {grid.shape}")
    if grid.shape[0] < MIN_RESOLUTION:
        raise ValueError(f"grid resolution {grid.shape[0]} below {MIN_RESOLUTION}")
    return grid.astype(bool)


# ---------------------------------------------------------------------------
# procedural shapes

# per-class integer parameter ranges at resolution 16; instances are
# distinct points of the product grid
_PARAM_RANGES = {
    "box": ((7, 9), (5, 7), (4, 6)),           # size x, y, z
    "tube": ((4, 5), (9, 11), (3, 4)),         # outer radius, height, 2 * inner radius
    "pyramid": ((9, 11), (6, 8)),              # base side, height
    "table": ((9, 11), (7, 9)),                # top x, top y
    "chair": ((7, 8), (5, 8)),                 # seat side, back height
    "l_bracket": ((9, 11), (5, 7)),            # length, width
}


@functools.lru_cache(maxsize=None)
def _instance_grid(class_id, seed):
    ranges = _PARAM_RANGES[CLASS_NAMES[class_id]]
    grid = list(itertools.product(*[range(lo, hi + 1) for lo, hi in ranges]))
    order = np.random.default_rng([seed, class_id]).permutation(len(grid))
    return [grid[i] for i in order]


def instance_params(class_id, instance_id, resolution, seed=0):
    """Integer dimensions of one instance, scaled to ``resolution``."""
    grid = _instance_grid(class_id, seed)
    f = resolution / 16.0
    return tuple(max(1, int(round(n * f))) for n in grid[instance_id % len(grid)])


def _thick(r):
    return max(1, int(round(r / 8)))


def _place(grid, x0, x1, y0, y1, z0, z1):
    grid[max(x0, 0):x1, max(y0, 0):y1, max(z0, 0):z1] = True


def _box(r, p):
    sx, sy, sz = p
    g = np.zeros((r, r, r), bool)
    _place(g, 0, sx, 0, sy, 0, sz)
    return g


def _tube(r, p):
    radius, height, inner2 = p
    g = np.zeros((r, r, r), bool)
    c = radius
    ii, jj = np.meshgrid(np.arange(2 * radius) + 0.5, np.arange(2 * radius) + 0.5, indexing="ij")
    rho = np.hypot(ii - c, jj - c)
    inner = inner2 / 2.0
    ring = (rho < radius + 0.75) & (rho >= inner)
    g[:2 * radius, :2 * radius, :height] = ring[:, :, None]
    return g


def _pyramid(r, p):
    base, height = p
    g = np.zeros((r, r, r), bool)
    for z in range(height):
        half = base / 2.0 * (1.0 - z / height)
        lo = int(np.floor(base / 2.0 - half + 1e-9))
        hi = int(np.ceil(base / 2.0 + half - 1e-9))
        if hi <= lo:
            lo, hi = base // 2 - 1 + base % 2, base // 2 + 1
        _place(g, lo, hi, lo, hi, z, z + 1)
    return g


def _table(r, p):
    a, b = p
    t = _thick(r)
    leg = 3 * t
    g = np.zeros((r, r, r), bool)
    _place(g, 0, a, 0, b, leg, leg + t)
    for x0, y0 in ((0, 0), (a - t, 0), (0, b - t), (a - t, b - t)):
        _place(g, x0, x0 + t, y0, y0 + t, 0, leg)
    return g


def _chair(r, p):
    seat, back = p
    t = _thick(r)
    leg = 2 * t
    g = np.zeros((r, r, r), bool)
    _place(g, 0, seat, 0, seat, leg, leg + t)
    for x0, y0 in ((0, 0), (seat - t, 0), (0, seat - t), (seat - t, seat - t)):
        _place(g, x0, x0 + t, y0, y0 + t, 0, leg)
    _place(g, 0, seat, seat - t, seat, leg + t, leg + t + back)
    return g


def _l_bracket(r, p):
    length, width = p
    t = _thick(r)
    height = 4 * t
    g = np.zeros((r, r, r), bool)
    _place(g, 0, length, 0, width, 0, t)
    _place(g, 0, t, 0, width, t, height)
    return g


_BUILDERS = (_box, _tube, _pyramid, _table, _chair, _l_bracket)


def _center(g):
    idx = np.argwhere(g)
    lo, hi = idx.min(axis=0), idx.max(axis=0) + 1
    r = g.shape[0]
    shift = (r - (hi - lo)) // 2 - lo
    return np.roll(g, tuple(shift), axis=(0, 1, 2))


def generate_shape(class_id, instance_id, resolution=16, seed=0):
    """Deterministic procedural shape for a (class, instance) pair."""
    if not 0 <= class_id < len(CLASS_NAMES):
        raise ValueError(f"class_id {class_id} outside [0, {len(CLASS_NAMES)})")
    if instance_id < 0:
        raise ValueError(f"negative instance_id {instance_id}")
    if resolution < MIN_SHAPE_RESOLUTION:
        raise ValueError(f"resolution {resolution} too small to render class "
                         f"{CLASS_NAMES[class_id]!r} (need >= {MIN_SHAPE_RESOLUTION})")
    params = instance_params(class_id, instance_id, resolution, seed)
    g = _BUILDERS[class_id](resolution, params)
    return _center(g)


def jaccard(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = np.logical_or(a, b).sum()
    return 1.0 if union == 0 else float(np.logical_and(a, b).sum() / union)


iou = jaccard


# ---------------------------------------------------------------------------
# rendering


def camera_pose(viewpoint_id, n_views, resolution, camera_distance=2.5, elevation_deg=30.0):
    """Camera centre and orthonormal (forward, right, up) frame."""
    c = np.full(3, resolution / 2.0)
    az = 2.0 * np.pi * viewpoint_id / n_views
    el = np.deg2rad(elevation_deg)
    dist = camera_distance * resolution / 2.0
    pos = c + dist * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    fwd = (c - pos) / dist
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    up = np.cross(right, fwd)
    return pos, fwd, right, up


def camera_rays(viewpoint_id, n_views, resolution, camera_distance=2.5, elevation_deg=30.0,
                pixels=None, fov_deg=90.0):
    """Ray origin and unit directions through pixel centres."""
    pos, fwd, right, up = camera_pose(viewpoint_id, n_views, resolution, camera_distance, elevation_deg)
    n = pixels or 8 * resolution
    half = np.tan(np.deg2rad(fov_deg) / 2.0)
    u = ((np.arange(n) + 0.5) / n * 2.0 - 1.0) * half
    uu, vv = np.meshgrid(u, u, indexing="ij")
    d = fwd[None] + uu.reshape(-1, 1) * right[None] + vv.reshape(-1, 1) * up[None]
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return pos, d


def _slab(origin, dirs, lo, hi):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origin) * inv
        t1 = (hi - origin) * inv
    tmin = np.nanmax(np.minimum(t0, t1), axis=-1)
    tmax = np.nanmin(np.maximum(t0, t1), axis=-1)
    return tmin, tmax


@functools.lru_cache(maxsize=64)
def _traversals(viewpoint_id, n_views, resolution, camera_distance, elevation_deg, pixels):
    """Ordered flat voxel indices visited by every ray (padded with -1)."""
    origin, dirs = camera_rays(viewpoint_id, n_views, resolution, camera_distance,
                               elevation_deg, pixels)
    r = resolution
    tmin, tmax = _slab(origin, dirs, 0.0, float(r))
    hit = tmax >= np.maximum(tmin, 0.0)
    dirs = dirs[hit]
    t = np.maximum(tmin[hit], 0.0)
    start = origin + t[:, None] * dirs
    cell = np.clip(np.floor(start).astype(int), 0, r - 1)
    step = np.where(dirs > 0, 1, -1)
    with np.errstate(divide="ignore"):
        inv = np.where(dirs != 0, 1.0 / np.abs(dirs), np.inf)
    nxt = np.where(step > 0, cell + 1, cell).astype(float)
    tnext = np.where(dirs != 0, (nxt - origin) / np.where(dirs != 0, dirs, 1.0), np.inf)
    n = len(dirs)
    rows = np.arange(n)
    paths = []
    active = np.ones(n, bool)
    while active.any():
        flat = np.where(active, (cell[:, 0] * r + cell[:, 1]) * r + cell[:, 2], -1)
        paths.append(flat)
        axis = np.argmin(tnext, axis=1)
        cell[rows, axis] += step[rows, axis]
        tnext[rows, axis] += inv[rows, axis]
        active &= ((cell >= 0) & (cell < r)).all(axis=1)
    return np.stack(paths, axis=1).astype(np.int32)


def render_single_view(full, viewpoint_id, n_views=12, camera_distance=2.5,
                       elevation_deg=30.0, pixels=None):
    """Visible surface of ``full`` from one camera on the azimuth circle.

    Every pixel ray keeps only the first occupied voxel it enters.
    """
    full = _check_grid(full)
    if not full.any():
        raise ValueError("cannot render an empty grid")
    r = full.shape[0]
    paths = _traversals(int(viewpoint_id), int(n_views), r, float(camera_distance),
                        float(elevation_deg), pixels)
    flat = full.reshape(-1)
    occ = np.where(paths >= 0, flat[np.maximum(paths, 0)], False)
    any_hit = occ.any(axis=1)
    first = occ.argmax(axis=1)
    visible = paths[any_hit, first[any_hit]]
    out = np.zeros(r ** 3, bool)
    out[visible] = True
    return out.reshape(full.shape)


# ---------------------------------------------------------------------------
# augmentation


def translate(grid, offset):
    """Shift occupancy by an integer offset, dropping what leaves the grid."""
    grid = _check_grid(grid)
    out = np.zeros_like(grid)
    src, dst = [], []
    for o, n in zip(offset, grid.shape):
        o = int(o)
        if abs(o) >= n:
            return out
        src.append(slice(max(0, -o), n - max(0, o)))
        dst.append(slice(max(0, o), n - max(0, -o)))
    out[tuple(dst)] = grid[tuple(src)]
    return out


def add_noise(grid, flip_rate, seed):
    """Flip each voxel independently with probability ``flip_rate``."""
    if not 0.0 <= flip_rate <= 0.1:
        raise ValueError(f"flip_rate {flip_rate} outside [0, 0.1]")
    grid = _check_grid(grid)
    flips = np.random.default_rng(seed).random(grid.shape) < flip_rate
    return grid ^ flips


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class LabelTuple:
    class_id: int
    instance_id: int
    viewpoint_id: int
    translation_id: int


@dataclass
class Sample:
    label: LabelTuple
    full: np.ndarray
    view: np.ndarray
    noisy: bool = False


@dataclass
class DataConfig:
    n_classes: int = 4
    n_instances: int = 8
    n_views: int = 12
    resolution: int = 16
    max_shift: int = 2
    noise_rate: float = 0.01
    max_noise_rate: float = 0.05
    split: str = "instance"
    n_test_instances: int = 2
    test_view_stride: int = 4
    camera_distance: float = 2.5
    elevation_deg: float = 30.0
    shape_seed: int = 0
    augment: bool = True

    def validate(self):
        if not 1 <= self.n_classes <= len(CLASS_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(CLASS_NAMES)}]")
        if self.n_views not in (12, 24):
            raise ValueError("n_views must be 12 or 24")
        if self.split not in ("instance", "view", "none"):
            raise ValueError(f"unknown split {self.split!r}")
        if self.split == "instance" and not 0 <= self.n_test_instances < self.n_instances:
            raise ValueError("n_test_instances must leave at least one training instance")
        if not 0.0 <= self.noise_rate <= self.max_noise_rate:
            raise ValueError(f"noise_rate {self.noise_rate} above max {self.max_noise_rate}")
        if self.resolution < MIN_SHAPE_RESOLUTION:
            raise ValueError(f"resolution {self.resolution} below {MIN_SHAPE_RESOLUTION}")


@dataclass
class Dataset:
    samples: list
    split: list  # "train" / "test" per sample
    n_classes: int
    n_instances: int
    n_views: int
    n_translations: int
    resolution: int
    config: DataConfig = field(default_factory=DataConfig)

    def subset(self, which):
        return [s for s, sp in zip(self.samples, self.split) if sp == which]

    @property
    def train(self):
        return self.subset("train")

    @property
    def test(self):
        return self.subset("test")


def _is_test(cfg, instance_id, viewpoint_id):
    if cfg.split == "instance":
        return instance_id >= cfg.n_instances - cfg.n_test_instances
    if cfg.split == "view":
        return viewpoint_id % cfg.test_view_stride == cfg.test_view_stride - 1
    return False


def _threads():
    try:
        return max(1, int(os.environ.get("VOXSEM_THREADS", "")))
    except ValueError:
        return os.cpu_count() or 1


def build_dataset(config: DataConfig, seed=0) -> Dataset:
    """Full shape, rendered view, shared translation, clean and noisy copy.

    Samples are ordered by (class, instance, viewpoint, copy); copy 1 is the
    noisy one.  No mirror flipping is applied.
    """
    config.validate()
    table = offset_table(config.max_shift)
    centre = len(table) // 2
    r = config.resolution
    shapes = {(c, i): generate_shape(c, i, r, config.shape_seed)
              for c in range(config.n_classes) for i in range(config.n_instances)}
    keys = [(c, i, v) for c in range(config.n_classes)
            for i in range(config.n_instances) for v in range(config.n_views)]

    def make(idx):
        c, i, v = keys[idx]
        rng = np.random.default_rng([seed, idx])
        full = shapes[(c, i)]
        view = render_single_view(full, v, config.n_views, config.camera_distance,
                                  config.elevation_deg)
        tid = int(rng.integers(len(table))) if config.augment else centre
        full_t = translate(full, table[tid])
        view_t = translate(view, table[tid])
        label = LabelTuple(c, i, v, tid)
        noisy = add_noise(view_t, config.noise_rate, int(rng.integers(2 ** 31)))
        return [Sample(label, full_t, view_t, False), Sample(label, full_t, noisy, True)]

    with ThreadPoolExecutor(_threads()) as pool:
        pairs = list(pool.map(make, range(len(keys))))
    samples, split = [], []
    for (c, i, v), pair in zip(keys, pairs):
        tag = "test" if _is_test(config, i, v) else "train"
        for s in pair:
            samples.append(s)
            split.append(tag)
    return Dataset(samples, split, config.n_classes, config.n_instances, config.n_views,
                   len(table), r, config)


# ---------------------------------------------------------------------------
# mesh ingestion


def read_off(path_or_text):
    """Parse an OFF file into an (n, 3, 3) triangle array (fan triangulation)."""
    if "\n" in str(path_or_text) or str(path_or_text).lstrip().startswith("OFF"):
        text = str(path_or_text)
    else:
        with open(path_or_text) as fh:
            text = fh.read()
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.extend(line.split())
    if not tokens or not tokens[0].startswith("OFF"):
        raise ValueError("missing OFF header")
    head = tokens[0][3:]
    pos = 1
    if head:
        tokens.insert(1, head)
    nv, nf = int(tokens[pos]), int(tokens[pos + 1])
    pos += 3
    verts = np.array(tokens[pos:pos + 3 * nv], dtype=float).reshape(nv, 3)
    pos += 3 * nv
    tris = []
    for _ in range(nf):
        k = int(tokens[pos])
        idx = [int(t) for t in tokens[pos + 1:pos + 1 + k]]
        pos += 1 + k
        for a in range(1, k - 1):
            tris.append(verts[[idx[0], idx[a], idx[a + 1]]])
    return np.array(tris, dtype=float).reshape(-1, 3, 3)


def _tri_box_overlap(tri, centres, half=0.5, tol=1e-9):
    """Separating-axis test of one triangle against many axis-aligned cubes."""
    v = tri[None, :, :] - centres[:, None, :]  # (n, 3, 3)
    edges = [tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]]
    axes = [np.eye(3)[i] for i in range(3)]
    normal = np.cross(edges[0], edges[1])
    if np.linalg.norm(normal) > 1e-12:
        axes.append(normal)
    for e in edges:
        for i in range(3):
            a = np.cross(e, np.eye(3)[i])
            if np.linalg.norm(a) > 1e-12:
                axes.append(a)
    ok = np.ones(len(centres), bool)
    for a in axes:
        p = v @ a
        rad = half * np.abs(a).sum()
        ok &= ~((p.min(axis=1) > rad + tol) | (p.max(axis=1) < -rad - tol))
    return ok


def fit_to_grid(triangles, resolution):
    """Uniformly scale and centre triangles so their bounding box fills the grid."""
    tri = np.asarray(triangles, float)
    lo = tri.reshape(-1, 3).min(axis=0)
    hi = tri.reshape(-1, 3).max(axis=0)
    extent = (hi - lo).max()
    scale = resolution / extent if extent > 0 else 1.0
    centre = (lo + hi) / 2.0
    return (tri - centre) * scale + resolution / 2.0


def mesh_voxelize(triangles, resolution, fit=True):
    """Surface voxelization (closed-cube overlap) plus interior fill."""
    tri = np.asarray(triangles, float).reshape(-1, 3, 3)
    if len(tri) == 0:
        raise ValueError("empty mesh")
    if not np.isfinite(tri).all():
        raise ValueError("mesh has non-finite vertices")
    if fit:
        tri = fit_to_grid(tri, resolution)
    r = resolution
    grid = np.zeros((r, r, r), bool)
    for t in tri:
        lo = np.clip(np.ceil(t.min(axis=0)).astype(int) - 1, 0, r - 1)
        hi = np.clip(np.floor(t.max(axis=0)).astype(int), 0, r - 1)
        if (hi < lo).any():
            continue
        cells = np.stack(np.meshgrid(*[np.arange(a, b + 1) for a, b in zip(lo, hi)],
                                     indexing="ij"), -1).reshape(-1, 3)
        hit = _tri_box_overlap(t, cells + 0.5)
        grid[tuple(cells[hit].T)] = True
    return ndimage.binary_fill_holes(grid)
