"""EM semantic SLAM with exact data-association enumeration.

Poses are (x, y, z, yaw).  Each detection of keyframe t is attributed to
pose t; the association maps detections to landmarks.  The E-step weighs
every association hypothesis, the M-step solves a weighted least-squares
problem for geometry and an independent argmax for each landmark label.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp

from .inference import gaussian_logpdf, kappa_terms, log_kappa_e
from .vae import ShapeVAE, encode
from .voxeldata import _threads

LOG_2PI = math.log(2.0 * math.pi)


class EnumerationCapError(ValueError):
    pass


class SingularSystemError(RuntimeError):
    pass


def wrap_angle(a):
    """Map angles into [-pi, pi)."""
    return (np.asarray(a, float) + np.pi) % (2.0 * np.pi) - np.pi


def rot_z(yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _drot_t(yaw):
    # derivative of rot_z(yaw).T with respect to yaw
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[-s, c, 0.0], [-c, -s, 0.0], [0.0, 0.0, 0.0]])


def to_frame(pose, point):
    """Express a world point in the frame of ``pose``."""
    pose = np.asarray(pose, float)
    return rot_z(pose[3]).T @ (np.asarray(point, float) - pose[:3])


def relative_pose(a, b):
    """Pose of b seen from a, as (dx, dy, dz, dyaw)."""
    d = to_frame(a, b[:3])
    return np.array([d[0], d[1], d[2], float(wrap_angle(b[3] - a[3]))])


def compose(a, rel):
    p = np.asarray(a[:3], float) + rot_z(a[3]) @ np.asarray(rel[:3], float)
    return np.array([p[0], p[1], p[2], float(wrap_angle(a[3] + rel[3]))])


# ---------------------------------------------------------------------------
# labels and prior means


@dataclass
class PriorTable:
    """Prior mean mu^C for every label the solver may assign."""

    labels: list          # [(class_id, instance_id), ...]
    means: np.ndarray     # (L, d)

    def __post_init__(self):
        self.labels = [tuple(int(v) for v in lab) for lab in self.labels]
        self.means = np.asarray(self.means, float)
        if len(self.labels) != len(self.means):
            raise ValueError("labels and means differ in length")

    def index(self, label):
        return self.labels.index(tuple(int(v) for v in label))

    @property
    def dim(self):
        return self.means.shape[1]

    @classmethod
    def from_model(cls, model: ShapeVAE, only_trained=True):
        means = model.class_prior_means()
        C, I, _ = means.shape
        mask = model.trained_pairs if only_trained else np.ones((C, I), bool)
        labels = [(c, i) for c in range(C) for i in range(I) if mask[c, i]]
        return cls(labels, np.array([means[c, i] for c, i in labels]))

    @classmethod
    def synthetic(cls, n_classes=4, n_instances=2, dim=16, separation=4.0, seed=0):
        """Random means with every pair at least ``separation`` apart."""
        rng = np.random.default_rng(seed)
        n = n_classes * n_instances
        scale = separation * max(1.0, n ** (1.0 / dim))
        for _ in range(1000):
            means = rng.normal(0.0, scale, (n, dim))
            d = np.linalg.norm(means[:, None] - means[None], axis=-1)
            if n < 2 or d[np.triu_indices(n, 1)].min() >= separation:
                break
            scale *= 1.1
        labels = [(c, i) for c in range(n_classes) for i in range(n_instances)]
        return cls(labels, means)


# ---------------------------------------------------------------------------
# world


@dataclass
class NoiseModel:
    sigma_p: float = 0.1          # detection position noise (m)
    sigma_odo_pos: float = 0.1    # odometry translation noise (m)
    sigma_odo_yaw: float = 0.03   # odometry heading noise (rad)

    def validate(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"noise.{k} must be positive, got {v}")
        return self


@dataclass
class SlamConfig:
    n_landmarks: int = 5
    n_keyframes: int = 20
    loop_radius: float = 3.0
    loops: float = 1.0
    landmark_extent: float = 4.0
    sensor_range: float = 12.0
    sigma_p: float = 0.1
    sigma_f: float = 0.5
    sigma_odo_pos: float = 0.1
    sigma_odo_yaw: float = 0.03
    injective: bool = False
    enum_cap: int = 100_000
    max_iter: int = 30
    tol: float = 1e-6
    gn_max_iter: int = 50
    gn_tol: float = 1e-8
    init_gate: float = 1.0
    n_classes: int = 4
    n_instances: int = 2
    prior_separation: float = 4.0
    prior_seed: int = 0

    def noise(self):
        return NoiseModel(self.sigma_p, self.sigma_odo_pos, self.sigma_odo_yaw)

    def validate(self):
        if self.n_landmarks < 1:
            raise ValueError("slam.n_landmarks must be at least 1")
        if self.n_keyframes < 2:
            raise ValueError("slam.n_keyframes must be at least 2")
        for k in ("sensor_range", "sigma_f", "sigma_p", "sigma_odo_pos", "sigma_odo_yaw"):
            if getattr(self, k) < 0:
                raise ValueError(f"slam.{k} must be non-negative")
        return self


@dataclass
class Detection:
    t: int
    sp: np.ndarray                 # landmark position in the robot frame
    feature: np.ndarray            # mu^{sC}
    view: np.ndarray | None = None
    full: np.ndarray | None = None
    truth: int = -1                # originating landmark, evaluation only


@dataclass
class World:
    poses: np.ndarray              # (T, 4) true poses
    landmarks: np.ndarray          # (M, 3)
    labels: list                   # true (class, instance) per landmark
    odometry: np.ndarray           # (T-1, 4) measured relative poses
    detections: list               # per keyframe, list of Detection
    noise: NoiseModel
    table: PriorTable

    @property
    def T(self):
        return len(self.poses)

    @property
    def M(self):
        return len(self.landmarks)


def loop_trajectory(n, radius=3.0, loops=1.0):
    th = np.linspace(0.0, 2.0 * np.pi * loops, n, endpoint=False)
    poses = np.zeros((n, 4))
    poses[:, 0] = radius * np.cos(th)
    poses[:, 1] = radius * np.sin(th)
    poses[:, 3] = wrap_angle(th + np.pi / 2)
    return poses


def simulate_world(config: SlamConfig, seed=0, table: PriorTable | None = None) -> World:
    """Loop trajectory, random labelled landmarks, noisy odometry and detections."""
    config.validate()
    rng = np.random.default_rng(seed)
    if table is None:
        table = PriorTable.synthetic(config.n_classes, config.n_instances,
                                     separation=config.prior_separation, seed=config.prior_seed)
    noise = config.noise()
    T, M = config.n_keyframes, config.n_landmarks
    poses = loop_trajectory(T, config.loop_radius, config.loops)
    ext = config.landmark_extent
    landmarks = np.column_stack([rng.uniform(-ext, ext, (M, 2)), rng.uniform(0.0, 1.0, M)])
    label_idx = rng.integers(0, len(table.labels), M)
    odometry = np.array([relative_pose(poses[t - 1], poses[t]) for t in range(1, T)])
    odometry[:, :3] += rng.normal(0.0, noise.sigma_odo_pos, (T - 1, 3))
    odometry[:, 3] += rng.normal(0.0, noise.sigma_odo_yaw, T - 1)
    detections = []
    for t in range(T):
        frame = []
        for j in rng.permutation(M):
            local = to_frame(poses[t], landmarks[j])
            if np.linalg.norm(local) > config.sensor_range:
                continue
            sp = local + rng.normal(0.0, noise.sigma_p, 3)
            feat = table.means[label_idx[j]] + rng.normal(0.0, config.sigma_f, table.dim)
            frame.append(Detection(t, sp, feat, truth=int(j)))
        detections.append(frame)
    return World(poses, landmarks, [table.labels[k] for k in label_idx], odometry,
                 detections, noise, table)


def odometry_trajectory(world: World):
    """Dead-reckoned poses starting from the true first pose."""
    est = [world.poses[0].copy()]
    for u in world.odometry:
        est.append(compose(est[-1], u))
    return np.array(est)


# ---------------------------------------------------------------------------
# association enumeration


def enumerate_associations(K, M, injective=False, cap=100_000):
    """All maps from K detections to M landmarks, as an (n, K) int array."""
    if M < 1:
        raise ValueError("need at least one landmark")
    if K == 0:
        return np.zeros((1, 0), dtype=np.int64)
    if M ** K > cap:
        raise EnumerationCapError(
            f"{M}^{K} = {M ** K} associations exceed the cap of {cap}; "
            "reduce the number of landmarks or detections per keyframe")
    if injective:
        if K > M:
            raise ValueError(f"no injective association of {K} detections into {M} landmarks")
        rows = list(itertools.permutations(range(M), K))
    else:
        rows = list(itertools.product(range(M), repeat=K))
    return np.array(rows, dtype=np.int64).reshape(-1, K)


def association_subset(assoc, i, j):
    """Rows of ``assoc`` in which detection i goes to landmark j."""
    return assoc[assoc[:, i] == j]


def _weights_from_loglik(loglik, injective, cap):
    """Marginal weights w[i, j] and the log normaliser from per-pair logs (K, M)."""
    K, M = loglik.shape
    assoc = enumerate_associations(K, M, injective, cap)
    if K == 0:
        return np.zeros((0, M)), 0.0
    score = loglik[np.arange(K)[None], assoc].sum(axis=1)
    total = logsumexp(score)
    w = np.empty((K, M))
    for i in range(K):
        for j in range(M):
            sel = assoc[:, i] == j
            w[i, j] = np.exp(logsumexp(score[sel]) - total) if sel.any() else 0.0
    # the subsets partition the hypotheses, so rows sum to one up to rounding
    w /= w.sum(axis=1, keepdims=True)
    return w, float(total)


def position_loglik(det: Detection, pose, landmarks, sigma_p):
    """log N(s^p; frame-transformed landmark, sigma_p^2 I) for every landmark."""
    pred = (np.asarray(landmarks, float) - pose[:3]) @ rot_z(pose[3])
    r = det.sp[None] - pred
    return -1.5 * (LOG_2PI + 2.0 * math.log(sigma_p)) - 0.5 * np.sum(r * r, axis=1) / sigma_p ** 2


def _pair_loglik_reduced(frame, pose, landmarks, label_means, noise):
    if not frame:
        return np.zeros((0, len(landmarks)))
    out = np.array([position_loglik(d, pose, landmarks, noise.sigma_p) for d in frame])
    if label_means is not None:
        feats = np.array([d.feature for d in frame])
        out = out + gaussian_logpdf(feats[:, None, :], label_means[None])
    return out


def _map_frames(fn, n):
    with ThreadPoolExecutor(_threads()) as pool:
        return list(pool.map(fn, range(n)))


def weights_reduced(detections, poses, landmarks, label_means, noise: NoiseModel,
                    injective=False, cap=100_000, return_lognorm=False):
    """Association weights per keyframe from position and prior-density terms.

    ``label_means`` holds mu^C of each landmark's current label (M, d); pass
    None to weigh by position only.
    """
    def one(t):
        ll = _pair_loglik_reduced(detections[t], poses[t], landmarks, label_means, noise)
        return _weights_from_loglik(ll, injective, cap)

    res = _map_frames(one, len(detections))
    weights = [w for w, _ in res]
    if return_lognorm:
        return weights, np.array([z for _, z in res])
    return weights


def detection_kappas(model: ShapeVAE, det: Detection, labels, n_samples=8, seed=0, tables=None):
    """Log of the full factor product a*k_e*k_vt*k_c for each label (L,)."""
    post = encode(model, det.view, mode="eval")
    tables = tables if tables is not None else model.prior_tables()
    log_e = log_kappa_e(model, post, det.full, n_samples, seed)
    return np.array([kappa_terms(model, det.view, det.full, lab, tables=tables, post=post,
                                 log_e=log_e).log_total for lab in labels])


def weights_full(detections, poses, landmarks, labels, model: ShapeVAE, noise: NoiseModel,
                 injective=False, cap=100_000, n_samples=8, seed=0, log_scale=None):
    """Association weights with the complete likelihood factor product.

    Every detection carries its view and full shape.  ``log_scale`` adds an
    arbitrary per-detection constant to the label likelihood, which must
    leave the weights unchanged.
    """
    tables = model.prior_tables()
    uniq = sorted(set(tuple(int(v) for v in lab) for lab in labels))
    col = np.array([uniq.index(tuple(int(v) for v in lab)) for lab in labels])

    def one(t):
        frame = detections[t]
        if not frame:
            return np.zeros((0, len(landmarks)))
        ll = np.array([position_loglik(d, poses[t], landmarks, noise.sigma_p) for d in frame])
        lab = np.array([detection_kappas(model, d, uniq, n_samples, seed, tables)[col]
                        for d in frame])
        if log_scale is not None:
            lab = lab + np.asarray(log_scale[t], float)[:, None]
        return _weights_from_loglik(ll + lab, injective, cap)[0]

    return _map_frames(one, len(detections))


# ---------------------------------------------------------------------------
# maximisation


def _residuals(x, odometry, detections, weights, noise, first, M):
    """Whitened residual vector and Jacobian over the free variables."""
    T = len(odometry) + 1
    poses = np.vstack([first, x[:4 * (T - 1)].reshape(T - 1, 4)])
    lms = x[4 * (T - 1):].reshape(M, 3)
    nfree = len(x)
    rows_r, rows_j = [], []

    def pcol(t):
        return None if t == 0 else 4 * (t - 1)

    def lcol(j):
        return 4 * (T - 1) + 3 * j

    so, sy, sp = noise.sigma_odo_pos, noise.sigma_odo_yaw, noise.sigma_p
    for t in range(1, T):
        a, b, u = poses[t - 1], poses[t], odometry[t - 1]
        Rt = rot_z(a[3]).T
        dp = b[:3] - a[:3]
        r = np.empty(4)
        r[:3] = (Rt @ dp - u[:3]) / so
        r[3] = float(wrap_angle(b[3] - a[3] - u[3])) / sy
        J = np.zeros((4, nfree))
        cb, ca = pcol(t), pcol(t - 1)
        J[:3, cb:cb + 3] = Rt / so
        J[3, cb + 3] = 1.0 / sy
        if ca is not None:
            J[:3, ca:ca + 3] = -Rt / so
            J[:3, ca + 3] = _drot_t(a[3]) @ dp / so
            J[3, ca + 3] = -1.0 / sy
        rows_r.append(r)
        rows_j.append(J)
    for t, frame in enumerate(detections):
        if not frame:
            continue
        x_t = poses[t]
        Rt, dRt = rot_z(x_t[3]).T, _drot_t(x_t[3])
        ct = pcol(t)
        for k, det in enumerate(frame):
            for j in range(M):
                w = weights[t][k, j]
                if w <= 0.0:
                    continue
                s = math.sqrt(w) / sp
                d = lms[j] - x_t[:3]
                r = s * (Rt @ d - det.sp)
                J = np.zeros((3, nfree))
                cl = lcol(j)
                J[:, cl:cl + 3] = s * Rt
                if ct is not None:
                    J[:, ct:ct + 3] = -s * Rt
                    J[:, ct + 3] = s * (dRt @ d)
                rows_r.append(r)
                rows_j.append(J)
    if not rows_r:
        return np.zeros(0), np.zeros((0, nfree))
    return np.concatenate(rows_r), np.vstack(rows_j)


def geometry_cost(weights, detections, poses, landmarks, odometry, noise):
    """Half the weighted sum of squared whitened residuals."""
    poses = np.asarray(poses, float)
    x = np.concatenate([poses[1:].ravel(), np.asarray(landmarks, float).ravel()])
    r, _ = _residuals(x, odometry, detections, weights, noise, poses[0], len(landmarks))
    return 0.5 * float(r @ r)


@dataclass
class GeometryResult:
    poses: np.ndarray
    landmarks: np.ndarray
    cost_history: list
    iterations: int


def maximize_geometry(weights, detections, poses, landmarks, odometry, noise: NoiseModel,
                      max_iter=50, tol=1e-8, damping=1e-9) -> GeometryResult:
    """Damped Gauss-Newton on odometry plus weighted detection factors.

    The first pose is held fixed.  A step is kept only if it does not raise
    the cost, so the returned history never increases.
    """
    poses = np.array(poses, float)
    landmarks = np.array(landmarks, float)
    M = len(landmarks)
    first = poses[0].copy()
    x = np.concatenate([poses[1:].ravel(), landmarks.ravel()])
    r, J = _residuals(x, odometry, detections, weights, noise, first, M)
    cost = 0.5 * float(r @ r)
    history = [cost]
    lam = damping
    it = 0
    for it in range(1, max_iter + 1):
        H = J.T @ J
        g = J.T @ r
        scale = np.maximum(np.diag(H), 1e-12)
        accepted = False
        for _ in range(40):
            A = H + lam * np.diag(scale)
            try:
                step = -np.linalg.solve(A, g)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                lam = max(lam * 10.0, 1e-12)
                continue
            x_new = x + step
            r_new, J_new = _residuals(x_new, odometry, detections, weights, noise, first, M)
            cost_new = 0.5 * float(r_new @ r_new)
            if cost_new <= cost:
                accepted = True
                break
            lam = max(lam * 10.0, 1e-12)
        if not accepted:
            if step is None:
                raise SingularSystemError("normal equations stay singular under damping")
            break
        x, r, J, cost = x_new, r_new, J_new, cost_new
        history.append(cost)
        lam = max(lam / 10.0, damping)
        if np.linalg.norm(step) < tol:
            break
    T = len(poses)
    out_poses = np.vstack([first, x[:4 * (T - 1)].reshape(T - 1, 4)])
    out_poses[:, 3] = wrap_angle(out_poses[:, 3])
    out_poses[0] = first
    return GeometryResult(out_poses, x[4 * (T - 1):].reshape(M, 3), history, it)


def label_scores(weights, detections, table: PriorTable, M):
    """Sum over detections of w * log p(feature | label), shape (M, L)."""
    scores = np.zeros((M, len(table.labels)))
    for t, frame in enumerate(detections):
        if not frame:
            continue
        feats = np.array([d.feature for d in frame])
        lp = gaussian_logpdf(feats[:, None, :], table.means[None])  # (K, L)
        scores += weights[t].T @ lp
    return scores


def maximize_labels(weights, detections, table: PriorTable, M):
    """Index into ``table.labels`` per landmark; ties go to the lowest index."""
    return label_scores(weights, detections, table, M).argmax(axis=1)


# ---------------------------------------------------------------------------
# EM


def odometry_nll(poses, odometry, noise):
    r = []
    for t in range(1, len(poses)):
        u = relative_pose(poses[t - 1], poses[t])
        r.append(np.concatenate([(u[:3] - odometry[t - 1][:3]) / noise.sigma_odo_pos,
                                 [float(wrap_angle(u[3] - odometry[t - 1][3])) / noise.sigma_odo_yaw]]))
    r = np.concatenate(r) if r else np.zeros(0)
    n = len(poses) - 1
    const = n * (1.5 * (LOG_2PI + 2 * math.log(noise.sigma_odo_pos))
                 + 0.5 * (LOG_2PI + 2 * math.log(noise.sigma_odo_yaw)))
    return 0.5 * float(r @ r) + const


def marginal_nll(detections, poses, landmarks, label_means, odometry, noise, injective=False,
                 cap=100_000):
    """Odometry NLL minus the log evidence of every keyframe's detections."""
    _, lognorm = weights_reduced(detections, poses, landmarks, label_means, noise, injective,
                                 cap, return_lognorm=True)
    return odometry_nll(poses, odometry, noise) - float(np.sum(lognorm))


def initial_landmarks(detections, poses, M, gate=1.0):
    """Seed landmarks from detections in time order, skipping near-duplicates."""
    pos, seeds = [], []
    for t, frame in enumerate(detections):
        R, p = rot_z(poses[t][3]), poses[t][:3]
        for k, d in enumerate(frame):
            world = R @ d.sp + p
            if all(np.linalg.norm(world - q) > gate for q in pos):
                pos.append(world)
                seeds.append((t, k))
            if len(pos) == M:
                return np.array(pos), seeds
    raise ValueError(f"only {len(pos)} distinct landmarks seen, expected {M}")


@dataclass
class EMResult:
    poses: np.ndarray
    landmarks: np.ndarray
    labels: list
    weights: list
    cost_history: list
    iterations: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)


def _one_hot_weights(detections, seeds, M):
    w = [np.zeros((len(f), M)) for f in detections]
    for j, (t, k) in enumerate(seeds):
        w[t][k, j] = 1.0
    return w


def em_run(world: World, config: SlamConfig, table: PriorTable | None = None,
           init_poses=None, init_landmarks=None, noise: NoiseModel | None = None) -> EMResult:
    """Alternate association weights, geometry and labels until the cost settles.

    The recorded cost is the odometry NLL minus the log evidence of the
    detections, i.e. the expected joint NLL minus the entropy of the
    association posterior.  Exact E-steps and non-increasing M-steps keep it
    from rising.  ``noise`` overrides the world's noise model, which is
    needed when the world itself was simulated without noise.
    """
    table = table or world.table
    noise = (noise or world.noise).validate()
    dets = world.detections
    M = world.M
    poses = odometry_trajectory(world) if init_poses is None else np.array(init_poses, float)
    if init_landmarks is None:
        lms, seeds = initial_landmarks(dets, poses, M, config.init_gate)
        labels = maximize_labels(_one_hot_weights(dets, seeds, M), dets, table, M)
    else:
        lms, seeds = np.array(init_landmarks, float), None
        w0 = weights_reduced(dets, poses, lms, None, noise, config.injective, config.enum_cap)
        labels = maximize_labels(w0, dets, table, M)

    def cost(p, l, lab):
        return marginal_nll(dets, p, l, table.means[lab], world.odometry, noise,
                            config.injective, config.enum_cap)

    history = [cost(poses, lms, labels)]
    weights, converged, it = None, False, 0
    for it in range(1, config.max_iter + 1):
        weights = weights_reduced(dets, poses, lms, table.means[labels], noise,
                                  config.injective, config.enum_cap)
        geo = maximize_geometry(weights, dets, poses, lms, world.odometry, noise,
                                config.gn_max_iter, config.gn_tol)
        poses, lms = geo.poses, geo.landmarks
        labels = maximize_labels(weights, dets, table, M)
        history.append(cost(poses, lms, labels))
        if history[-2] - history[-1] < config.tol:
            converged = True
            break
    weights = weights_reduced(dets, poses, lms, table.means[labels], noise,
                              config.injective, config.enum_cap)
    res = EMResult(poses, lms, [table.labels[k] for k in labels], weights, history, it, converged)
    res.diagnostics = diagnostics(world, res, seeds)
    return res


def pose_rmse(est, truth):
    return float(np.sqrt(np.mean(np.sum((np.asarray(est)[:, :3] - truth[:, :3]) ** 2, axis=1))))


def diagnostics(world: World, res: EMResult, seeds=None):
    """Errors against ground truth; landmark j maps to the true landmark it was seeded from."""
    if seeds is not None:
        match = [world.detections[t][k].truth for t, k in seeds]
    else:
        match = list(range(world.M))
    lm_err = res.landmarks - world.landmarks[match]
    correct = [tuple(res.labels[j]) == tuple(world.labels[m]) for j, m in enumerate(match)]
    return {
        "pose_rmse": pose_rmse(res.poses, world.poses),
        "odometry_rmse": pose_rmse(odometry_trajectory(world), world.poses),
        "landmark_rmse": float(np.sqrt(np.mean(np.sum(lm_err ** 2, axis=1)))),
        "label_accuracy": float(np.mean(correct)),
        "iterations": res.iterations,
    }


# ---------------------------------------------------------------------------
# text serialisation


def _fmt(v):
    return repr(float(v))


def world_to_text(world: World) -> str:
    out = ["# voxsem world v1",
           f"noise {_fmt(world.noise.sigma_p)} {_fmt(world.noise.sigma_odo_pos)} "
           f"{_fmt(world.noise.sigma_odo_yaw)}",
           f"table {len(world.table.labels)} {world.table.dim}"]
    for lab, mu in zip(world.table.labels, world.table.means):
        out.append("prior %d %d " % lab + " ".join(_fmt(v) for v in mu))
    for p in world.poses:
        out.append("pose " + " ".join(_fmt(v) for v in p))
    for l, lab in zip(world.landmarks, world.labels):
        out.append("landmark %d %d " % tuple(lab) + " ".join(_fmt(v) for v in l))
    for u in world.odometry:
        out.append("odometry " + " ".join(_fmt(v) for v in u))
    for frame in world.detections:
        for d in frame:
            out.append(f"detection {d.t} {d.truth} " + " ".join(_fmt(v) for v in d.sp)
                       + " | " + " ".join(_fmt(v) for v in d.feature))
    return "\n".join(out) + "\n"


def world_from_text(text: str) -> World:
    noise, labels_t, means_t = None, [], []
    poses, lms, labs, odo, dets = [], [], [], [], []
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        key, *rest = line.split()
        try:
            if key == "noise":
                noise = NoiseModel(*map(float, rest))
            elif key == "table":
                pass
            elif key == "prior":
                labels_t.append((int(rest[0]), int(rest[1])))
                means_t.append([float(v) for v in rest[2:]])
            elif key == "pose":
                poses.append([float(v) for v in rest])
            elif key == "landmark":
                labs.append((int(rest[0]), int(rest[1])))
                lms.append([float(v) for v in rest[2:]])
            elif key == "odometry":
                odo.append([float(v) for v in rest])
            elif key == "detection":
                bar = rest.index("|")
                dets.append(Detection(int(rest[0]), np.array([float(v) for v in rest[2:bar]]),
                                      np.array([float(v) for v in rest[bar + 1:]]),
                                      truth=int(rest[1])))
            else:
                raise ValueError(f"unknown record {key!r}")
        except (ValueError, IndexError, TypeError) as e:
            raise ValueError(f"line {n}: {e}") from None
    if noise is None or not poses:
        raise ValueError("world file lacks noise or poses")
    frames = [[] for _ in poses]
    for d in dets:
        frames[d.t].append(d)
    return World(np.array(poses), np.array(lms).reshape(-1, 3), labs,
                 np.array(odo).reshape(-1, 4), frames, noise,
                 PriorTable(labels_t, np.array(means_t)))


def em_result_to_text(res: EMResult) -> str:
    out = ["# voxsem em result v1", f"iterations {res.iterations}",
           f"converged {int(res.converged)}",
           "cost " + " ".join(_fmt(c) for c in res.cost_history)]
    for k in sorted(res.diagnostics):
        out.append(f"diag {k} {_fmt(res.diagnostics[k])}")
    for p in res.poses:
        out.append("pose " + " ".join(_fmt(v) for v in p))
    for l, lab in zip(res.landmarks, res.labels):
        out.append("landmark %d %d " % tuple(lab) + " ".join(_fmt(v) for v in l))
    for t, w in enumerate(res.weights):
        for k, row in enumerate(w):
            out.append(f"weight {t} {k} " + " ".join(_fmt(v) for v in row))
    return "\n".join(out) + "\n"


def em_result_from_text(text: str) -> EMResult:
    it, conv, cost, diag = 0, False, [], {}
    poses, lms, labs, wrows = [], [], [], []
    for line in text.splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, *rest = line.split()
        if key == "iterations":
            it = int(rest[0])
        elif key == "converged":
            conv = bool(int(rest[0]))
        elif key == "cost":
            cost = [float(v) for v in rest]
        elif key == "diag":
            diag[rest[0]] = float(rest[1])
        elif key == "pose":
            poses.append([float(v) for v in rest])
        elif key == "landmark":
            labs.append((int(rest[0]), int(rest[1])))
            lms.append([float(v) for v in rest[2:]])
        elif key == "weight":
            wrows.append((int(rest[0]), int(rest[1]), [float(v) for v in rest[2:]]))
        else:
            raise ValueError(f"unknown record {key!r}")
    T = len(poses)
    M = len(lms)
    weights = [[] for _ in range(T)]
    for t, _, row in sorted(wrows, key=lambda r: (r[0], r[1])):
        weights[t].append(row)
    weights = [np.array(w).reshape(-1, M) for w in weights]
    return EMResult(np.array(poses), np.array(lms).reshape(-1, 3), labs, weights, cost, it,
                    conv, diag)


def trajectory_rows(world: World, res: EMResult):
    """Rows of (t, true pose, odometry pose, EM pose) for plotting."""
    odo = odometry_trajectory(world)
    return [[t, *world.poses[t], *odo[t], *res.poses[t]] for t in range(world.T)]


TRAJECTORY_HEADER = ["t", "true_x", "true_y", "true_z", "true_yaw", "odo_x", "odo_y", "odo_z",
                     "odo_yaw", "em_x", "em_y", "em_z", "em_yaw"]
