"""Oracle suites for the exact identities the library relies on.

Each suite returns a SuiteResult with the measured error, the tolerance
and whether it passed.  The CLI ``verify`` command and the acceptance tests
both run these.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import gradcore as gc
from .inference import mle_scores, mle_by_kappa
from .slam import Detection, NoiseModel, weights_full, weights_reduced
from .vae import ShapeVAE, TrainConfig, Vocab, encode, kl_term, loss_graph
from .voxeldata import DataConfig


@dataclass
class SuiteResult:
    name: str
    measured: float
    tolerance: float
    passed: bool
    seconds: float
    detail: str = ""

    def line(self):
        tag = "PASS" if self.passed else "FAIL"
        return (f"{tag}  {self.name:<26} measured={self.measured:.3e}  "
                f"tol={self.tolerance:.1e}  {self.seconds:.2f}s  {self.detail}").rstrip()


def _timed(fn):
    t0 = time.perf_counter()
    out = fn()
    return out, time.perf_counter() - t0


def tiny_model(seed=0, resolution=8, vocab=Vocab(3, 2, 4, 3)):
    """Small untrained model for identity checks: two conv layers, one dense."""
    cfg = TrainConfig(resolution=resolution, channels=(4, 8), dense_hidden=(), prior_hidden=16,
                      dropout=0.0, seed=seed)
    return ShapeVAE(cfg, vocab)


def random_grids(rng, n, r=8, fill=0.3):
    return (rng.random((n, r, r, r)) < fill).astype(float)


def kl_oracle(n_cases=20, n_mc=10 ** 6, seed=0, tol=0.01) -> SuiteResult:
    """Closed-form KL against a Monte-Carlo estimate on random posteriors."""
    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_cases):
            d = int(rng.integers(1, 9))
            mu, prior = rng.normal(0, 1, d), rng.normal(0, 1, d)
            std = np.exp(rng.uniform(-0.7, 0.3, d))
            z = mu + std * rng.standard_normal((n_mc, d))
            logq = np.sum(-0.5 * ((z - mu) / std) ** 2 - np.log(std), axis=1)
            logp = np.sum(-0.5 * (z - prior) ** 2, axis=1)
            mc = float(np.mean(logq - logp))
            worst = max(worst, abs(mc - float(kl_term(mu, std, prior))))
        return worst
    worst, sec = _timed(run)
    return SuiteResult("kl_monte_carlo", worst, tol, worst < tol, sec)


def factored_kl_identity(n_cases=100, seed=0, tol=1e-9) -> SuiteResult:
    """exp(-KL) against prior density * exp(entropy) / exp(sum(var)/2)."""
    from .inference import gaussian_entropy, gaussian_logpdf

    def run():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_cases):
            d = int(rng.integers(1, 17))
            mu, prior = rng.normal(0, 1, d), rng.normal(0, 1, d)
            std = np.exp(rng.uniform(-1.0, 0.5, d))
            lhs = np.exp(-kl_term(mu, std, prior))
            rhs = np.exp(gaussian_logpdf(mu, prior)) * np.exp(gaussian_entropy(std)) \
                / np.exp(0.5 * np.sum(std ** 2))
            worst = max(worst, abs(lhs - rhs) / abs(lhs))
        return worst
    worst, sec = _timed(run)
    return SuiteResult("factored_kl_identity", worst, tol, worst < tol, sec)


def random_association_instance(rng, model: ShapeVAE, max_t=3, max_k=3, max_m=3):
    """Random poses, landmarks, labels and detections carrying views and full shapes."""
    r = model.config.resolution
    C, I = model.vocab.n_classes, model.vocab.n_instances
    T = int(rng.integers(1, max_t + 1))
    M = int(rng.integers(1, max_m + 1))
    poses = np.column_stack([rng.normal(0, 1, (T, 3)), rng.uniform(-np.pi, np.pi, T)])
    lms = rng.normal(0, 1, (M, 3))
    labels = [(int(rng.integers(C)), int(rng.integers(I))) for _ in range(M)]
    dets = []
    for t in range(T):
        K = int(rng.integers(0, max_k + 1))
        views, fulls = random_grids(rng, K, r), random_grids(rng, K, r, 0.4)
        feats = encode(model, views).feature_mean if K else []
        dets.append([Detection(t, rng.normal(0, 1, 3), feats[k], view=views[k], full=fulls[k])
                     for k in range(K)])
    return dets, poses, lms, labels


def weight_equivalence(n_cases=100, seed=0, tol=1e-9, norm_tol=1e-12) -> tuple:
    """Full likelihood-product weights against reduced weights, plus row sums."""
    def run():
        rng = np.random.default_rng(seed)
        model = tiny_model(seed)
        means = model.class_prior_means()
        noise = NoiseModel(0.5, 0.1, 0.1)
        worst, worst_norm = 0.0, 0.0
        for _ in range(n_cases):
            dets, poses, lms, labels = random_association_instance(rng, model)
            lm_means = np.array([means[c, i] for c, i in labels])
            wr = weights_reduced(dets, poses, lms, lm_means, noise)
            wf = weights_full(dets, poses, lms, labels, model, noise)
            for a, b in zip(wr, wf):
                if a.size:
                    worst = max(worst, float(np.abs(a - b).max()))
                    worst_norm = max(worst_norm, float(np.abs(a.sum(1) - 1).max()),
                                     float(np.abs(b.sum(1) - 1).max()))
        return worst, worst_norm
    (worst, worst_norm), sec = _timed(run)
    return (SuiteResult("weights_full_vs_reduced", worst, tol, worst < tol, sec),
            SuiteResult("weight_row_sums", worst_norm, norm_tol, worst_norm < norm_tol, sec))


def mle_equivalence(n_cases=100, seed=0) -> SuiteResult:
    """Argmax of the full factor product against argmax of the prior density."""
    def run():
        rng = np.random.default_rng(seed)
        model = tiny_model(seed)
        tables = model.prior_tables()
        agree = 0
        for n in range(n_cases):
            view, full = random_grids(rng, 1)[0], random_grids(rng, 1, fill=0.4)[0]
            _, table = mle_by_kappa(model, view, full, seed=n, candidates="all")
            feat = encode(model, view).feature_mean
            dens = mle_scores(model, feat, candidates="all", tables=tables)[0]
            agree += int(np.argmax(table) == np.argmax(dens))
        return agree
    agree, sec = _timed(run)
    return SuiteResult("mle_kappa_vs_density", 1.0 - agree / n_cases, 0.0, agree == n_cases, sec,
                       f"{agree}/{n_cases} agree")


def grad_check_suite(seed=0, tol=1e-4, batch=2, max_entries=64) -> SuiteResult:
    """Finite differences on the composite loss of a tiny model.

    Every parameter tensor is probed at up to ``max_entries`` random entries.
    """
    def run():
        rng = np.random.default_rng(seed)
        model = tiny_model(seed)
        views, fulls = random_grids(rng, batch), random_grids(rng, batch, fill=0.4)
        V = model.vocab
        labels = np.column_stack([rng.integers(0, V.n_classes, batch),
                                  rng.integers(0, V.n_instances, batch),
                                  rng.integers(0, V.n_views, batch),
                                  rng.integers(0, V.n_translations, batch)])

        def loss_fn(params):
            total, tape, _ = loss_graph(model, views, fulls, labels, seed=seed, mode="train")
            return total, tape
        return gc.grad_check(model.params, loss_fn, eps=1e-6, max_entries=max_entries, seed=seed)
    err, sec = _timed(run)
    return SuiteResult("composite_grad_check", err, tol, err < tol, sec)


def desk_configs(seed=0):
    """Dataset and training settings for the desk-scale end-to-end run.

    Four classes, eight instances, twelve views at 16^3 with every fourth
    view held out; about seven minutes of training on one CPU core.
    """
    data = DataConfig(n_classes=4, n_instances=8, n_views=12, resolution=16, split="view")
    train = TrainConfig(resolution=16, epochs=200, lr=2e-3, batch_size=32, seed=seed)
    return data, train


def run_all(seed=0, quick=False):
    n = 20 if quick else 100
    out = [kl_oracle(n_cases=5 if quick else 20, n_mc=10 ** 6, seed=seed),
           factored_kl_identity(n, seed)]
    out += list(weight_equivalence(n, seed))
    out.append(mle_equivalence(n, seed))
    out.append(grad_check_suite(seed))
    return out
