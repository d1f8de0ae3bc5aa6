"""Classification, retrieval and likelihood factors from a trained model."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .vae import ShapeVAE, PosteriorBlocks, encode, decode, kl_term
from .voxeldata import jaccard

LOG_2PI = np.log(2.0 * np.pi)


def gaussian_logpdf(x, mu):
    """log N(x; mu, I), broadcasting over leading axes."""
    x, mu = np.asarray(x, float), np.asarray(mu, float)
    if x.shape[-1] != mu.shape[-1]:
        raise ValueError(f"dimension mismatch: {x.shape[-1]} vs {mu.shape[-1]}")
    d = x.shape[-1]
    return -0.5 * d * LOG_2PI - 0.5 * np.sum((x - mu) ** 2, axis=-1)


def gaussian_entropy(std):
    """Differential entropy of N(., diag std^2), summed over the last axis."""
    std = np.asarray(std, float)
    return np.sum(0.5 * np.log(2.0 * np.pi * np.e) + np.log(std), axis=-1)


@dataclass
class EncodedFeature:
    mean: np.ndarray  # mu^{sC}
    std: np.ndarray   # sigma^{sC}
    posterior: PosteriorBlocks


def encode_feature(model: ShapeVAE, view) -> EncodedFeature:
    post = encode(model, view, mode="eval")
    single = np.asarray(view).ndim == 3
    mean, std = post.feature_mean, post.feature_std
    if single:
        mean, std = mean[0], std[0]
    return EncodedFeature(mean, std, post)


# ---------------------------------------------------------------------------
# likelihood factors


@dataclass
class KappaTerms:
    """Factors of the approximated likelihood p(s^f | l^c), kept as logs.

    ``log_kl_c_factored`` is the same class factor rebuilt from the prior
    log-density, the posterior entropy and the posterior variances.
    """

    log_a: float
    log_e: float
    log_kl_vt: float
    log_kl_c: float
    log_kl_c_factored: float
    log_prior_density: float
    entropy: float

    @property
    def kappa_e(self):
        return float(np.exp(self.log_e))

    @property
    def kappa_kl_vt(self):
        return float(np.exp(self.log_kl_vt))

    @property
    def kappa_kl_c(self):
        return float(np.exp(self.log_kl_c))

    @property
    def log_total(self):
        return self.log_a + self.log_e + self.log_kl_vt + self.log_kl_c


def bernoulli_loglik(probs, target):
    p = np.asarray(probs, float)
    t = np.asarray(target).astype(bool)
    axes = tuple(range(p.ndim - t.ndim, p.ndim))
    return np.sum(np.where(t, np.log(p), np.log1p(-p)), axis=axes)


def log_kappa_e(model: ShapeVAE, post: PosteriorBlocks, full, n_samples=8, seed=0):
    """Monte-Carlo log of exp(E_z[log p(s^f | z)]) with a fixed seed."""
    eta = np.random.default_rng(seed).standard_normal((n_samples, post.mean.shape[-1]))
    z = post.mean[0][None] + post.std[0][None] * eta
    return float(np.mean(bernoulli_loglik(decode(model, z), full)))


def log_kappa_vt(post: PosteriorBlocks, tables):
    """log of sum_v exp(-KL_v) * sum_t exp(-KL_t); depends on the view only."""
    kv = kl_term(post.block_mean("v")[0], post.block_std("v")[0], tables["v"])
    kt = kl_term(post.block_mean("t")[0], post.block_std("t")[0], tables["t"])
    return float(logsumexp(-kv) + logsumexp(-kt))


def kappa_terms(model: ShapeVAE, view, full, label, n_samples=8, seed=0, tables=None,
                post=None, log_e=None) -> KappaTerms:
    """All likelihood factors for one view / full shape under a (class, instance) label."""
    c, i = int(label[0]), int(label[1])
    if post is None:
        post = encode(model, view, mode="eval")
    if tables is None:
        tables = model.prior_tables()
    I = model.vocab.n_instances
    mu_c, mu_i = tables["c"][c], tables["i"][c * I + i]
    kl_c = kl_term(post.block_mean("c")[0], post.block_std("c")[0], mu_c)
    kl_i = kl_term(post.block_mean("i")[0], post.block_std("i")[0], mu_i)
    feat_mean, feat_std = post.feature_mean[0], post.feature_std[0]
    logp = float(gaussian_logpdf(feat_mean, np.concatenate([mu_c, mu_i])))
    entropy = float(gaussian_entropy(feat_std))
    if log_e is None:
        log_e = log_kappa_e(model, post, full, n_samples, seed)
    return KappaTerms(
        log_a=-np.log(model.vocab.n_views) - np.log(model.vocab.n_translations),
        log_e=log_e,
        log_kl_vt=log_kappa_vt(post, tables),
        log_kl_c=-float(kl_c + kl_i),
        log_kl_c_factored=logp + entropy - 0.5 * float(np.sum(feat_std ** 2)),
        log_prior_density=logp,
        entropy=entropy,
    )


# ---------------------------------------------------------------------------
# maximum likelihood classification


def _candidate_mask(model, candidates):
    if candidates is None:
        return model.trained_pairs.copy()
    if isinstance(candidates, str):
        if candidates != "all":
            raise ValueError(f"unknown candidate set {candidates!r}")
        return np.ones_like(model.trained_pairs)
    return np.asarray(candidates, bool)


def mle_scores(model: ShapeVAE, features, mode="class-and-instance", candidates=None, tables=None):
    """Log prior density of each feature under each candidate label.

    Returns an array (B, C, I) in class-and-instance mode and (B, C) in
    class-only mode; masked candidates score -inf.
    """
    tables = tables or model.prior_tables()
    C, I = model.vocab.n_classes, model.vocab.n_instances
    features = np.atleast_2d(features)
    dc = model.config.block_dims[0]
    if mode == "class-only":
        return gaussian_logpdf(features[:, None, :dc], tables["c"][None])
    if mode != "class-and-instance":
        raise ValueError(f"unknown mode {mode!r}")
    means = np.concatenate([np.repeat(tables["c"], I, axis=0), tables["i"]], axis=1)
    scores = gaussian_logpdf(features[:, None, :], means[None]).reshape(-1, C, I)
    mask = _candidate_mask(model, candidates)
    return np.where(mask[None], scores, -np.inf)


def _argmax_class(scores):
    # first maximum in C-order, i.e. lowest class (then instance) wins ties
    flat = scores.reshape(len(scores), -1)
    best = flat.argmax(axis=1)
    per_class = int(np.prod(scores.shape[2:])) if scores.ndim > 2 else 1
    return best // per_class


def mle_classify(model: ShapeVAE, view, mode="class-and-instance", candidates=None):
    """Predicted class for one view and the full score table."""
    feat = encode_feature(model, view)
    scores = mle_scores(model, feat.mean, mode, candidates)
    return int(_argmax_class(scores)[0]), scores[0]


def mle_classify_batch(model: ShapeVAE, views, mode="class-and-instance", candidates=None):
    feats = encode(model, np.asarray(views), mode="eval").feature_mean
    return _argmax_class(mle_scores(model, feats, mode, candidates))


def mle_by_kappa(model: ShapeVAE, view, full, n_samples=8, seed=0, candidates=None):
    """Class maximising the full likelihood factor product over all candidate pairs."""
    post = encode(model, view, mode="eval")
    tables = model.prior_tables()
    mask = _candidate_mask(model, candidates)
    log_e = log_kappa_e(model, post, full, n_samples, seed)
    C, I = mask.shape
    table = np.full((C, I), -np.inf)
    for c in range(C):
        for i in range(I):
            if mask[c, i]:
                table[c, i] = kappa_terms(model, view, full, (c, i), tables=tables, post=post,
                                          log_e=log_e).log_total
    return int(_argmax_class(table[None])[0]), table


def retrieve(model: ShapeVAE, view, threshold=0.5):
    """Decoded full shape from the posterior mean, thresholded."""
    post = encode(model, view, mode="eval")
    p = decode(model, post.mean)
    out = p > threshold
    return out[0] if np.asarray(view).ndim == 3 else out


# ---------------------------------------------------------------------------
# metrics


def average_precision(relevance):
    """Mean of precision at each relevant rank, for a ranked 0/1 list."""
    rel = np.asarray(relevance, bool)
    if not rel.any():
        return 0.0
    hits = np.cumsum(rel)
    ranks = np.arange(1, len(rel) + 1)
    return float(np.mean(hits[rel] / ranks[rel]))


def roc_auc(scores, relevance):
    """P(score of a relevant item > score of an irrelevant one), ties count half."""
    from scipy.stats import rankdata

    s = np.asarray(scores, float)
    rel = np.asarray(relevance, bool)
    n_pos, n_neg = rel.sum(), (~rel).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(s)
    return float((ranks[rel].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


RECALL_LEVELS = np.linspace(0.0, 1.0, 11)


def interpolated_pr(relevance, levels=RECALL_LEVELS):
    """Interpolated precision at fixed recall levels for one ranked list."""
    rel = np.asarray(relevance, bool)
    if not rel.any():
        return np.zeros(len(levels))
    hits = np.cumsum(rel)
    precision = hits / np.arange(1, len(rel) + 1)
    recall = hits / rel.sum()
    return np.array([precision[recall >= r].max() if (recall >= r).any() else 0.0 for r in levels])


def confusion_matrix(y_true, y_pred, n_classes):
    cm = np.zeros((n_classes, n_classes), dtype=int)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


def prior_distance_matrices(class_means):
    """Euclidean distances and cosine distances (1 - cosine similarity)."""
    m = np.asarray(class_means, float)
    diff = m[:, None] - m[None]
    euclid = np.sqrt(np.sum(diff ** 2, axis=-1))
    norms = np.linalg.norm(m, axis=1)
    cos = (m @ m.T) / np.maximum(np.outer(norms, norms), 1e-300)
    cosine = 1.0 - cos
    np.fill_diagonal(cosine, 0.0)
    cosine = 0.5 * (cosine + cosine.T)
    return euclid, cosine


def instance_distance_summary(model: ShapeVAE, pairs=None):
    """Mean mu^C distance between instance priors within and across classes."""
    mc = model.class_prior_means()
    C, I, _ = mc.shape
    mask = model.trained_pairs if pairs is None else pairs
    idx = [(c, i) for c in range(C) for i in range(I) if mask[c, i]]
    intra, inter = [], []
    for a in range(len(idx)):
        for b in range(a + 1, len(idx)):
            d = float(np.linalg.norm(mc[idx[a]] - mc[idx[b]]))
            (intra if idx[a][0] == idx[b][0] else inter).append(d)
    def mean(v):
        return float(np.mean(v)) if v else float("nan")
    return mean(intra), mean(inter)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    per_class_accuracy: np.ndarray
    accuracy: float
    dist_euclid: np.ndarray
    dist_cosine: np.ndarray
    pr_curve: np.ndarray  # rows of (recall, precision)
    auc: float
    map: float
    mean_iou: float
    intra_instance_distance: float
    inter_instance_distance: float
    extra: dict = field(default_factory=dict)

    def summary(self):
        out = {"accuracy": self.accuracy, "auc": self.auc, "map": self.map,
               "mean_iou": self.mean_iou,
               "intra_instance_distance": self.intra_instance_distance,
               "inter_instance_distance": self.inter_instance_distance}
        out.update(self.extra)
        return out


def retrieval_metrics(features, classes):
    """Leave-one-out retrieval over a gallery of encoded features.

    Each query ranks every other item by descending log-density of the
    query feature about the gallery feature; relevant means same class.
    """
    f = np.asarray(features, float)
    y = np.asarray(classes)
    n = len(f)
    aps, aucs, prs = [], [], []
    for q in range(n):
        others = np.delete(np.arange(n), q)
        scores = gaussian_logpdf(f[q][None], f[others])
        order = others[np.argsort(-scores, kind="stable")]
        rel = y[order] == y[q]
        aps.append(average_precision(rel))
        aucs.append(roc_auc(scores, y[others] == y[q]))
        prs.append(interpolated_pr(rel))
    pr = np.column_stack([RECALL_LEVELS, np.mean(prs, axis=0)]) if prs else np.zeros((0, 2))
    return float(np.nanmean(aucs)), float(np.mean(aps)), pr


def evaluate(model: ShapeVAE, samples, mode="class-and-instance", candidates=None) -> MetricsReport:
    """Classification, retrieval and prior-geometry metrics on held-out samples."""
    if not samples:
        raise ValueError("empty test split")
    views = np.stack([s.view for s in samples])
    fulls = np.stack([s.full for s in samples])
    y = np.array([s.label.class_id for s in samples])
    post = encode(model, views, mode="eval")
    pred = _argmax_class(mle_scores(model, post.feature_mean, mode, candidates))
    C = model.vocab.n_classes
    cm = confusion_matrix(y, pred, C)
    totals = cm.sum(axis=1)
    per_class = np.divide(np.diag(cm), totals, out=np.zeros(C), where=totals > 0)
    probs = decode(model, post.mean)
    ious = [jaccard(p > 0.5, f) for p, f in zip(probs, fulls)]
    auc, mean_ap, pr = retrieval_metrics(post.feature_mean, y)
    euclid, cosine = prior_distance_matrices(model.prior_tables()["c"])
    intra, inter = instance_distance_summary(model)
    return MetricsReport(cm, per_class, float(np.trace(cm) / cm.sum()), euclid, cosine, pr, auc,
                         mean_ap, float(np.mean(ious)), intra, inter)
