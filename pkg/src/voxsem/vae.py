"""Factorized shape VAE with label-conditional Gaussian priors.

The latent vector is split into four blocks, one per generative factor:
class (c), instance (i), viewpoint (v) and translation (t).  The encoder
sees a single view; the decoder reconstructs the full shape.  Each block
has a prior N(mu(label), I) whose mean comes from a small dense network of
the one-hot label.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, asdict

import numpy as np

from . import gradcore as gc
from .gradcore import LayerSpec

log = logging.getLogger(__name__)

BLOCKS = ("c", "i", "v", "t")


PRIOR_OUT_SCALE = 0.1


@dataclass
class TrainConfig:
    resolution: int = 16
    block_dims: tuple = (8, 8, 4, 4)
    channels: tuple = (8, 16, 32)
    kernel: int = 4
    dense_hidden: tuple = (128,)
    prior_hidden: int = 64
    dropout: float = 0.1
    n_samples: int = 1
    deltas: tuple = (4.0, 4.0, 2.0, 2.0)
    lambda_rg: float = 1.0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs: int = 30
    batch_size: int = 32
    eps: float = 1e-6
    seed: int = 0

    def validate(self):
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if min(self.deltas) <= 0:
            raise ValueError("every delta must be positive")
        if not 0.0 < self.eps < 0.1:
            raise ValueError("eps must be in (0, 0.1)")
        if len(self.block_dims) != 4 or len(self.deltas) != 4:
            raise ValueError("block_dims and deltas need one entry per factor (c, i, v, t)")
        if self.resolution % (2 ** len(self.channels)):
            raise ValueError(f"resolution {self.resolution} not divisible by 2^{len(self.channels)}")

    @property
    def latent_dim(self):
        return int(sum(self.block_dims))

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("block_dims", "channels", "dense_hidden", "deltas"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass(frozen=True)
class Vocab:
    n_classes: int
    n_instances: int
    n_views: int
    n_translations: int


@dataclass
class PosteriorBlocks:
    """Diagonal Gaussian q(z | view), batched: mean and std are (B, latent)."""

    mean: np.ndarray
    std: np.ndarray
    dims: tuple

    def _slice(self, block):
        k = BLOCKS.index(block)
        start = int(sum(self.dims[:k]))
        return slice(start, start + self.dims[k])

    def block_mean(self, block):
        return self.mean[:, self._slice(block)]

    def block_std(self, block):
        return self.std[:, self._slice(block)]

    @property
    def feature_mean(self):
        """mu^{sC}: the (class, instance) posterior means."""
        return self.mean[:, :self.dims[0] + self.dims[1]]

    @property
    def feature_std(self):
        return self.std[:, :self.dims[0] + self.dims[1]]


@dataclass
class PriorBlocks:
    """Prior means per block for one label; covariance is the identity."""

    c: np.ndarray
    i: np.ndarray
    v: np.ndarray
    t: np.ndarray

    @property
    def mean(self):
        return np.concatenate([self.c, self.i, self.v, self.t])

    @property
    def class_mean(self):
        """mu^C = (mu^c, mu^i)."""
        return np.concatenate([self.c, self.i])


@dataclass
class LossReport:
    total: float
    kl: float
    recon: float
    reg: float


def _enc_layers(cfg, vocab):
    layers, ch = [], 1
    for n, out in enumerate(cfg.channels):
        layers += [LayerSpec("conv3", f"enc.conv{n}", ch, out, kernel=cfg.kernel, stride=2,
                             padding=(cfg.kernel - 2) // 2),
                   LayerSpec("elu")]
        ch = out
    side = cfg.resolution // 2 ** len(cfg.channels)
    width = ch * side ** 3
    for n, h in enumerate(cfg.dense_hidden):
        layers += [LayerSpec("dense", f"enc.fc{n}", width, h), LayerSpec("elu")]
        width = h
    if cfg.dense_hidden and cfg.dropout > 0:
        layers.append(LayerSpec("dropout", rate=cfg.dropout))
    layers.append(LayerSpec("dense", "enc.out", width, 2 * cfg.latent_dim))
    return layers


def _dec_layers(cfg, vocab):
    side = cfg.resolution // 2 ** len(cfg.channels)
    chans = list(cfg.channels)
    flat = chans[-1] * side ** 3
    layers, width = [], cfg.latent_dim
    for n, h in enumerate(cfg.dense_hidden):
        layers += [LayerSpec("dense", f"dec.fc{n}", width, h), LayerSpec("elu")]
        width = h
    layers += [LayerSpec("dense", "dec.expand", width, flat), LayerSpec("elu"),
               LayerSpec("reshape", shape=(chans[-1], side, side, side))]
    outs = chans[-2::-1] + [1]
    ch = chans[-1]
    for n, out in enumerate(outs):
        layers.append(LayerSpec("tconv3", f"dec.tconv{n}", ch, out, kernel=cfg.kernel, stride=2,
                                padding=(cfg.kernel - 2) // 2))
        layers.append(LayerSpec("elu") if n < len(outs) - 1 else LayerSpec("sigmoid"))
        ch = out
    return layers


def _prior_layers(cfg, block, fan_in):
    dim = cfg.block_dims[BLOCKS.index(block)]
    return [LayerSpec("dense", f"prior.{block}.fc", fan_in, cfg.prior_hidden), LayerSpec("elu"),
            LayerSpec("dense", f"prior.{block}.out", cfg.prior_hidden, dim)]


class ShapeVAE:
    """Parameters, layer stacks and training history of one model."""

    def __init__(self, config: TrainConfig, vocab: Vocab, params=None):
        config.validate()
        self.config = config
        self.vocab = vocab
        self.enc = _enc_layers(config, vocab)
        self.dec = _dec_layers(config, vocab)
        C, I, V, T = vocab.n_classes, vocab.n_instances, vocab.n_views, vocab.n_translations
        self.prior = {"c": _prior_layers(config, "c", C), "i": _prior_layers(config, "i", C + I),
                      "v": _prior_layers(config, "v", V), "t": _prior_layers(config, "t", T)}
        self.history = []
        self.trained_pairs = np.ones((C, I), bool)
        if params is None:
            params = gc.ParamStore()
            rng = np.random.default_rng(config.seed)
            gc.init_layers(params, self.enc, "encoder", int(rng.integers(2 ** 31)))
            gc.init_layers(params, self.dec, "decoder", int(rng.integers(2 ** 31)))
            for b in BLOCKS:
                gc.init_layers(params, self.prior[b], "prior", int(rng.integers(2 ** 31)))
                # start every prior mean close to the origin
                params.values[f"prior.{b}.out.W"] *= PRIOR_OUT_SCALE
        self.params = params

    # -- graph builders -----------------------------------------------------

    def _check_views(self, views):
        views = np.asarray(views, dtype=float)
        if views.ndim == 3:
            views = views[None]
        r = self.config.resolution
        if views.shape[1:] != (r, r, r):
            raise ValueError(f"view resolution {views.shape[1:]} does not match model ({r},)*3")
        return views[:, None]

    def encode_graph(self, tape, views, mode, seed):
        out, _ = gc.forward(self.params, self.enc, self._check_views(views), mode, seed, tape)
        d = self.config.latent_dim
        return out[:, :d], out[:, d:]

    def logits_graph(self, tape, z, mode="eval"):
        """Decoder pre-activations, shape (B, D, D, D)."""
        if z.shape[-1] != self.config.latent_dim:
            raise ValueError(f"latent dim {z.shape[-1]} != {self.config.latent_dim}")
        out, _ = gc.forward(self.params, self.dec[:-1], z, mode, 0, tape)
        r = self.config.resolution
        return gc.reshape(out, (z.shape[0], r, r, r))

    def decode_graph(self, tape, z, mode="eval"):
        """Clamped Bernoulli probabilities, shape (B, D, D, D)."""
        eps = self.config.eps
        return gc.clip(gc.sigmoid(self.logits_graph(tape, z, mode)), eps, 1.0 - eps)

    def prior_tables_graph(self, tape):
        """Prior means for every label value of every block."""
        C, I = self.vocab.n_classes, self.vocab.n_instances
        ci = np.concatenate([np.repeat(np.eye(C), I, axis=0), np.tile(np.eye(I), (C, 1))], axis=1)
        inputs = {"c": np.eye(C), "i": ci, "v": np.eye(self.vocab.n_views),
                  "t": np.eye(self.vocab.n_translations)}
        return {b: gc.forward(self.params, self.prior[b], inputs[b], "eval", 0, tape)[0]
                for b in BLOCKS}

    # -- numpy front-ends ---------------------------------------------------

    def prior_tables(self):
        tables = self.prior_tables_graph(gc.Tape(self.params))
        return {b: t.data for b, t in tables.items()}

    def class_prior_means(self):
        """mu^C for every (class, instance) pair, shape (C, I, dc + di)."""
        tab = self.prior_tables()
        C, I = self.vocab.n_classes, self.vocab.n_instances
        return np.concatenate([np.repeat(tab["c"], I, axis=0), tab["i"]], axis=1).reshape(C, I, -1)

    def num_params(self):
        return self.params.num_params()


def encode(model: ShapeVAE, views, mode="eval", seed=0) -> PosteriorBlocks:
    """q(z | view) for one view (D, D, D) or a batch (B, D, D, D)."""
    mu, logsig = model.encode_graph(gc.Tape(model.params), views, mode, seed)
    return PosteriorBlocks(mu.data.copy(), np.exp(logsig.data), tuple(model.config.block_dims))


def decode(model: ShapeVAE, z, mode="eval") -> np.ndarray:
    """Per-voxel Bernoulli probabilities, clamped to [eps, 1 - eps]."""
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    if single:
        z = z[None]
    p = model.decode_graph(gc.Tape(model.params), gc.as_tensor(z), mode).data
    return p[0] if single else p


def _check_label(model, label):
    v = model.vocab
    bounds = (v.n_classes, v.n_instances, v.n_views, v.n_translations)
    for name, value, n in zip(("class_id", "instance_id", "viewpoint_id", "translation_id"),
                              label, bounds):
        if not 0 <= value < n:
            raise ValueError(f"{name}={value} outside vocabulary [0, {n})")


def prior_lookup(model: ShapeVAE, label) -> PriorBlocks:
    """Prior means for one LabelTuple (or a 4-tuple of ids)."""
    label = tuple(int(x) for x in (label if not hasattr(label, "class_id") else
                                   (label.class_id, label.instance_id, label.viewpoint_id,
                                    label.translation_id)))
    _check_label(model, label)
    tab = model.prior_tables()
    c, i, v, t = label
    return PriorBlocks(tab["c"][c], tab["i"][c * model.vocab.n_instances + i], tab["v"][v], tab["t"][t])


def reparameterize(post: PosteriorBlocks, n, seed=0):
    """``n`` draws z = mean + std * eta, shape (n, B, latent)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    eta = np.random.default_rng(seed).standard_normal((n, *post.mean.shape))
    return post.mean[None] + post.std[None] * eta


# ---------------------------------------------------------------------------
# losses


def kl_term(post_mean, post_std, prior_mean):
    """KL(N(mu_s, diag sigma_s^2) || N(mu, I)), summed over the last axis."""
    post_mean, post_std, prior_mean = map(np.asarray, (post_mean, post_std, prior_mean))
    return np.sum(-np.log(post_std) + 0.5 * (post_std ** 2 + (post_mean - prior_mean) ** 2) - 0.5,
                  axis=-1)


def kl_blocks(post: PosteriorBlocks, prior: PriorBlocks):
    """Per-block KL for a single posterior (batch of one) against one prior."""
    return {b: float(kl_term(post.block_mean(b)[0], post.block_std(b)[0], getattr(prior, b)))
            for b in BLOCKS}


def recon_loss_lrc(pred, target):
    """Reconstruction loss with targets stretched from [0, 1] to [-1, 2]."""
    p = np.asarray(pred, dtype=float)
    t = np.asarray(target).astype(bool)
    per = np.where(t, -2.0 * np.log(p) + np.log1p(-p), np.log(p) - 2.0 * np.log1p(-p))
    return float(per.sum())


def prior_reg_lrg(means, delta):
    """Squared hinge on unordered pairs of prior means closer than ``delta``."""
    means = np.asarray(means, dtype=float)
    iu, ju = np.triu_indices(len(means), k=1)
    d = np.linalg.norm(means[iu] - means[ju], axis=1)
    return float(np.sum(np.where(d < delta, (d - delta) ** 2, 0.0)))


def _lrc_graph(logits, target, eps):
    # log p and log(1 - p) of the clamped probability, built from logits so
    # a voxel saturated on the wrong side still receives a gradient
    t = target.astype(float)
    lo, hi = np.log(eps), np.log1p(-eps)
    lp = gc.clip(gc.log_sigmoid(logits), lo, hi, one_sided=True)
    l1p = gc.clip(gc.log_sigmoid(-1.0 * logits), lo, hi, one_sided=True)
    per = t * (-2.0 * lp + l1p) + (1.0 - t) * (lp - 2.0 * l1p)
    return gc.tsum(per)


def _lrg_graph(table, delta):
    n = table.shape[0]
    if n < 2:
        return gc.Tensor(0.0)
    iu, ju = np.triu_indices(n, k=1)
    diff = gc.take_rows(table, iu) - gc.take_rows(table, ju)
    dist = gc.sqrt(gc.tsum(gc.square(diff), axis=1) + 1e-12)
    return gc.tsum(gc.square(gc.relu(delta - dist)))


def _label_array(samples):
    return np.array([[s.label.class_id, s.label.instance_id, s.label.viewpoint_id,
                      s.label.translation_id] for s in samples], dtype=int)


def loss_graph(model: ShapeVAE, views, fulls, labels, seed, mode="train", tape=None):
    """Negative lower bound plus prior regularizer, as a graph.

    Returns (total, tape, parts) where parts holds the batch-mean KL, the
    batch-mean reconstruction loss and the regularizer as Tensors.
    """
    cfg = model.config
    tape = tape or gc.Tape(model.params)
    labels = np.asarray(labels, dtype=int)
    B = len(labels)
    rng = np.random.default_rng(seed)
    mu, logsig = model.encode_graph(tape, views, mode, int(rng.integers(2 ** 31)))
    sig = gc.exp(logsig)
    tables = model.prior_tables_graph(tape)
    rows = {"c": labels[:, 0], "i": labels[:, 0] * model.vocab.n_instances + labels[:, 1],
            "v": labels[:, 2], "t": labels[:, 3]}
    prior_mu = gc.concat([gc.take_rows(tables[b], rows[b]) for b in BLOCKS], axis=1)
    kl = gc.tsum(-1.0 * logsig + 0.5 * (gc.square(sig) + gc.square(mu - prior_mu)) - 0.5)
    fulls = np.asarray(fulls)
    recon = None
    for _ in range(cfg.n_samples):
        eta = rng.standard_normal(mu.shape)
        z = mu + sig * eta
        term = _lrc_graph(model.logits_graph(tape, z, mode), fulls, cfg.eps)
        recon = term if recon is None else recon + term
    recon = recon * (1.0 / cfg.n_samples)
    reg = None
    for b, delta in zip(BLOCKS, cfg.deltas):
        term = _lrg_graph(tables[b], delta)
        reg = term if reg is None else reg + term
    kl_mean = kl * (1.0 / B)
    recon_mean = recon * (1.0 / B)
    total = kl_mean + recon_mean + cfg.lambda_rg * reg
    return total, tape, {"kl": kl_mean, "recon": recon_mean, "reg": reg}


def train_step(model: ShapeVAE, batch, step_seed, lr=None) -> LossReport:
    """One Adam update of encoder, decoder and prior networks on ``batch``."""
    if not batch:
        raise ValueError("empty batch")
    cfg = model.config
    views = np.stack([s.view for s in batch])
    fulls = np.stack([s.full for s in batch])
    total, tape, parts = loss_graph(model, views, fulls, _label_array(batch), step_seed)
    grads = gc.backward(tape, total)
    gc.adam_step(model.params, grads, cfg.lr if lr is None else lr, cfg.beta1, cfg.beta2,
                 cfg.adam_eps)
    return LossReport(total.data.item(), parts["kl"].data.item(), parts["recon"].data.item(),
                      parts["reg"].data.item())


def vocab_of(dataset) -> Vocab:
    return Vocab(dataset.n_classes, dataset.n_instances, dataset.n_views, dataset.n_translations)


def train(dataset, config: TrainConfig, callback=None) -> ShapeVAE:
    """Minibatch training on the dataset's train split.

    ``history`` gets one entry per epoch with the mean LossReport fields.
    """
    config.validate()
    if dataset.resolution != config.resolution:
        raise ValueError(f"dataset resolution {dataset.resolution} != config {config.resolution}")
    model = ShapeVAE(config, vocab_of(dataset))
    samples = dataset.train
    if not samples:
        raise ValueError("dataset has no training samples")
    model.trained_pairs = np.zeros_like(model.trained_pairs)
    for s in samples:
        model.trained_pairs[s.label.class_id, s.label.instance_id] = True
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(samples))
        reports = []
        for k, start in enumerate(range(0, len(samples), config.batch_size)):
            batch = [samples[j] for j in order[start:start + config.batch_size]]
            step_seed = int(np.random.default_rng([config.seed, epoch, k]).integers(2 ** 31))
            reports.append(train_step(model, batch, step_seed))
        row = {f: float(np.mean([getattr(r, f) for r in reports])) for f in ("total", "kl", "recon", "reg")}
        model.history.append(row)
        log.info("epoch %d total %.3f kl %.3f recon %.3f reg %.4f", epoch, row["total"],
                 row["kl"], row["recon"], row["reg"])
        if callback is not None:
            callback(epoch, row)
    return model


def config_dict(config: TrainConfig):
    d = asdict(config)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
