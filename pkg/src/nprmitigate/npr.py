"""Neural-process regressor for the NLOS ranging bias.

The model has three parts:

* an encoder ``h`` mapping one labeled context point ``[r | dd]`` to a
  latent vector;
* an aggregator reducing the context latents to their mean and population
  variance (``LatentStats``), which is the only state touched online;
* a decoder ``f`` returning a mean and a variance for the bias of a test
  profile.

The decoder has two input conventions.  The Monte-Carlo path feeds
``[r | z | 0]`` for latent draws ``z ~ N(mu_z, var_z)``; it is what the
end-to-end phase trains.  The deterministic path feeds ``[r | mu_z | var_z]``
and is fitted afterwards to the moments produced by the Monte-Carlo path.
"""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .channel_sim import SPEED_OF_LIGHT, PowerDelayProfile
from .dataset_io import Dataset, DatasetError, Normalization, encode

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
VAR_FLOOR = 1e-6
_LATENT_VAR_FLOOR = 1e-8


class StateError(RuntimeError):
    pass


@dataclass
class NprConfig:
    max_paths: int = 16
    latent_dim: int = 8
    encoder_hidden: tuple[int, ...] = (64, 64)
    decoder_hidden: tuple[int, ...] = (64, 64)
    kl_weight: float = 0.01
    learning_rate: float = 1e-3
    context_fraction: float = 0.5
    pseudo_fraction: float = 0.5
    threshold: float = 0.2
    forgetting: float = 1.0
    allow_prior: bool = True

    @property
    def feature_dim(self):
        return 2 * self.max_paths


@dataclass
class LatentStats:
    mu_z: np.ndarray
    var_z: np.ndarray
    count: int = 0
    forgetting: float = 1.0
    # total discounted weight; equals count when forgetting == 1
    weight: float = 0.0

    def __post_init__(self):
        self.mu_z = np.asarray(self.mu_z, dtype=np.float64)
        self.var_z = np.asarray(self.var_z, dtype=np.float64)
        if self.mu_z.shape != self.var_z.shape or self.mu_z.ndim != 1:
            raise nn.ShapeError("mu_z and var_z must be equally long vectors")
        if np.any(self.var_z < 0):
            raise ValueError("var_z must be non-negative")
        if not 0.0 <= self.forgetting <= 1.0:
            raise ValueError("forgetting must lie in [0, 1]")

    @classmethod
    def empty(cls, latent_dim, forgetting=1.0) -> "LatentStats":
        return cls(np.zeros(latent_dim), np.zeros(latent_dim), 0, forgetting, 0.0)

    @property
    def initialized(self) -> bool:
        return self.count > 0

    @property
    def latent_dim(self) -> int:
        return self.mu_z.size

    def to_dict(self):
        return {
            "mu_z": self.mu_z.tolist(),
            "var_z": self.var_z.tolist(),
            "count": self.count,
            "forgetting": self.forgetting,
            "weight": self.weight,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mu_z"]), np.asarray(d["var_z"]), int(d["count"]),
                   float(d["forgetting"]), float(d["weight"]))

    def __eq__(self, other):
        return (
            isinstance(other, LatentStats)
            and np.array_equal(self.mu_z, other.mu_z)
            and np.array_equal(self.var_z, other.var_z)
            and self.count == other.count
            and self.forgetting == other.forgetting
            and self.weight == other.weight
        )


@dataclass
class NprModel:
    encoder: nn.FeedForwardNet
    decoder: nn.FeedForwardNet
    config: NprConfig
    stats: LatentStats
    normalization: Normalization | None = None
    phases: frozenset = frozenset()

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def with_stats(self, stats: LatentStats) -> "NprModel":
        # nets are shared, never copied: online changes cannot reach them
        return dataclasses.replace(self, stats=stats)

    def reset_stats(self) -> "NprModel":
        return self.with_stats(LatentStats.empty(self.latent_dim, self.config.forgetting))


def build_model(config: NprConfig | None = None, seed: int = 0) -> NprModel:
    config = config or NprConfig()
    rng = np.random.default_rng(seed)
    f, L = config.feature_dim, config.latent_dim
    encoder = nn.init_net([f + 1, *config.encoder_hidden, L], "relu", rng)
    decoder = nn.init_net([f + 2 * L, *config.decoder_hidden, 2], "relu", rng)
    return NprModel(encoder, decoder, config, LatentStats.empty(L, config.forgetting))


# ---------------------------------------------------------------------------
# building blocks


def _normalize(model: NprModel, R):
    R = np.asarray(R, dtype=np.float64)
    if R.shape[-1] != model.config.feature_dim:
        raise nn.ShapeError(f"encoded profile width {R.shape[-1]} != {model.config.feature_dim}")
    return model.normalization.apply(R) if model.normalization is not None else R


def variance_map(pre):
    return nn.softplus(pre) + VAR_FLOOR


def encode_context(model: NprModel, R, dd) -> np.ndarray:
    """Latent vector per context point; ``R`` holds encoded profiles row-wise."""
    R = np.atleast_2d(np.asarray(R, dtype=np.float64))
    dd = np.atleast_1d(np.asarray(dd, dtype=np.float64))
    if R.shape[0] == 0:
        raise DatasetError("context must not be empty")
    if dd.shape != (R.shape[0],):
        raise nn.ShapeError("one label per context profile required")
    X = np.column_stack([_normalize(model, R), dd])
    return nn.forward(model.encoder, X)


def aggregate(latents, forgetting: float = 1.0) -> LatentStats:
    Z = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    if Z.shape[0] == 0 or Z.size == 0:
        raise DatasetError("cannot aggregate an empty set of latents")
    # shift by the first row so identical latents give exactly var_z == 0
    D = Z - Z[0]
    d_mu = D.mean(axis=0)
    mu = Z[0] + d_mu
    var = ((D - d_mu) ** 2).mean(axis=0)
    n = Z.shape[0]
    return LatentStats(mu, var, n, forgetting, float(n))


def aggregate_online(stats: LatentStats, new_latent) -> LatentStats:
    """Fold one latent into the running (optionally discounted) moments."""
    z = np.asarray(new_latent, dtype=np.float64)
    if z.shape != stats.mu_z.shape:
        raise nn.ShapeError(f"latent shape {z.shape} != {stats.mu_z.shape}")
    g = stats.forgetting
    w_prev = g * stats.weight
    if not stats.initialized or w_prev == 0.0:
        return LatentStats(z.copy(), np.zeros_like(z), stats.count + 1, g, 1.0)
    w = w_prev + 1.0
    scatter = g * stats.var_z * stats.weight
    mu = stats.mu_z + (z - stats.mu_z) / w
    scatter = scatter + (z - stats.mu_z) * (z - mu)
    var = np.maximum(scatter / w, 0.0)
    return LatentStats(mu, var, stats.count + 1, g, w)


def _effective_stats(model: NprModel, stats: LatentStats | None):
    stats = model.stats if stats is None else stats
    if stats.initialized:
        return stats.mu_z, stats.var_z
    if not model.config.allow_prior:
        raise StateError("latent statistics are uninitialized and the prior fallback is disabled")
    return np.zeros(model.latent_dim), np.ones(model.latent_dim)


def decode(model: NprModel, R, stats: LatentStats | None = None):
    """Deterministic head: ``[r | mu_z | var_z]`` -> (mean, variance)."""
    mu, var = _effective_stats(model, stats)
    Rn = _normalize(model, R)
    single = Rn.ndim == 1
    Rn = np.atleast_2d(Rn)
    n = Rn.shape[0]
    X = np.column_stack([Rn, np.tile(mu, (n, 1)), np.tile(var, (n, 1))])
    out = nn.forward(model.decoder, X)
    mean, v = out[:, 0], variance_map(out[:, 1])
    return (float(mean[0]), float(v[0])) if single else (mean, v)


def decode_mc(model: NprModel, R, stats: LatentStats | None = None, n_z_samples: int = 64,
              rng=None, z_draws=None):
    """Monte-Carlo moments over ``z ~ N(mu_z, diag(var_z))``.

    Mean = sample mean of the mean head; variance = sample variance of the
    mean head plus the average of the variance head.
    """
    if n_z_samples < 1:
        raise ValueError("n_z_samples must be >= 1")
    mu, var = _effective_stats(model, stats)
    if z_draws is None:
        rng = np.random.default_rng() if rng is None else rng
        z_draws = mu + np.sqrt(var) * rng.standard_normal((n_z_samples, mu.size))
    Rn = _normalize(model, R)
    single = Rn.ndim == 1
    Rn = np.atleast_2d(Rn)
    means, variances = _mc_heads(model.decoder, Rn, z_draws)
    m = means.mean(axis=1)
    v = means.var(axis=1) + variances.mean(axis=1)
    return (float(m[0]), float(v[0])) if single else (m, v)


def _mc_heads(decoder, Rn, Z):
    n, k, L = Rn.shape[0], Z.shape[0], Z.shape[1]
    X = np.concatenate(
        [np.repeat(Rn, k, axis=0), np.tile(Z, (n, 1)), np.zeros((n * k, L))], axis=1
    )
    out = nn.forward(decoder, X)
    return out[:, 0].reshape(n, k), variance_map(out[:, 1]).reshape(n, k)


def reparameterize(stats: LatentStats, rng, n_draws: int) -> np.ndarray:
    return stats.mu_z + np.sqrt(stats.var_z) * rng.standard_normal((n_draws, stats.latent_dim))


# ---------------------------------------------------------------------------
# phase 1: end-to-end training


def _scenario_blocks(ds: Dataset, model: NprModel):
    """Per scenario: normalized NLOS profiles with true labels, plus LOS
    profiles stripped of their first path with arrival-gap pseudo-labels."""
    blocks = []
    mp = model.config.max_paths
    norm = model.normalization.apply
    for sid, part in ds.by_scenario().items():
        nlos = [s for s in part.samples if s.is_nlos]
        los = [s for s in part.samples if not s.is_nlos and len(s.pdp) >= 2]
        if not nlos:
            continue
        R = norm(np.stack([encode(s.pdp, mp) for s in nlos]))
        y = np.array([s.delta_d_m for s in nlos])
        if los:
            Rp = norm(np.stack([encode(s.pdp.strip_first(), mp) for s in los]))
            yp = np.array([pseudo_label(s.pdp) for s in los])
        else:
            Rp, yp = np.zeros((0, R.shape[1])), np.zeros(0)
        blocks.append((sid, R, y, Rp, yp))
    return blocks


def _require_nlos(ds: Dataset, what: str) -> Dataset:
    nlos = ds.nlos()
    if len(nlos) == 0:
        raise DatasetError(f"{what} split has no NLOS samples")
    return nlos


def _episode_loss(model, Rc, dc, Rt, dt, eps, kl_weight, want_grads=True, variance_weight=1.0):
    """Objective of one context/target episode and, optionally, its gradients.

    objective = mean squared error of the decoder mean on the targets
              + kl_weight * KL(N(mu_z, var_z) || N(0, I))
    The variance head is fitted alongside by a Gaussian likelihood on the
    residuals at z = mu_z.  That term only moves the variance column of the
    decoder's output layer; it never reaches the hidden layers, the mean
    head or the encoder.
    """
    L = model.latent_dim
    Xc = np.column_stack([Rc, dc])
    Zc, enc_trace = nn.forward_trace(model.encoder, Xc)
    n_c = Zc.shape[0]
    mu = Zc.mean(axis=0)
    var_raw = ((Zc - mu) ** 2).mean(axis=0)
    var = np.maximum(var_raw, _LATENT_VAR_FLOOR)
    sigma = np.sqrt(var)
    n_t = Rt.shape[0]
    # eps is one draw shared by all targets (shape (L,)) or one per target
    eps = np.broadcast_to(eps, (n_t, L))
    z = mu + sigma * eps

    Xt = np.column_stack([Rt, z, np.zeros((n_t, L))])
    out, dec_trace = nn.forward_trace(model.decoder, Xt)
    mean = out[:, 0]
    l2, d_mean = nn.mse_grad(mean, dt)
    kl, d_mu_kl, d_var_kl = nn.kl_diag_gaussians_grad(mu, var, np.zeros(L), np.ones(L))
    objective = l2 + kl_weight * kl

    Xm = np.column_stack([Rt, np.tile(mu, (n_t, 1)), np.zeros((n_t, L))])
    out_m, mtrace = nn.forward_trace(model.decoder, Xm)
    v = variance_map(out_m[:, 1])
    nll, _, d_v = nn.gaussian_nll_grad(out_m[:, 0], v, dt)
    nll /= n_t
    if not want_grads:
        return objective, nll, None, None

    up = np.zeros_like(out)
    up[:, 0] = d_mean
    dec_grads, d_in = nn.backward(model.decoder, Xt, up, dec_trace)
    # likelihood term: output layer's variance column only, so the hidden
    # features are shaped by the mean objective alone
    g_pre = variance_weight * d_v / n_t * nn.sigmoid(out_m[:, 1])
    hidden = mtrace[0][-1]
    dec_grads[-2][:, 1] += hidden.T @ g_pre
    dec_grads[-1][1] += g_pre.sum()

    d_z = d_in[:, Rt.shape[1] : Rt.shape[1] + L]
    d_mu = d_z.sum(axis=0) + kl_weight * d_mu_kl
    d_var = (d_z * eps).sum(axis=0) / (2.0 * sigma) + kl_weight * d_var_kl
    d_var = np.where(var_raw > _LATENT_VAR_FLOOR, d_var, 0.0)
    d_Zc = d_mu / n_c + d_var * 2.0 * (Zc - mu) / n_c
    enc_grads, _ = nn.backward(model.encoder, Xc, d_Zc, enc_trace)
    return objective, nll, enc_grads, dec_grads


def _split_episode(rng, n, context_fraction):
    order = rng.permutation(n)
    n_c = min(max(1, int(round(n * context_fraction))), n - 1)
    return order[:n_c], order[n_c:]


def _draw_episode(rng, block, idx, context_fraction, pseudo_fraction):
    """Context and target arrays for one batch of a scenario.

    With probability ``pseudo_fraction`` the context is a draw of LOS
    pseudo-labeled pairs (the form the aggregator receives online) and the
    whole batch serves as targets; otherwise the batch is split in two.
    """
    _, R, y, Rp, yp = block
    R, y = R[idx], y[idx]
    if yp.size and rng.random() < pseudo_fraction:
        n_c = max(1, int(round(idx.size * context_fraction)))
        pick = rng.choice(yp.size, size=min(n_c, yp.size), replace=False)
        return Rp[pick], yp[pick], R, y
    ci, ti = _split_episode(rng, idx.size, context_fraction)
    return R[ci], y[ci], R[ti], y[ti]


def train_encoder_decoder(model: NprModel, train: Dataset, val: Dataset, epochs: int = 60,
                          batch_size: int = 128, seed: int = 0, kl_weight: float | None = None,
                          pseudo_fraction: float | None = None, lr_halflife: float | None = None,
                          variance_weight: float = 1.0, restore_best: bool = True):
    """End-to-end phase.  Mutates ``model`` and returns the loss trace.

    With ``restore_best`` the parameters from the epoch with the lowest
    validation loss are kept, which stops the variance column from shrinking
    onto training residuals.

    With ``lr_halflife`` the learning rate decays as
    ``lr / (1 + epoch / lr_halflife)``; otherwise it stays constant.

    Targets are always NLOS samples with their true bias.  LOS samples in
    ``train`` only ever appear as pseudo-labeled context.
    """
    _require_nlos(train, "training")
    _require_nlos(val, "validation")
    if epochs < 1 or batch_size < 2:
        raise ValueError("need epochs >= 1 and batch_size >= 2")
    cfg = model.config
    kl_weight = cfg.kl_weight if kl_weight is None else kl_weight
    pseudo_fraction = cfg.pseudo_fraction if pseudo_fraction is None else pseudo_fraction
    rng = np.random.default_rng(seed)
    if model.normalization is None:
        model.normalization = Normalization.fit(train.nlos().encoded())
    blocks = _scenario_blocks(train, model)
    val_blocks = _scenario_blocks(val, model)
    params = model.encoder.params() + model.decoder.params()
    n_enc = len(model.encoder.params())
    opt = nn.OptimizerState.for_params(params, lr=cfg.learning_rate)
    trace = {"train": [], "val": [], "variance_nll": []}
    val_seed = int(rng.integers(2**32))
    best = (np.inf, None)

    for epoch in range(epochs):
        if lr_halflife:
            opt.lr = cfg.learning_rate / (1.0 + epoch / lr_halflife)
        batches = []
        for bi, block in enumerate(blocks):
            order = rng.permutation(block[2].size)
            for start in range(0, order.size, batch_size):
                idx = order[start : start + batch_size]
                if idx.size >= 2:
                    batches.append((bi, idx))
        rng.shuffle(batches)
        losses, nlls = [], []
        for bi, idx in batches:
            Rc, dc, Rt, dt = _draw_episode(rng, blocks[bi], idx, cfg.context_fraction, pseudo_fraction)
            eps = rng.standard_normal((Rt.shape[0], model.latent_dim))
            obj, nll, ge, gd = _episode_loss(model, Rc, dc, Rt, dt, eps, kl_weight,
                                              variance_weight=variance_weight)
            params = nn.optimizer_step(opt, params, ge + gd)
            model.encoder.set_params(params[:n_enc])
            model.decoder.set_params(params[n_enc:])
            losses.append(obj)
            nlls.append(nll)
        trace["train"].append(float(np.mean(losses)))
        trace["variance_nll"].append(float(np.mean(nlls)))
        trace["val"].append(_validation_loss(model, val_blocks, batch_size, kl_weight,
                                             pseudo_fraction, val_seed))
        if not (model.encoder.is_finite() and model.decoder.is_finite()):
            raise FloatingPointError("training diverged to non-finite parameters")
        if trace["val"][-1] < best[0]:
            best = (trace["val"][-1], [p.copy() for p in params])

    if restore_best:
        model.encoder.set_params(best[1][:n_enc])
        model.decoder.set_params(best[1][n_enc:])
    trace["best_epoch"] = int(np.argmin(trace["val"]))
    model.phases = model.phases | {"encoder"}
    model.stats = context_stats(model, train.nlos())
    return trace


def _validation_loss(model, blocks, batch_size, kl_weight, pseudo_fraction, seed):
    # fixed seed and z = mu_z: the same episodes are scored every epoch
    rng = np.random.default_rng(seed)
    zero = np.zeros(model.latent_dim)
    vals = []
    for block in blocks:
        n = block[2].size
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            if idx.size < 2:
                continue
            Rc, dc, Rt, dt = _draw_episode(rng, block, idx, model.config.context_fraction,
                                           pseudo_fraction)
            obj, _, _, _ = _episode_loss(model, Rc, dc, Rt, dt, zero, kl_weight, want_grads=False)
            vals.append(obj)
    return float(np.mean(vals))


def context_stats(model: NprModel, context: Dataset, include_los: bool = False) -> LatentStats:
    """Aggregate latents of the NLOS samples in ``context`` (true labels) and,
    with ``include_los``, of its LOS samples as pseudo-labeled pairs."""
    mp = model.config.max_paths
    rows, labels = [], []
    for s in context.samples:
        if s.is_nlos:
            rows.append(encode(s.pdp, mp))
            labels.append(s.delta_d_m)
        elif include_los and len(s.pdp) >= 2:
            rows.append(encode(s.pdp.strip_first(), mp))
            labels.append(pseudo_label(s.pdp))
    if not rows:
        raise DatasetError("context has no usable samples")
    return aggregate(encode_context(model, np.stack(rows), labels), model.config.forgetting)


# ---------------------------------------------------------------------------
# phase 2: deterministic head


def build_head_labels(model: NprModel, train: Dataset, n_z_samples: int = 64, seed: int = 0,
                      chunk: int = 64, pseudo_fraction: float | None = None):
    """Label tuples ``(r, mu_z, var_z, E[dd], Var[dd])`` from the Monte-Carlo path.

    Each chunk of NLOS targets is paired with stats aggregated from a context
    drawn like the end-to-end episodes.
    """
    _require_nlos(train, "training")
    pseudo_fraction = model.config.pseudo_fraction if pseudo_fraction is None else pseudo_fraction
    rng = np.random.default_rng(seed)
    rows = {k: [] for k in ("r", "mu_z", "var_z", "mean", "var")}
    for block in _scenario_blocks(train, model):
        order = rng.permutation(block[2].size)
        for start in range(0, order.size, chunk):
            idx = order[start : start + chunk]
            if idx.size < 2:
                continue
            Rc, dc, Rt, _ = _draw_episode(rng, block, idx, model.config.context_fraction,
                                          pseudo_fraction)
            stats = aggregate(nn.forward(model.encoder, np.column_stack([Rc, dc])))
            Z = reparameterize(stats, rng, n_z_samples)
            means, variances = _mc_heads(model.decoder, Rt, Z)
            rows["r"].append(Rt)
            rows["mu_z"].append(np.tile(stats.mu_z, (Rt.shape[0], 1)))
            rows["var_z"].append(np.tile(stats.var_z, (Rt.shape[0], 1)))
            rows["mean"].append(means.mean(axis=1))
            rows["var"].append(means.var(axis=1) + variances.mean(axis=1))
    return {k: np.concatenate(v) for k, v in rows.items()}


def head_loss(decoder, X, label_mean, label_var, want_grads=True):
    """Gaussian NLL of the label mean (at the label variance) plus squared
    relative error of the predicted variance, both averaged over rows."""
    out, trace = nn.forward_trace(decoder, X)
    n = X.shape[0]
    v = variance_map(out[:, 1])
    nll, d_mean, _ = nn.gaussian_nll_grad(out[:, 0], label_var, label_mean)
    rel = v / label_var - 1.0
    value = nll / n + float(np.mean(rel**2))
    if not want_grads:
        return value, None
    up = np.empty_like(out)
    up[:, 0] = d_mean / n
    up[:, 1] = 2.0 * rel / label_var / n * nn.sigmoid(out[:, 1])
    grads, _ = nn.backward(decoder, X, up, trace)
    return value, grads


def train_decoder_head(model: NprModel, train: Dataset, n_z_samples: int = 64, epochs: int = 150,
                       seed: int = 0, batch_size: int = 256, labels=None, lr_halflife: float = 50.0):
    """Fit the deterministic decoder path to Monte-Carlo labels.

    The encoder is never touched.  The learning rate decays as
    ``lr / (1 + epoch / lr_halflife)``.
    """
    if "encoder" not in model.phases or model.normalization is None:
        raise StateError("train the encoder/decoder end to end before the head phase")
    rng = np.random.default_rng(seed)
    encoder_before = model.encoder.flat_params().copy()
    if labels is None:
        labels = build_head_labels(model, train, n_z_samples, int(rng.integers(2**32)))
    X = np.column_stack([labels["r"], labels["mu_z"], labels["var_z"]])
    ym, yv = labels["mean"], labels["var"]
    params = model.decoder.params()
    opt = nn.OptimizerState.for_params(params, lr=model.config.learning_rate)
    base_lr = model.config.learning_rate
    trace = {"train": []}
    n = X.shape[0]
    for epoch in range(epochs):
        opt.lr = base_lr / (1.0 + epoch / lr_halflife) if lr_halflife else base_lr
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            _, grads = head_loss(model.decoder, X[idx], ym[idx], yv[idx])
            params = nn.optimizer_step(opt, params, grads)
            model.decoder.set_params(params)
        trace["train"].append(head_loss(model.decoder, X, ym, yv, want_grads=False)[0])
        if not model.decoder.is_finite():
            raise FloatingPointError("head training diverged")
    if not np.array_equal(model.encoder.flat_params(), encoder_before):
        raise AssertionError("encoder parameters changed during the head phase")
    model.phases = model.phases | {"head"}
    return trace


# ---------------------------------------------------------------------------
# online use


def online_update(model: NprModel, pdp: PowerDelayProfile, p_nlos: float,
                  threshold: float | None = None):
    """Fold one LOS-gated measurement into the latent statistics.

    Returns ``(model, status)`` with status ``"updated"``, ``"gated"`` (the
    scene looks NLOS, nothing changes) or ``"skipped"`` (single-path
    profile, no arrival difference to use).
    """
    threshold = model.config.threshold if threshold is None else threshold
    if p_nlos >= threshold:
        return model, "gated"
    if len(pdp) < 2:
        log.warning("online update skipped: profile has a single path")
        return model, "skipped"
    label = (pdp.delays[1] - pdp.delays[0]) * SPEED_OF_LIGHT
    r = encode(pdp.strip_first(), model.config.max_paths)
    z = encode_context(model, r[None, :], [label])[0]
    return model.with_stats(aggregate_online(model.stats, z)), "updated"


def pseudo_label(pdp: PowerDelayProfile) -> float:
    return float((pdp.delays[1] - pdp.delays[0]) * SPEED_OF_LIGHT)


def _require_trained(model):
    if "encoder" not in model.phases:
        raise StateError("model is untrained")


def predict(model: NprModel, pdp: PowerDelayProfile, stats: LatentStats | None = None):
    _require_trained(model)
    return decode(model, encode(pdp, model.config.max_paths), stats)


def predict_many(model: NprModel, pdps: Sequence[PowerDelayProfile], stats: LatentStats | None = None):
    _require_trained(model)
    R = np.stack([encode(p, model.config.max_paths) for p in pdps])
    return decode(model, R, stats)


# ---------------------------------------------------------------------------
# checkpoints


def model_to_dict(model: NprModel) -> dict:
    cfg = dataclasses.asdict(model.config)
    return {
        "version": CHECKPOINT_VERSION,
        "kind": "npr",
        "config": cfg,
        "encoder": nn.net_to_dict(model.encoder),
        "decoder": nn.net_to_dict(model.decoder),
        "stats": model.stats.to_dict(),
        "normalization": model.normalization.to_dict() if model.normalization else None,
        "phases": sorted(model.phases),
    }


def model_from_dict(d: dict) -> NprModel:
    if d.get("kind") != "npr" or d.get("version") != CHECKPOINT_VERSION:
        raise ValueError("not a version-1 NPR checkpoint")
    cfg = dict(d["config"])
    for key in ("encoder_hidden", "decoder_hidden"):
        cfg[key] = tuple(cfg[key])
    norm = d.get("normalization")
    return NprModel(
        encoder=nn.net_from_dict(d["encoder"]),
        decoder=nn.net_from_dict(d["decoder"]),
        config=NprConfig(**cfg),
        stats=LatentStats.from_dict(d["stats"]),
        normalization=Normalization.from_dict(norm) if norm else None,
        phases=frozenset(d.get("phases", ())),
    )


def save_model(model: NprModel, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh)


def load_model(path) -> NprModel:
    with open(path) as fh:
        return model_from_dict(json.load(fh))
