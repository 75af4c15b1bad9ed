"""Reference bias estimators: exact GP regression and a frozen feed-forward net.

The GP works on the six scalar profile features (standardized with training
statistics) with a squared-exponential kernel and zero prior mean.  The
feed-forward regressor works on the same padded profile encoding as the
neural process and is frozen once fitted.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from itertools import product
from typing import Sequence

import numpy as np
import scipy.linalg

from . import nn
from .channel_sim import PowerDelayProfile, pdp_features
from .dataset_io import Dataset, DatasetError, Normalization, encode


class ConditioningError(np.linalg.LinAlgError):
    pass


class NotFittedError(RuntimeError):
    pass


@dataclass(frozen=True)
class GprHyperparams:
    length_scale: float = 1.0
    signal_variance: float = 1.0
    noise_variance: float = 0.01
    jitter: float = 1e-10

    def __post_init__(self):
        for name in ("length_scale", "signal_variance", "noise_variance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class GprModel:
    hyper: GprHyperparams
    X: np.ndarray
    y: np.ndarray
    chol: np.ndarray
    alpha: np.ndarray
    feature_norm: Normalization | None = None


def se_kernel(A, B, length_scale, signal_variance):
    A = np.atleast_2d(A)
    B = np.atleast_2d(B)
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return signal_variance * np.exp(-0.5 * np.maximum(sq, 0.0) / length_scale**2)


def gpr_fit_arrays(X, y, hyper: GprHyperparams, feature_norm=None) -> GprModel:
    """Cholesky-factorize ``K + (noise + jitter) I``; cubic in ``len(y)``."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if X.shape[0] < 1 or X.shape[0] != y.shape[0]:
        raise DatasetError("need at least one training point and one target per row")
    K = se_kernel(X, X, hyper.length_scale, hyper.signal_variance)
    K[np.diag_indices_from(K)] += hyper.noise_variance + hyper.jitter * hyper.signal_variance
    try:
        chol = scipy.linalg.cholesky(K, lower=True)
    except np.linalg.LinAlgError as exc:
        raise ConditioningError(
            f"kernel matrix is not positive definite ({exc}); increase jitter or noise_variance"
        ) from None
    alpha = scipy.linalg.cho_solve((chol, True), y)
    return GprModel(hyper, X, y, chol, alpha, feature_norm)


def features_of(samples: Sequence) -> np.ndarray:
    return np.stack([pdp_features(s.pdp if hasattr(s, "pdp") else s) for s in samples])


def gpr_fit(train: Dataset, hyper: GprHyperparams, max_points: int | None = None, seed: int = 0) -> GprModel:
    """Fit on the NLOS samples of ``train`` (optionally a random subset)."""
    nlos = train.nlos()
    if len(nlos) == 0:
        raise DatasetError("GP training needs NLOS samples")
    samples = list(nlos.samples)
    if max_points is not None and len(samples) > max_points:
        pick = np.sort(np.random.default_rng(seed).choice(len(samples), max_points, replace=False))
        samples = [samples[i] for i in pick]
    F = features_of(samples)
    norm = Normalization.fit(F)
    y = np.array([s.delta_d_m for s in samples])
    return gpr_fit_arrays(norm.apply(F), y, hyper, norm)


def gpr_predict(model: GprModel, r_test):
    """Posterior mean and latent-function variance at test inputs.

    ``r_test`` is a profile, a sequence of profiles, or raw feature rows.
    """
    X, single = _gp_inputs(model, r_test)
    h = model.hyper
    Ks = se_kernel(X, model.X, h.length_scale, h.signal_variance)
    mean = Ks @ model.alpha
    v = scipy.linalg.solve_triangular(model.chol, Ks.T, lower=True)
    var = np.maximum(h.signal_variance - (v * v).sum(axis=0), 0.0)
    return (float(mean[0]), float(var[0])) if single else (mean, var)


def _gp_inputs(model, r_test):
    if isinstance(r_test, PowerDelayProfile):
        F, single = pdp_features(r_test)[None, :], True
    elif isinstance(r_test, (list, tuple)) and r_test and not np.isscalar(r_test[0]) and (
        isinstance(r_test[0], PowerDelayProfile) or hasattr(r_test[0], "pdp")
    ):
        F, single = features_of(r_test), False
    else:
        F = np.asarray(r_test, dtype=np.float64)
        single = F.ndim == 1
        F = np.atleast_2d(F)
    if model.feature_norm is not None:
        F = model.feature_norm.apply(F)
    return F, single


def gpr_log_predictive(model: GprModel, X, y) -> float:
    """Mean negative log predictive density of noisy targets."""
    mean, var = gpr_predict(model, X)
    return nn.gaussian_nll(mean, var + model.hyper.noise_variance, y) / len(y)


DEFAULT_GRID = {
    "length_scale": np.logspace(-1, 1, 5),
    "signal_variance": np.logspace(-2, 1, 5),
    "noise_variance": np.logspace(-3, 0, 5),
}


def gpr_select(train: Dataset, val: Dataset, grid=None, max_points: int = 800, seed: int = 0):
    """Coarse grid search on validation NLL.  Returns ``(model, table)``."""
    grid = grid or DEFAULT_GRID
    val_nlos = val.nlos()
    if len(val_nlos) == 0:
        raise DatasetError("validation split has no NLOS samples")
    Fv = features_of(val_nlos.samples)
    yv = val_nlos.targets()
    best, table = None, []
    for ls, sv, nv in product(grid["length_scale"], grid["signal_variance"], grid["noise_variance"]):
        hyper = GprHyperparams(float(ls), float(sv), float(nv))
        try:
            model = gpr_fit(train, hyper, max_points, seed)
        except ConditioningError:
            continue
        score = gpr_log_predictive(model, Fv, yv)
        table.append((hyper, score))
        if best is None or score < best[1]:
            best = (model, score)
    if best is None:
        raise ConditioningError("no grid point produced a usable factorization")
    return best[0], table


def gpr_to_dict(model: GprModel) -> dict:
    h = model.hyper
    return {
        "version": 1,
        "kind": "gpr",
        "hyper": {"length_scale": h.length_scale, "signal_variance": h.signal_variance,
                  "noise_variance": h.noise_variance, "jitter": h.jitter},
        "X": model.X.tolist(),
        "y": model.y.tolist(),
        "feature_norm": model.feature_norm.to_dict() if model.feature_norm else None,
    }


def gpr_from_dict(d: dict) -> GprModel:
    if d.get("kind") != "gpr" or d.get("version") != 1:
        raise ValueError("not a version-1 GPR checkpoint")
    norm = Normalization.from_dict(d["feature_norm"]) if d.get("feature_norm") else None
    return gpr_fit_arrays(np.asarray(d["X"]), np.asarray(d["y"]), GprHyperparams(**d["hyper"]), norm)


# ---------------------------------------------------------------------------
# frozen feed-forward regressor


@dataclass
class FrozenMlp:
    net: nn.FeedForwardNet
    normalization: Normalization
    max_paths: int
    trace: list = field(default_factory=list)


def _fit_net(net, X, y, epochs, batch_size, lr, rng, trace):
    params = net.params()
    opt = nn.OptimizerState.for_params(params, lr=lr)
    n = len(y)
    for _ in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            out, tr = nn.forward_trace(net, X[idx])
            loss, g = nn.mse_grad(out[:, 0], y[idx])
            grads, _ = nn.backward(net, X[idx], g[:, None], tr)
            params = nn.optimizer_step(opt, params, grads)
            net.set_params(params)
            losses.append(loss)
        trace.append(float(np.mean(losses)))
    if not net.is_finite():
        raise FloatingPointError("regressor training diverged")


def mlp_fit(train: Dataset, epochs: int = 100, seed: int = 0, hidden=(128, 128, 64),
            batch_size: int = 128, lr: float = 1e-3, normalization: Normalization | None = None) -> FrozenMlp:
    """L2 regression of the bias on the padded profile encoding (NLOS only)."""
    nlos = train.nlos()
    if len(nlos) == 0:
        raise DatasetError("regressor training needs NLOS samples")
    R = nlos.encoded()
    norm = normalization or Normalization.fit(R)
    rng = np.random.default_rng(seed)
    net = nn.init_net([R.shape[1], *hidden, 1], "relu", rng)
    trace: list = []
    _fit_net(net, norm.apply(R), nlos.targets(), epochs, batch_size, lr, rng, trace)
    return FrozenMlp(net, norm, nlos.max_paths, trace)


def mlp_retrain(model: FrozenMlp, data: Dataset, epochs: int = 50, seed: int = 0,
                batch_size: int = 64, lr: float = 1e-3) -> FrozenMlp:
    """Fine-tune a copy on new labeled NLOS data; the original stays frozen."""
    nlos = data.nlos()
    if len(nlos) == 0:
        raise DatasetError("retraining needs labeled NLOS samples")
    net = model.net.copy()
    R = np.stack([encode(s.pdp, model.max_paths) for s in nlos.samples])
    trace: list = []
    _fit_net(net, model.normalization.apply(R), nlos.targets(), epochs, batch_size, lr,
             np.random.default_rng(seed), trace)
    return FrozenMlp(net, model.normalization, model.max_paths, trace)


def mlp_predict(model: FrozenMlp | None, r_test):
    """Point estimate of the bias; the regressor reports no variance."""
    if model is None:
        raise NotFittedError("regressor has not been fitted")
    if isinstance(r_test, PowerDelayProfile):
        R, single = encode(r_test, model.max_paths)[None, :], True
    elif isinstance(r_test, (list, tuple)) and r_test and isinstance(r_test[0], PowerDelayProfile):
        R, single = np.stack([encode(p, model.max_paths) for p in r_test]), False
    else:
        R = np.asarray(r_test, dtype=np.float64)
        single = R.ndim == 1
        R = np.atleast_2d(R)
    out = nn.forward(model.net, model.normalization.apply(R))[:, 0]
    return float(out[0]) if single else out


def mlp_to_dict(model: FrozenMlp) -> dict:
    return {"version": 1, "kind": "mlp", "net": nn.net_to_dict(model.net),
            "normalization": model.normalization.to_dict(), "max_paths": model.max_paths}


def mlp_from_dict(d: dict) -> FrozenMlp:
    if d.get("kind") != "mlp" or d.get("version") != 1:
        raise ValueError("not a version-1 MLP checkpoint")
    return FrozenMlp(nn.net_from_dict(d["net"]), Normalization.from_dict(d["normalization"]),
                     int(d["max_paths"]))


def save_json(obj: dict, path):
    with open(path, "w") as fh:
        json.dump(obj, fh)


def load_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
