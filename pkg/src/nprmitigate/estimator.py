"""Two-stage range estimate: NLOS probability, then bias-weighted correction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .channel_sim import N_FEATURES, PowerDelayProfile, pdp_features
from .dataset_io import Dataset, DatasetError


class StateError(RuntimeError):
    pass


@dataclass
class NlosClassifier:
    """Logistic regression on standardized profile features."""

    weights: np.ndarray
    bias: float = 0.0
    feature_mean: np.ndarray | None = None
    feature_std: np.ndarray | None = None
    trained: bool = False
    note: str = "logistic model on six profile features; probabilities calibrated on synthetic labels only"

    @classmethod
    def zeros(cls) -> "NlosClassifier":
        return cls(np.zeros(N_FEATURES), 0.0, np.zeros(N_FEATURES), np.ones(N_FEATURES), True)

    def _standardize(self, F):
        return (F - self.feature_mean) / self.feature_std

    def to_dict(self):
        return {
            "version": 1,
            "kind": "nlos_classifier",
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "trained": self.trained,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d):
        if d.get("kind") != "nlos_classifier" or d.get("version") != 1:
            raise ValueError("not a version-1 classifier checkpoint")
        return cls(np.asarray(d["weights"]), float(d["bias"]), np.asarray(d["feature_mean"]),
                   np.asarray(d["feature_std"]), bool(d["trained"]), d.get("note", ""))


def _features(pdps):
    if isinstance(pdps, PowerDelayProfile):
        return pdp_features(pdps)[None, :], True
    return np.stack([pdp_features(p) for p in pdps]), False


def classify_nlos(clf: NlosClassifier, pdp):
    """P(NLOS | profile); accepts one profile or a sequence of them."""
    if not clf.trained:
        raise StateError("classifier has not been trained")
    F, single = _features(pdp)
    p = nn.sigmoid(clf._standardize(F) @ clf.weights + clf.bias)
    return float(p[0]) if single else p


def train_classifier(data: Dataset, epochs: int = 500, lr: float = 0.05, l2: float = 1e-4,
                     seed: int = 0) -> NlosClassifier:
    """Full-batch Adam on the mean logistic loss."""
    if len(data) == 0:
        raise DatasetError("classifier training needs labeled samples")
    F, _ = _features([s.pdp for s in data.samples])
    labels = np.array([1.0 if s.is_nlos else 0.0 for s in data.samples])
    mean, std = F.mean(axis=0), F.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    X = (F - mean) / std
    rng = np.random.default_rng(seed)
    params = [rng.normal(0.0, 0.01, N_FEATURES), np.zeros(1)]
    opt = nn.OptimizerState.for_params(params, lr=lr)
    n = len(labels)
    for _ in range(epochs):
        w, b = params
        p = nn.sigmoid(X @ w + b[0])
        diff = (p - labels) / n
        params = nn.optimizer_step(opt, params, [X.T @ diff + l2 * w, np.array([diff.sum()])])
    return NlosClassifier(params[0], float(params[1][0]), mean, std, True)


def accuracy(clf: NlosClassifier, data: Dataset) -> float:
    p = classify_nlos(clf, [s.pdp for s in data.samples])
    labels = np.array([s.is_nlos for s in data.samples])
    return float(np.mean((p >= 0.5) == labels))


def mmse_range(d_bar, p_nlos, mean_bias):
    """Conditional-mean range: ``d_bar - p_nlos * mean_bias``."""
    return d_bar - p_nlos * mean_bias
