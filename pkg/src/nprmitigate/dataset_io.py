"""Dataset container, fixed-length profile encoding, splitting and JSONL I/O.

File layout: the first line is a header ``{"version": 1, "feature_dim": K}``
(plus an optional ``"normalization"`` block), followed by one JSON object per
sample with the fields ``scenario_id``, ``condition``, ``true_distance_m``,
``estimated_distance_m``, ``delta_d_m``, ``powers`` and ``delays`` (seconds,
absolute).  Floats are written with ``repr`` precision, so a save/load cycle
is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .channel_sim import LOS, NLOS, PowerDelayProfile, RangingSample

FORMAT_VERSION = 1
DEFAULT_MAX_PATHS = 16


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, lineno, message):
        super().__init__(f"line {lineno}: {message}")
        self.lineno = lineno


class VersionError(DatasetError):
    pass


def encode(pdp: PowerDelayProfile, max_paths: int = DEFAULT_MAX_PATHS, relative: bool = True) -> np.ndarray:
    """``[powers | delays]``, each padded with zeros or truncated to ``max_paths``.

    Truncation keeps the strongest paths and preserves their delay order.
    With ``relative`` the delays are excess delays measured from the first
    retained path, which removes the absolute range from the encoding.
    """
    if max_paths < 1:
        raise ValueError("max_paths must be >= 1")
    powers, delays = pdp.powers, pdp.delays
    if powers.size > max_paths:
        keep = np.sort(np.argsort(-powers, kind="stable")[:max_paths])
        powers, delays = powers[keep], delays[keep]
    if relative:
        delays = delays - delays[0]
    out = np.zeros(2 * max_paths)
    out[: powers.size] = powers
    out[max_paths : max_paths + delays.size] = delays
    return out


def decode_vector(vec, max_paths: int) -> PowerDelayProfile:
    """Inverse of ``encode`` for vectors it produced (padding is dropped)."""
    vec = np.asarray(vec, dtype=np.float64)
    powers, delays = vec[:max_paths], vec[max_paths:]
    n = max_paths
    while n > 1 and powers[n - 1] == 0 and delays[n - 1] == 0:
        n -= 1
    return PowerDelayProfile(powers[:n], delays[:n])


@dataclass(frozen=True)
class Normalization:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape or np.any(~(std > 0)):
            raise DatasetError("normalization needs matching shapes and std > 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def fit(cls, X) -> "Normalization":
        X = np.asarray(X, dtype=np.float64)
        std = X.std(axis=0)
        # constant columns (e.g. padding that is never filled) pass through unscaled
        std = np.where(std > 1e-300, std, 1.0)
        return cls(X.mean(axis=0), std)

    def apply(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def invert(self, Z):
        return np.asarray(Z, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))

    def __eq__(self, other):
        return (
            isinstance(other, Normalization)
            and np.array_equal(self.mean, other.mean)
            and np.array_equal(self.std, other.std)
        )


@dataclass(frozen=True)
class Dataset:
    samples: tuple[RangingSample, ...] = ()
    feature_dim: int = 2 * DEFAULT_MAX_PATHS
    normalization: Normalization | None = None

    def __post_init__(self):
        object.__setattr__(self, "samples", tuple(self.samples))
        if self.feature_dim < 2 or self.feature_dim % 2:
            raise DatasetError("feature_dim must be an even number >= 2")
        if self.normalization is not None and self.normalization.mean.shape != (self.feature_dim,):
            raise DatasetError("normalization length does not match feature_dim")

    @property
    def max_paths(self) -> int:
        return self.feature_dim // 2

    def __len__(self):
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def encoded(self) -> np.ndarray:
        if not self.samples:
            return np.zeros((0, self.feature_dim))
        return np.stack([encode(s.pdp, self.max_paths) for s in self.samples])

    def targets(self) -> np.ndarray:
        return np.array([s.delta_d_m for s in self.samples])

    def filter(self, pred) -> "Dataset":
        return Dataset(tuple(s for s in self.samples if pred(s)), self.feature_dim, self.normalization)

    def nlos(self) -> "Dataset":
        return self.filter(lambda s: s.is_nlos)

    def los(self) -> "Dataset":
        return self.filter(lambda s: not s.is_nlos)

    def scenario_ids(self) -> list[str]:
        return sorted({s.scenario_id for s in self.samples})

    def by_scenario(self) -> dict[str, "Dataset"]:
        return {sid: self.filter(lambda s, sid=sid: s.scenario_id == sid) for sid in self.scenario_ids()}

    def with_normalization(self, norm: Normalization | None) -> "Dataset":
        return Dataset(self.samples, self.feature_dim, norm)

    def fit_normalization(self) -> "Dataset":
        if not self.samples:
            raise DatasetError("cannot fit normalization on an empty dataset")
        return self.with_normalization(Normalization.fit(self.encoded()))


def concat(datasets: Sequence[Dataset]) -> Dataset:
    if not datasets:
        raise DatasetError("nothing to concatenate")
    dims = {d.feature_dim for d in datasets}
    if len(dims) != 1:
        raise DatasetError("datasets disagree on feature_dim")
    samples = [s for d in datasets for s in d.samples]
    return Dataset(tuple(samples), dims.pop(), datasets[0].normalization)


def split(ds: Dataset, train_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Shuffled partition into ``floor(n * f)`` and ``n - floor(n * f)`` samples."""
    if not 0.0 < train_fraction < 1.0:
        raise DatasetError("train_fraction must lie strictly between 0 and 1")
    n = len(ds)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    n_train = int(np.floor(n * train_fraction))
    if n_train == 0 or n_train == n:
        raise DatasetError(f"split of {n} samples at {train_fraction} leaves one side empty")
    order = np.random.default_rng(seed).permutation(n)
    train = tuple(ds.samples[i] for i in order[:n_train])
    test = tuple(ds.samples[i] for i in order[n_train:])
    return (
        Dataset(train, ds.feature_dim, ds.normalization),
        Dataset(test, ds.feature_dim, ds.normalization),
    )


# ---------------------------------------------------------------------------
# JSONL persistence


def sample_to_record(s: RangingSample) -> dict:
    return {
        "scenario_id": s.scenario_id,
        "condition": s.condition,
        "true_distance_m": s.true_distance_m,
        "estimated_distance_m": s.estimated_distance_m,
        "delta_d_m": s.delta_d_m,
        "powers": s.pdp.powers.tolist(),
        "delays": s.pdp.delays.tolist(),
    }


def sample_from_record(rec: dict) -> RangingSample:
    if rec["condition"] not in (LOS, NLOS):
        raise ValueError(f"bad condition {rec['condition']!r}")
    return RangingSample(
        pdp=PowerDelayProfile(np.asarray(rec["powers"], float), np.asarray(rec["delays"], float)),
        true_distance_m=float(rec["true_distance_m"]),
        estimated_distance_m=float(rec["estimated_distance_m"]),
        delta_d_m=float(rec["delta_d_m"]),
        condition=rec["condition"],
        scenario_id=str(rec["scenario_id"]),
    )


def dumps(ds: Dataset) -> str:
    header = {"version": FORMAT_VERSION, "feature_dim": ds.feature_dim}
    if ds.normalization is not None:
        header["normalization"] = ds.normalization.to_dict()
    lines = [json.dumps(header)]
    lines.extend(json.dumps(sample_to_record(s)) for s in ds.samples)
    return "\n".join(lines) + "\n"


def loads(text: str) -> Dataset:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(1, "missing header line")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ParseError(1, f"invalid header: {exc.msg}") from None
    if not isinstance(header, dict) or "version" not in header:
        raise ParseError(1, "header lacks a version field")
    if header["version"] != FORMAT_VERSION:
        raise VersionError(f"unsupported dataset version {header['version']!r}")
    if "feature_dim" not in header:
        raise ParseError(1, "header lacks feature_dim")
    norm = header.get("normalization")
    samples = []
    for lineno, line in enumerate(lines[1:], 2):
        try:
            samples.append(sample_from_record(json.loads(line)))
        except json.JSONDecodeError as exc:
            raise ParseError(lineno, f"invalid JSON: {exc.msg}") from None
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(lineno, f"invalid sample record: {exc}") from None
    return Dataset(
        tuple(samples),
        int(header["feature_dim"]),
        Normalization.from_dict(norm) if norm is not None else None,
    )


def save(ds: Dataset, path):
    with open(path, "w") as fh:
        fh.write(dumps(ds))


def load(path) -> Dataset:
    with open(path) as fh:
        return loads(fh.read())
