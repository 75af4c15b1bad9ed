"""Parametric multipath scenarios and labeled ranging samples.

Each scenario stands in for one propagation environment.  A sample is drawn
as follows:

* the condition is NLOS with probability ``nlos_probability``;
* the true distance is uniform over ``distance_range``;
* a reflected tail of ``n_paths - 1`` paths is drawn with exponential
  inter-arrival gaps (mean ``mean_gap``) and exponentially decaying power
  (time constant ``decay_constant``) with lognormal jitter;
* the first detected path leads the tail by a gap.  In NLOS the gap is an
  exponential draw, the first path is attenuated by a blocking factor, and
  the range picks up the bias ``alpha * c * rms_spread + beta * c * gap + eps``
  evaluated on the resulting profile.  In LOS the same bias rule, applied to
  the reflected tail on its own, sets the spacing between the direct path and
  the first reflection, so the LOS spacing carries the scenario's bias
  structure;
* the raw estimate is ``c * tau0``, i.e. ``d + n_LOS`` or ``d + g + n_NLOS``.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

SPEED_OF_LIGHT = 299_792_458.0
LOS = "LOS"
NLOS = "NLOS"
N_FEATURES = 6
FEATURE_NAMES = (
    "total_power",
    "first_path_ratio",
    "rms_delay_spread",
    "mean_excess_delay",
    "power_kurtosis",
    "n_paths",
)


class ConfigError(ValueError):
    def __init__(self, field_name, message):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class PowerDelayProfile:
    powers: np.ndarray
    delays: np.ndarray

    def __post_init__(self):
        powers = np.asarray(self.powers, dtype=np.float64).ravel()
        delays = np.asarray(self.delays, dtype=np.float64).ravel()
        if powers.size < 1 or powers.size != delays.size:
            raise ValueError("powers and delays must be non-empty and equally long")
        if np.any(powers < 0) or not np.all(np.isfinite(powers)):
            raise ValueError("powers must be finite and non-negative")
        if np.any(delays < 0) or np.any(np.diff(delays) <= 0):
            raise ValueError("delays must be non-negative and strictly increasing")
        object.__setattr__(self, "powers", powers)
        object.__setattr__(self, "delays", delays)

    def __len__(self):
        return self.powers.size

    def __eq__(self, other):
        if not isinstance(other, PowerDelayProfile):
            return NotImplemented
        return np.array_equal(self.powers, other.powers) and np.array_equal(
            self.delays, other.delays
        )

    def __hash__(self):
        return hash((self.powers.tobytes(), self.delays.tobytes()))

    def strip_first(self) -> "PowerDelayProfile":
        if len(self) < 2:
            raise ValueError("cannot strip the only path of a profile")
        return PowerDelayProfile(self.powers[1:], self.delays[1:])


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    nlos_probability: float = 0.5
    path_count_range: tuple[int, int] = (4, 10)
    decay_constant: float = 4e-9
    bias_coefficients: tuple[float, float] = (0.5, 0.2)
    bias_noise_std: float = 0.05
    sigma_los: float = 0.05
    sigma_nlos: float = 0.15
    bandwidth_hz: float = 400e6
    rng_seed: int = 0
    distance_range: tuple[float, float] = (5.0, 100.0)
    mean_gap: float = 1.5e-9
    power_jitter_db: float = 2.0
    blocking_range: tuple[float, float] = (0.0, 0.1)

    def validate(self):
        if not self.scenario_id:
            raise ConfigError("scenario_id", "must be non-empty")
        if not 0.0 <= self.nlos_probability <= 1.0:
            raise ConfigError("nlos_probability", "must lie in [0, 1]")
        lo, hi = self.path_count_range
        if int(lo) != lo or int(hi) != hi or lo < 2 or hi < lo:
            raise ConfigError("path_count_range", "need integers with 2 <= min <= max")
        if not self.decay_constant > 0:
            raise ConfigError("decay_constant", "must be positive")
        if len(self.bias_coefficients) != 2 or not all(
            math.isfinite(c) for c in self.bias_coefficients
        ):
            raise ConfigError("bias_coefficients", "need two finite numbers")
        # zero noise is accepted so that noise-free limits can be generated exactly
        for name in ("bias_noise_std", "sigma_los", "sigma_nlos"):
            if not getattr(self, name) >= 0:
                raise ConfigError(name, "must be non-negative")
        if not self.bandwidth_hz > 0:
            raise ConfigError("bandwidth_hz", "must be positive")
        dlo, dhi = self.distance_range
        if not 0 <= dlo <= dhi:
            raise ConfigError("distance_range", "need 0 <= min <= max")
        if not self.mean_gap > 0:
            raise ConfigError("mean_gap", "must be positive")
        if not self.power_jitter_db >= 0:
            raise ConfigError("power_jitter_db", "must be non-negative")
        blo, bhi = self.blocking_range
        if not 0 <= blo <= bhi <= 1:
            raise ConfigError("blocking_range", "need 0 <= min <= max <= 1")
        return self

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RangingSample:
    pdp: PowerDelayProfile
    true_distance_m: float
    estimated_distance_m: float
    delta_d_m: float
    condition: str
    scenario_id: str

    @property
    def is_nlos(self) -> bool:
        return self.condition == NLOS


# ---------------------------------------------------------------------------
# features


def pdp_features(pdp: PowerDelayProfile) -> np.ndarray:
    """Six scalar descriptors of a profile, in ``FEATURE_NAMES`` order.

    Delay statistics are power-weighted moments of the excess delay
    ``tau_k - tau_0``.  The kurtosis is the fourth standardized moment of the
    path power values themselves (0 when all powers are equal).
    """
    p = pdp.powers
    total = float(p.sum())
    excess = pdp.delays - pdp.delays[0]
    if total > 0:
        w = p / total
        mean_excess = float(np.dot(w, excess))
        rms = math.sqrt(max(float(np.dot(w, (excess - mean_excess) ** 2)), 0.0))
        first_ratio = float(p[0] / total)
    else:
        mean_excess = rms = first_ratio = 0.0
    centered = p - p.mean()
    var_p = float(np.mean(centered**2))
    kurt = float(np.mean(centered**4) / var_p**2) if var_p > 0 else 0.0
    return np.array([total, first_ratio, rms, mean_excess, kurt, float(len(p))])


def rms_delay_spread(pdp: PowerDelayProfile) -> float:
    return float(pdp_features(pdp)[2])


def quantization_noise_std(bandwidth_hz: float) -> float:
    """Std (m) of uniform rounding to one delay bin of width ``1/bandwidth``."""
    return (SPEED_OF_LIGHT / bandwidth_hz) / math.sqrt(12.0)


def quantize_delays(pdp: PowerDelayProfile, bandwidth_hz: float) -> PowerDelayProfile:
    """Snap delays down to the ``1/bandwidth`` grid, merging paths per bin."""
    if not bandwidth_hz > 0:
        raise ValueError("bandwidth_hz must be positive")
    width = 1.0 / bandwidth_hz
    # tolerance keeps delays that already sit on the grid from dropping a bin
    bins = np.floor(pdp.delays / width + 1e-9).astype(np.int64)
    uniq, inverse = np.unique(bins, return_inverse=True)
    powers = np.zeros(uniq.size)
    np.add.at(powers, inverse, pdp.powers)
    return PowerDelayProfile(powers, uniq * width)


# ---------------------------------------------------------------------------
# generation


def _bias_rule(alpha, beta, rms, gap):
    return alpha * rms * SPEED_OF_LIGHT + beta * gap * SPEED_OF_LIGHT


def _draw_tail(cfg: ScenarioConfig, rng, n_tail):
    gaps = rng.exponential(cfg.mean_gap, size=n_tail - 1)
    gaps = np.maximum(gaps, 1e-3 * cfg.mean_gap)
    rel = np.concatenate(([0.0], np.cumsum(gaps)))
    jitter_db = rng.normal(0.0, cfg.power_jitter_db, size=n_tail)
    shape = np.exp(-rel / cfg.decay_constant) * 10.0 ** (jitter_db / 10.0)
    return rel, shape


def generate_scenario(config: ScenarioConfig, n_samples: int) -> list[RangingSample]:
    config.validate()
    if int(n_samples) != n_samples or n_samples < 1:
        raise ConfigError("n_samples", "must be a positive integer")
    rng = np.random.default_rng(config.rng_seed)
    return [_draw_sample(config, rng) for _ in range(int(n_samples))]


def _draw_sample(cfg: ScenarioConfig, rng) -> RangingSample:
    alpha, beta = cfg.bias_coefficients
    lo, hi = cfg.path_count_range
    nlos = bool(rng.random() < cfg.nlos_probability)
    d = float(rng.uniform(*cfg.distance_range))
    n_paths = int(rng.integers(lo, hi + 1))
    tail_rel, tail_shape = _draw_tail(cfg, rng, n_paths - 1)
    eps = rng.normal(0.0, cfg.bias_noise_std) if cfg.bias_noise_std > 0 else 0.0
    min_gap = 0.05 * cfg.mean_gap

    if nlos:
        gap0 = max(float(rng.exponential(cfg.mean_gap)), min_gap)
        first_power = float(rng.uniform(*cfg.blocking_range))
    else:
        tail_pdp = PowerDelayProfile(tail_shape, tail_rel)
        tail_gap = tail_rel[1] - tail_rel[0] if tail_rel.size > 1 else 0.0
        spacing = _bias_rule(alpha, beta, rms_delay_spread(tail_pdp), tail_gap) + eps
        gap0 = max(spacing / SPEED_OF_LIGHT, min_gap)
        first_power = 1.0

    rel = np.concatenate(([0.0], gap0 + tail_rel))
    powers = np.concatenate(([first_power], tail_shape * math.exp(-gap0 / cfg.decay_constant)))

    if nlos:
        rel_pdp = PowerDelayProfile(powers, rel)
        bias = _bias_rule(alpha, beta, rms_delay_spread(rel_pdp), gap0) + eps
        noise = rng.normal(0.0, cfg.sigma_nlos) if cfg.sigma_nlos > 0 else 0.0
        d_bar = d + bias + noise
    else:
        noise = rng.normal(0.0, cfg.sigma_los) if cfg.sigma_los > 0 else 0.0
        d_bar = d + noise
    # d_bar can dip below zero only for d ~ 0 with large noise; clamp the profile origin
    tau0 = max(d_bar, 0.0) / SPEED_OF_LIGHT
    pdp = PowerDelayProfile(powers, tau0 + rel)
    return RangingSample(
        pdp=pdp,
        true_distance_m=d,
        estimated_distance_m=float(d_bar),
        delta_d_m=float(d_bar) - d,
        condition=NLOS if nlos else LOS,
        scenario_id=cfg.scenario_id,
    )


def analytic_bias(sample: RangingSample, config: ScenarioConfig) -> float:
    """Noise-free bias the generator attaches to an NLOS sample's profile."""
    if not sample.is_nlos:
        return 0.0
    alpha, beta = config.bias_coefficients
    d = sample.pdp.delays
    return _bias_rule(alpha, beta, rms_delay_spread(sample.pdp), d[1] - d[0])


# ---------------------------------------------------------------------------
# default environments; the last one is held out as the unseen scenario

DEFAULT_SCENARIOS: tuple[ScenarioConfig, ...] = (
    ScenarioConfig("env1", bias_coefficients=(0.3, 0.4), mean_gap=1.2e-9, decay_constant=3e-9, rng_seed=101),
    ScenarioConfig("env2", bias_coefficients=(0.9, 0.5), mean_gap=1.5e-9, decay_constant=4e-9, rng_seed=102),
    ScenarioConfig("env3", bias_coefficients=(0.5, 0.9), mean_gap=1.8e-9, decay_constant=5e-9, rng_seed=103),
    ScenarioConfig("env4", bias_coefficients=(1.1, 1.0), mean_gap=1.0e-9, decay_constant=3.5e-9, rng_seed=104),
    ScenarioConfig("env5", bias_coefficients=(0.6, 0.3), mean_gap=1.6e-9, decay_constant=4.5e-9, rng_seed=105),
    ScenarioConfig("env6", bias_coefficients=(0.95, 0.85), mean_gap=1.4e-9, decay_constant=4e-9, rng_seed=106),
)


def default_scenarios(seed: int | None = None) -> list[ScenarioConfig]:
    """The built-in suite, optionally reseeded (scenario ``i`` gets ``seed + i``)."""
    if seed is None:
        return list(DEFAULT_SCENARIOS)
    return [c.replace(rng_seed=int(seed) * 1000 + i) for i, c in enumerate(DEFAULT_SCENARIOS)]


# ---------------------------------------------------------------------------
# key/value configuration files

_TUPLE_FIELDS = {
    "path_count_range": int,
    "bias_coefficients": float,
    "distance_range": float,
    "blocking_range": float,
}
_SCALAR_FIELDS = {
    "scenario_id": str,
    "nlos_probability": float,
    "decay_constant": float,
    "bias_noise_std": float,
    "sigma_los": float,
    "sigma_nlos": float,
    "bandwidth_hz": float,
    "rng_seed": int,
    "mean_gap": float,
    "power_jitter_db": float,
}


def parse_keyvalue(text: str) -> dict[str, str]:
    """Parse ``name = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'name = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}", "missing field name")
        out[key] = value
    return out


def scenario_from_mapping(values: dict[str, str]) -> ScenarioConfig:
    kwargs = {}
    for key, raw in values.items():
        try:
            if key in _SCALAR_FIELDS:
                kwargs[key] = _SCALAR_FIELDS[key](raw)
            elif key in _TUPLE_FIELDS:
                parts = [p for p in raw.replace(",", " ").split() if p]
                kwargs[key] = tuple(_TUPLE_FIELDS[key](p) for p in parts)
            else:
                raise ConfigError(key, "unknown scenario field")
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(key, f"cannot parse value {raw!r}") from None
    if "scenario_id" not in kwargs:
        raise ConfigError("scenario_id", "required")
    return ScenarioConfig(**kwargs).validate()


def load_scenario_config(path) -> ScenarioConfig:
    with open(path) as fh:
        return scenario_from_mapping(parse_keyvalue(fh.read()))


def summarize(samples: Sequence[RangingSample]) -> dict:
    n = len(samples)
    n_nlos = sum(s.is_nlos for s in samples)
    return {"n": n, "nlos_fraction": n_nlos / n if n else 0.0}
