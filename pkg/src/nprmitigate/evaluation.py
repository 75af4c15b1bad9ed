"""Error statistics, mitigation techniques and the offline/online evaluation runs."""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import baselines, npr
from .channel_sim import RangingSample
from .dataset_io import Dataset, DatasetError
from .estimator import NlosClassifier, classify_nlos, mmse_range

N_CDF_POINTS = 200
N_TIMING_CALLS = 100
N_WARMUP_CALLS = 10


class ProtocolError(ValueError):
    pass


class StateError(RuntimeError):
    pass


def _interp_sorted(x, q):
    pos = q * (x.size - 1)
    lo = int(np.floor(pos))
    hi = min(lo + 1, x.size - 1)
    frac = pos - lo
    return float(x[lo] + (x[hi] - x[lo]) * frac)


def percentile(errors, q: float) -> float:
    """Linear interpolation between order statistics of ``|errors|``."""
    x = np.sort(np.abs(np.asarray(errors, dtype=np.float64)).ravel())
    if x.size == 0:
        raise ValueError("percentile of an empty sequence")
    if not 0.0 < q < 1.0:
        raise ValueError("q must lie strictly between 0 and 1")
    return _interp_sorted(x, q)


def cdf_curve(errors, n_points: int = N_CDF_POINTS):
    """``(quantile, error)`` pairs at evenly spaced quantiles in [0, 1]."""
    x = np.sort(np.abs(np.asarray(errors, dtype=np.float64)).ravel())
    if x.size == 0:
        raise ValueError("cdf of an empty sequence")
    qs = np.linspace(0.0, 1.0, n_points)
    return [(float(q), _interp_sorted(x, q)) for q in qs]


@dataclass
class EvalReport:
    technique: str
    errors: np.ndarray
    p10: float
    p50: float
    p90: float
    online_time_ms: float
    improvement_vs_baseline: float
    train_scenarios: tuple
    test_scenario: str
    cdf: list = field(default_factory=list)
    prediction_time_ms: float = 0.0
    adaptation_time_ms: float = 0.0
    adaptation_updates: int = 0
    notes: str = ""

    def __post_init__(self):
        if not self.p10 <= self.p50 <= self.p90:
            raise ValueError("percentiles out of order")
        if np.any(self.errors < 0) or self.online_time_ms < 0:
            raise ValueError("errors and times must be non-negative")

    def summary(self) -> dict:
        return {
            "technique": self.technique,
            "p10_m": self.p10,
            "p50_m": self.p50,
            "p90_m": self.p90,
            "online_time_ms": self.online_time_ms,
            "prediction_time_ms": self.prediction_time_ms,
            "adaptation_time_ms": self.adaptation_time_ms,
            "adaptation_updates": self.adaptation_updates,
            "improvement_vs_baseline": self.improvement_vs_baseline,
            "train_scenarios": ";".join(self.train_scenarios),
            "test_scenario": self.test_scenario,
            "n_samples": int(self.errors.size),
        }

    def to_dict(self) -> dict:
        d = self.summary()
        d["train_scenarios"] = list(self.train_scenarios)
        d["errors_m"] = self.errors.tolist()
        d["cdf"] = [list(p) for p in self.cdf]
        d["notes"] = self.notes
        return d


# ---------------------------------------------------------------------------
# techniques
#
# Each technique turns samples into (p_nlos, mean_bias) arrays.  ``adapt``
# returns a new technique and never mutates the receiver.


class Technique:
    name = "technique"
    trained = True
    notes = ""

    def bias_and_p(self, samples: Sequence[RangingSample]):
        raise NotImplementedError

    def adapt(self, stream: Sequence[RangingSample]) -> tuple["Technique", int]:
        return self, 0

    def estimate(self, samples: Sequence[RangingSample]) -> np.ndarray:
        bias, p = self.bias_and_p(samples)
        d_bar = np.array([s.estimated_distance_m for s in samples])
        return mmse_range(d_bar, p, bias)


class IdentityTechnique(Technique):
    name = "identity"

    def bias_and_p(self, samples):
        return np.zeros(len(samples)), np.zeros(len(samples))


class OracleTechnique(Technique):
    """True bias with certainty; a lower bound, not a competitor."""

    name = "oracle"

    def bias_and_p(self, samples):
        return np.array([s.delta_d_m for s in samples]), np.ones(len(samples))


class _ClassifiedTechnique(Technique):
    def __init__(self, classifier: NlosClassifier | None):
        self.classifier = classifier

    @property
    def trained(self):
        return self.classifier is not None and self.classifier.trained and self._model_ready()

    def _model_ready(self):
        return True

    def _p(self, samples):
        return np.asarray(classify_nlos(self.classifier, [s.pdp for s in samples]))


class NprTechnique(_ClassifiedTechnique):
    name = "npr"

    def __init__(self, model: npr.NprModel, classifier, threshold: float | None = None,
                 stats_by_scenario: dict | None = None):
        super().__init__(classifier)
        self.model = model
        self.threshold = model.config.threshold if threshold is None else threshold
        self.stats_by_scenario = stats_by_scenario or {}

    def _model_ready(self):
        return "encoder" in self.model.phases

    def bias_and_p(self, samples):
        bias = np.empty(len(samples))
        groups: dict = {}
        for i, s in enumerate(samples):
            groups.setdefault(s.scenario_id, []).append(i)
        for sid, idx in groups.items():
            stats = self.stats_by_scenario.get(sid, self.model.stats)
            mean, _ = npr.predict_many(self.model, [samples[i].pdp for i in idx], stats)
            bias[idx] = mean
        return bias, self._p(samples)

    def predict_distribution(self, samples):
        """Mean and variance of the bias for each sample."""
        mean = np.empty(len(samples))
        var = np.empty(len(samples))
        for sid in {s.scenario_id for s in samples}:
            idx = [i for i, s in enumerate(samples) if s.scenario_id == sid]
            stats = self.stats_by_scenario.get(sid, self.model.stats)
            m, v = npr.predict_many(self.model, [samples[i].pdp for i in idx], stats)
            mean[idx], var[idx] = m, v
        return mean, var

    def adapt(self, stream):
        if not stream:
            return self, 0
        model = self.model.reset_stats()
        p = self._p(stream)
        accepted = 0
        for s, pn in zip(stream, p):
            model, status = npr.online_update(model, s.pdp, float(pn), self.threshold)
            accepted += status == "updated"
        return NprTechnique(model, self.classifier, self.threshold), accepted


class GprTechnique(_ClassifiedTechnique):
    name = "gpr"

    def __init__(self, model: baselines.GprModel | None, classifier):
        super().__init__(classifier)
        self.model = model

    def _model_ready(self):
        return self.model is not None

    def bias_and_p(self, samples):
        mean, _ = baselines.gpr_predict(self.model, list(samples))
        return np.asarray(mean), self._p(samples)


class MlpTechnique(_ClassifiedTechnique):
    name = "mlp"

    def __init__(self, model: baselines.FrozenMlp | None, classifier):
        super().__init__(classifier)
        self.model = model

    def _model_ready(self):
        return self.model is not None

    def bias_and_p(self, samples):
        return np.asarray(baselines.mlp_predict(self.model, [s.pdp for s in samples])), self._p(samples)


class RetrainedMlpTechnique(MlpTechnique):
    """Frozen net fine-tuned on labeled NLOS samples from the new scenario."""

    name = "mlp-retrained"

    def __init__(self, model, classifier, epochs: int = 50, seed: int = 0):
        super().__init__(model, classifier)
        self.epochs = epochs
        self.seed = seed
        self.notes = f"fine-tuned for {epochs} epochs on labeled NLOS stream samples"

    def adapt(self, stream):
        labeled = Dataset(tuple(stream), 2 * self.model.max_paths).nlos()
        if len(labeled) == 0:
            return self, 0
        tuned = baselines.mlp_retrain(self.model, labeled, epochs=self.epochs, seed=self.seed)
        out = RetrainedMlpTechnique(tuned, self.classifier, self.epochs, self.seed)
        return out, len(labeled)


# ---------------------------------------------------------------------------
# runs


def _samples_of(test) -> list:
    samples = list(test.samples if isinstance(test, Dataset) else test)
    if not samples:
        raise DatasetError("empty test split")
    return samples


def time_single_predictions(technique: Technique, samples, n_calls: int = N_TIMING_CALLS,
                            n_warmup: int = N_WARMUP_CALLS) -> float:
    """Median wall-clock milliseconds of one end-to-end range estimate."""
    times = []
    for k in range(n_warmup + n_calls):
        s = [samples[k % len(samples)]]
        t0 = time.perf_counter()
        technique.estimate(s)
        dt = time.perf_counter() - t0
        if k >= n_warmup:
            times.append(dt)
    return float(np.median(times) * 1e3)


def _report(technique, samples, train_scenarios, test_scenario, timing, adapt_ms=0.0, updates=0):
    d_true = np.array([s.true_distance_m for s in samples])
    d_bar = np.array([s.estimated_distance_m for s in samples])
    errors = np.abs(technique.estimate(samples) - d_true)
    raw_p50 = percentile(np.abs(d_bar - d_true), 0.5)
    p50 = percentile(errors, 0.5)
    pred_ms = time_single_predictions(technique, samples) if timing else 0.0
    online_ms = pred_ms + adapt_ms / len(samples)
    return EvalReport(
        technique=technique.name,
        errors=errors,
        p10=percentile(errors, 0.1),
        p50=p50,
        p90=percentile(errors, 0.9),
        online_time_ms=online_ms,
        improvement_vs_baseline=(1.0 - p50 / raw_p50) if raw_p50 > 0 else 0.0,
        train_scenarios=tuple(train_scenarios),
        test_scenario=test_scenario,
        cdf=cdf_curve(errors),
        prediction_time_ms=pred_ms,
        adaptation_time_ms=adapt_ms,
        adaptation_updates=updates,
        notes=technique.notes,
    )


def _check_trained(techniques):
    bad = [t.name for t in techniques if not t.trained]
    if bad:
        raise StateError("untrained technique(s): " + ", ".join(bad))


def run_offline_eval(techniques: Sequence[Technique], train_scenarios: Sequence[str], test_split,
                     timing: bool = True, train_split=None) -> dict[str, EvalReport]:
    """Evaluate trained techniques on held-out samples from known scenarios."""
    _check_trained(techniques)
    samples = _samples_of(test_split)
    if train_split is not None:
        seen = {id(s) for s in train_split}
        if any(id(s) in seen for s in samples):
            raise ProtocolError("test split overlaps the training data")
    test_id = ",".join(sorted({s.scenario_id for s in samples}))
    return {t.name: _report(t, samples, train_scenarios, test_id, timing) for t in techniques}


def gated_prefix(stream: Sequence[RangingSample], classifier: NlosClassifier, threshold: float,
                 n_accepted: int) -> list:
    """Shortest prefix holding ``n_accepted`` LOS-gated multi-path profiles."""
    if n_accepted <= 0:
        return []
    p = classify_nlos(classifier, [s.pdp for s in stream])
    count = 0
    for i, (s, pn) in enumerate(zip(stream, p)):
        count += pn < threshold and len(s.pdp) >= 2
        if count == n_accepted:
            return list(stream[: i + 1])
    raise ProtocolError(f"stream holds only {count} LOS-gated samples, {n_accepted} requested")


def run_online_eval(techniques: Sequence[Technique], train_scenarios: Sequence[str], unseen_scenario: str,
                    adaptation_stream_size: int, stream: Sequence[RangingSample], test_split,
                    classifier: NlosClassifier, threshold: float = 0.2,
                    timing: bool = True) -> dict[str, EvalReport]:
    """Adapt on a stream from an unseen scenario, then evaluate on its test split.

    ``adaptation_stream_size`` counts accepted (LOS-gated) updates; every
    technique sees the same stream prefix.
    """
    if unseen_scenario in set(train_scenarios):
        raise ProtocolError(f"scenario {unseen_scenario!r} was used for training")
    _check_trained(techniques)
    samples = _samples_of(test_split)
    for s in list(samples) + list(stream):
        if s.scenario_id != unseen_scenario:
            raise ProtocolError(f"sample from {s.scenario_id!r} in the {unseen_scenario!r} run")
    prefix = gated_prefix(stream, classifier, threshold, adaptation_stream_size)
    reports = {}
    for t in techniques:
        t0 = time.perf_counter()
        adapted, updates = t.adapt(prefix)
        adapt_ms = (time.perf_counter() - t0) * 1e3
        reports[t.name] = _report(adapted, samples, train_scenarios, unseen_scenario, timing,
                                  adapt_ms, updates)
    return reports


# ---------------------------------------------------------------------------
# output


def write_reports(reports: dict[str, EvalReport], out_dir, prefix: str = "eval") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    json_path = out / f"{prefix}.json"
    with open(json_path, "w") as fh:
        json.dump({name: r.to_dict() for name, r in reports.items()}, fh, indent=1)
    rows = [r.summary() for r in reports.values()]
    csv_path = out / f"{prefix}_summary.csv"
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    cdf_path = out / f"{prefix}_cdf.csv"
    with open(cdf_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["technique", "quantile", "error_m"])
        for r in reports.values():
            for q, e in r.cdf:
                w.writerow([r.technique, repr(q), repr(e)])
    return [json_path, csv_path, cdf_path]
