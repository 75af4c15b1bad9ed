"""Shared experiment plumbing: seeding, per-scenario splits, training every model."""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import baselines, npr
from .channel_sim import ScenarioConfig, generate_scenario
from .dataset_io import Dataset, concat, split
from .estimator import NlosClassifier, train_classifier

TRAIN_FRACTION = 0.8


def subseed(seed: int, name: str) -> int:
    """Deterministic per-subsystem seed derived from the global one."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(zlib.crc32(name.encode()),))
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def generate(configs: list[ScenarioConfig], n_samples: int) -> dict[str, Dataset]:
    return {c.scenario_id: Dataset(tuple(generate_scenario(c, n_samples))) for c in configs}


def split_all(datasets: dict[str, Dataset], seed: int, fraction: float = TRAIN_FRACTION):
    """Per-scenario train/test partition; returns two dicts keyed by scenario id."""
    train, test = {}, {}
    for sid, ds in datasets.items():
        train[sid], test[sid] = split(ds, fraction, subseed(seed, "split/" + sid))
    return train, test


@dataclass
class TrainSettings:
    epochs: int = 300
    head_epochs: int = 150
    mlp_epochs: int = 60
    gpr_points: int = 800
    n_z_samples: int = 64


@dataclass
class TrainedModels:
    npr_model: npr.NprModel
    classifier: NlosClassifier
    gpr: baselines.GprModel | None
    mlp: baselines.FrozenMlp | None
    train_scenarios: tuple
    traces: dict = field(default_factory=dict)


def train_all(train_by_scenario: dict[str, Dataset], seed: int, settings: TrainSettings | None = None,
              baselines_too: bool = True) -> TrainedModels:
    """Classifier, both NPR phases and (optionally) the GP and MLP baselines."""
    settings = settings or TrainSettings()
    pooled = concat(list(train_by_scenario.values()))
    fit, val = split(pooled, TRAIN_FRACTION, subseed(seed, "val"))
    clf = train_classifier(pooled, seed=subseed(seed, "classifier"))

    model = npr.build_model(seed=subseed(seed, "npr/init"))
    tr1 = npr.train_encoder_decoder(model, fit, val, epochs=settings.epochs,
                                    seed=subseed(seed, "npr/phase1"))
    tr2 = npr.train_decoder_head(model, fit, n_z_samples=settings.n_z_samples,
                                 epochs=settings.head_epochs, seed=subseed(seed, "npr/phase2"))
    # deployable default: stats over every training scenario
    model.stats = npr.context_stats(model, pooled.nlos())
    traces = {"encoder_decoder": tr1, "head": tr2}

    gpr = mlp = None
    if baselines_too:
        gpr, table = baselines.gpr_select(fit, val, max_points=settings.gpr_points,
                                          seed=subseed(seed, "gpr"))
        mlp = baselines.mlp_fit(fit, epochs=settings.mlp_epochs, seed=subseed(seed, "mlp"))
        traces["mlp"] = mlp.trace
        traces["gpr_grid"] = [
            {"length_scale": h.length_scale, "signal_variance": h.signal_variance,
             "noise_variance": h.noise_variance, "val_nll": s}
            for h, s in table
        ]
    return TrainedModels(model, clf, gpr, mlp, tuple(sorted(train_by_scenario)), traces)


def scenario_stats(model: npr.NprModel, train_by_scenario: dict[str, Dataset]) -> dict:
    """Latent stats of each training scenario, for in-distribution evaluation."""
    return {sid: npr.context_stats(model, ds.nlos()) for sid, ds in train_by_scenario.items()}
