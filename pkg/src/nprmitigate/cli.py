"""``nprmitigate`` command line: gen, train, adapt, eval, bench.

Settings come from an optional ``name = value`` config file; command-line
flags override it.  Outputs live under ``<out>/datasets``,
``<out>/checkpoints`` and ``<out>/reports``.

Exit codes: 0 success, 2 config/usage error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import baselines, evaluation, npr, pipeline
from .channel_sim import ConfigError, default_scenarios, load_scenario_config, parse_keyvalue, summarize
from .dataset_io import Dataset, DatasetError, concat
from .dataset_io import load as load_dataset
from .dataset_io import save as save_dataset
from .estimator import NlosClassifier

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
TECHNIQUES = ("npr", "gpr", "mlp", "mlp-retrained", "identity")
BENCH_GRID = (100, 200, 400, 800, 1600)


class MissingArtifact(FileNotFoundError):
    pass


@dataclass
class RunConfig:
    command: str
    seed: int | None = None
    out: Path = Path("run")
    scenarios: list = field(default_factory=list)
    scenario_files: list = field(default_factory=list)
    n_samples: int = 2000
    epochs: int = 300
    head_epochs: int = 150
    mlp_epochs: int = 60
    retrain_epochs: int = 50
    gpr_points: int = 800
    technique: list = field(default_factory=list)
    adapt_size: int = 500
    threshold: float = 0.2
    test_subset: str = "nlos"
    bench_repeats: int = 7

    @property
    def datasets_dir(self):
        return self.out / "datasets"

    @property
    def checkpoints_dir(self):
        return self.out / "checkpoints"

    @property
    def reports_dir(self):
        return self.out / "reports"


_INT_KEYS = {"seed", "n_samples", "epochs", "head_epochs", "mlp_epochs", "retrain_epochs",
             "gpr_points", "adapt_size", "bench_repeats"}
_LIST_KEYS = {"scenarios", "scenario_files", "technique"}


def _split_list(raw) -> list[str]:
    return [p for p in str(raw).replace(",", " ").split() if p]


def _coerce(key, raw):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key == "threshold":
            return float(raw)
        if key == "out":
            return Path(raw)
        if key in _LIST_KEYS:
            return _split_list(raw)
        if key == "test_subset":
            if raw not in ("nlos", "all"):
                raise ValueError(raw)
            return raw
    except ValueError:
        raise ConfigError(key, f"cannot parse value {raw!r}") from None
    raise ConfigError(key, "unknown setting")


def build_config(args) -> RunConfig:
    cfg = RunConfig(command=args.command)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"no such file: {path}")
        for key, raw in parse_keyvalue(path.read_text()).items():
            setattr(cfg, key, _coerce(key, raw))
        # relative scenario files resolve against the config's directory
        cfg.scenario_files = [str(path.parent / f) for f in cfg.scenario_files]
    for key in ("seed", "out", "epochs", "adapt_size", "threshold"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, Path(val) if key == "out" else val)
    if getattr(args, "scenarios", None):
        cfg.scenarios = _split_list(args.scenarios)
    if getattr(args, "technique", None):
        cfg.technique = list(args.technique)
    bad = [t for t in cfg.technique if t not in TECHNIQUES]
    if bad:
        raise ConfigError("technique", f"unknown technique(s) {bad}")
    if cfg.command in ("gen", "train") and cfg.seed is None:
        raise ConfigError("seed", f"'{cfg.command}' needs a seed")
    if cfg.seed is not None and not 0 <= cfg.seed < 2**64:
        raise ConfigError("seed", "must be an unsigned 64-bit integer")
    if cfg.epochs < 1 or cfg.n_samples < 1 or cfg.adapt_size < 0:
        raise ConfigError("epochs/n_samples/adapt_size", "out of range")
    if not 0.0 < cfg.threshold <= 1.0:
        raise ConfigError("threshold", "must lie in (0, 1]")
    return cfg


# ---------------------------------------------------------------------------
# artifacts


def _read_json(path: Path) -> dict:
    if not path.is_file():
        raise MissingArtifact(f"missing artifact: {path}")
    with open(path) as fh:
        return json.load(fh)


def _write_json(obj, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1)


def _load_datasets(cfg: RunConfig, ids) -> dict[str, Dataset]:
    out = {}
    for sid in ids:
        path = cfg.datasets_dir / f"{sid}.jsonl"
        if not path.is_file():
            raise MissingArtifact(f"missing dataset: {path} (run 'gen' first)")
        out[sid] = load_dataset(path)
    return out


def _manifest(cfg: RunConfig) -> dict:
    return _read_json(cfg.checkpoints_dir / "manifest.json")


def _load_models(cfg: RunConfig):
    ck = cfg.checkpoints_dir
    model = npr.model_from_dict(_read_json(ck / "npr.json"))
    clf = NlosClassifier.from_dict(_read_json(ck / "classifier.json"))
    gpr = baselines.gpr_from_dict(_read_json(ck / "gpr.json")) if (ck / "gpr.json").is_file() else None
    mlp = baselines.mlp_from_dict(_read_json(ck / "mlp.json")) if (ck / "mlp.json").is_file() else None
    return model, clf, gpr, mlp


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: RunConfig) -> int:
    configs = [load_scenario_config(p) for p in cfg.scenario_files]
    if not configs:
        configs = default_scenarios(cfg.seed)
        if cfg.scenarios:
            known = {c.scenario_id: c for c in configs}
            unknown = [s for s in cfg.scenarios if s not in known]
            if unknown:
                raise ConfigError("scenarios", f"unknown default scenario(s) {unknown}")
            configs = [known[s] for s in cfg.scenarios]
    cfg.datasets_dir.mkdir(parents=True, exist_ok=True)
    for c in configs:
        ds = pipeline.generate([c], cfg.n_samples)[c.scenario_id]
        save_dataset(ds, cfg.datasets_dir / f"{c.scenario_id}.jsonl")
        info = summarize(ds.samples)
        print(f"{c.scenario_id}: n={info['n']} nlos_fraction={info['nlos_fraction']:.4f}")
    return EXIT_OK


def cmd_train(cfg: RunConfig) -> int:
    ids = cfg.scenarios or ["env1", "env2", "env3", "env4", "env5"]
    train, _ = pipeline.split_all(_load_datasets(cfg, ids), cfg.seed)
    settings = pipeline.TrainSettings(cfg.epochs, cfg.head_epochs, cfg.mlp_epochs, cfg.gpr_points)
    models = pipeline.train_all(train, cfg.seed, settings)
    ck = cfg.checkpoints_dir
    _write_json(npr.model_to_dict(models.npr_model), ck / "npr.json")
    _write_json(models.classifier.to_dict(), ck / "classifier.json")
    _write_json(baselines.gpr_to_dict(models.gpr), ck / "gpr.json")
    _write_json(baselines.mlp_to_dict(models.mlp), ck / "mlp.json")
    _write_json({"seed": cfg.seed, "train_scenarios": list(models.train_scenarios),
                 "settings": asdict(settings)}, ck / "manifest.json")
    _write_json(models.traces, cfg.reports_dir / "train_trace.json")
    t1 = models.traces["encoder_decoder"]["train"]
    print(f"encoder/decoder objective {t1[0]:.4f} -> {min(t1):.4f} over {len(t1)} epochs")
    print(f"head loss {models.traces['head']['train'][-1]:.4f}; gpr {models.gpr.hyper}")
    return EXIT_OK


def _unseen_run(cfg: RunConfig, sid: str):
    manifest = _manifest(cfg)
    if sid in manifest["train_scenarios"]:
        raise evaluation.ProtocolError(f"scenario {sid!r} was used for training")
    seed = manifest["seed"] if cfg.seed is None else cfg.seed
    stream, test = pipeline.split_all(_load_datasets(cfg, [sid]), seed)
    return manifest, stream[sid], test[sid]


def cmd_adapt(cfg: RunConfig) -> int:
    if len(cfg.scenarios) != 1:
        raise ConfigError("scenarios", "adapt takes exactly one scenario")
    sid = cfg.scenarios[0]
    model, clf, _, _ = _load_models(cfg)
    _, stream, _ = _unseen_run(cfg, sid)
    prefix = evaluation.gated_prefix(list(stream.samples), clf, cfg.threshold, cfg.adapt_size)
    tech = evaluation.NprTechnique(model, clf, cfg.threshold)
    adapted, n = tech.adapt(prefix)
    path = cfg.checkpoints_dir / f"npr_adapted_{sid}.json"
    _write_json(npr.model_to_dict(adapted.model), path)
    print(f"{sid}: {n} online updates from {len(prefix)} streamed samples -> {path}")
    return EXIT_OK


def _techniques(cfg, names, model, clf, gpr, mlp, stats_by_scenario=None):
    out = []
    for name in names:
        if name == "identity":
            out.append(evaluation.IdentityTechnique())
        elif name == "npr":
            out.append(evaluation.NprTechnique(model, clf, cfg.threshold, stats_by_scenario))
        elif name == "gpr":
            out.append(evaluation.GprTechnique(gpr, clf))
        elif name == "mlp":
            out.append(evaluation.MlpTechnique(mlp, clf))
        elif name == "mlp-retrained":
            out.append(evaluation.RetrainedMlpTechnique(mlp, clf, cfg.retrain_epochs,
                                                        pipeline.subseed(cfg.seed or 0, "retrain")))
    return out


def _subset(cfg, ds: Dataset) -> Dataset:
    return ds.nlos() if cfg.test_subset == "nlos" else ds


def cmd_eval(cfg: RunConfig) -> int:
    names = cfg.technique or ["identity", "npr", "gpr", "mlp"]
    manifest = _manifest(cfg)
    train_ids = manifest["train_scenarios"]
    ids = cfg.scenarios or train_ids
    needs_models = any(n != "identity" for n in names)
    model = clf = gpr = mlp = None
    if needs_models:
        model, clf, gpr, mlp = _load_models(cfg)
    seed = manifest["seed"] if cfg.seed is None else cfg.seed
    known = [s for s in ids if s in train_ids]
    unseen = [s for s in ids if s not in train_ids]
    written = []
    if known:
        if "mlp-retrained" in names:
            raise ConfigError("technique", "mlp-retrained only applies to unseen scenarios")
        train, test = pipeline.split_all(_load_datasets(cfg, known), seed)
        stats = pipeline.scenario_stats(model, train) if "npr" in names else None
        techs = _techniques(cfg, names, model, clf, gpr, mlp, stats)
        split = concat([_subset(cfg, test[s]) for s in known])
        reports = evaluation.run_offline_eval(techs, train_ids, split)
        written += evaluation.write_reports(reports, cfg.reports_dir, "offline_" + "_".join(known))
        _print_reports(reports)
    for sid in unseen:
        _, stream, test = _unseen_run(cfg, sid)
        techs = _techniques(cfg, names, model, clf, gpr, mlp)
        gate = clf or NlosClassifier.zeros()
        reports = evaluation.run_online_eval(techs, train_ids, sid, cfg.adapt_size if needs_models else 0,
                                             list(stream.samples), _subset(cfg, test), gate, cfg.threshold)
        written += evaluation.write_reports(reports, cfg.reports_dir, f"online_{sid}")
        _print_reports(reports)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def _print_reports(reports):
    for r in reports.values():
        print(f"{r.test_scenario:>12} {r.technique:>14}  p10={r.p10:.4f} p50={r.p50:.4f} p90={r.p90:.4f} "
              f"T_on={r.online_time_ms:.3f}ms improvement={r.improvement_vs_baseline:+.3f}")


def _median_time(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


def linear_r2(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    ss_tot = float(((y - y.mean()) ** 2).sum())
    return 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0


def run_bench(model: npr.NprModel, grid=BENCH_GRID, repeats: int = 7, seed: int = 0) -> list[dict]:
    """Median seconds for context aggregation and for a GP fit at each size."""
    rng = np.random.default_rng(seed)
    rows = []
    with threadpool_limits(limits=1):
        for n in grid:
            R = rng.random((n, model.config.feature_dim))
            dd = rng.random(n)
            X = rng.standard_normal((n, 6))
            y = rng.standard_normal(n)
            hyper = baselines.GprHyperparams(1.0, 1.0, 0.01)
            agg = _median_time(lambda: npr.aggregate(npr.encode_context(model, R, dd)), repeats)
            fit = _median_time(lambda: baselines.gpr_fit_arrays(X, y, hyper), repeats)
            rows.append({"n": n, "npr_aggregate_s": agg, "gpr_fit_s": fit})
    return rows


def cmd_bench(cfg: RunConfig) -> int:
    path = cfg.checkpoints_dir / "npr.json"
    model = npr.load_model(path) if path.is_file() else npr.build_model(seed=cfg.seed or 0)
    rows = run_bench(model, repeats=cfg.bench_repeats, seed=cfg.seed or 0)
    cfg.reports_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.reports_dir / "scaling.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    ns = [r["n"] for r in rows]
    r2 = linear_r2(ns, [r["npr_aggregate_s"] for r in rows])
    ratios = {f"{a['n']}->{b['n']}": b["gpr_fit_s"] / a["gpr_fit_s"] for a, b in zip(rows, rows[1:])}
    _write_json({"npr_linear_r2": r2, "gpr_fit_ratios": ratios, "rows": rows},
                cfg.reports_dir / "scaling.json")
    for r in rows:
        print(f"N={r['n']:5d}  aggregate={r['npr_aggregate_s'] * 1e3:8.3f} ms  gpr_fit={r['gpr_fit_s'] * 1e3:9.2f} ms")
    print(f"aggregate linear fit R^2 = {r2:.4f}; gpr ratios " +
          ", ".join(f"{k}: {v:.2f}" for k, v in ratios.items()))
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "adapt": cmd_adapt, "eval": cmd_eval, "bench": cmd_bench}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nprmitigate", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--scenarios", help="comma-separated scenario ids")
        p.add_argument("--epochs", type=int)
        p.add_argument("--technique", action="append", choices=TECHNIQUES)
        p.add_argument("--adapt-size", dest="adapt_size", type=int)
        p.add_argument("--threshold", type=float)
    return parser


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = build_config(args)
        return COMMANDS[cfg.command](cfg)
    except (ConfigError, evaluation.ProtocolError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
