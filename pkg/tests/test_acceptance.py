"""End-to-end acceptance checks, one test per criterion.

Each test prints a single PASS/FAIL line (shown even under output capture)
before asserting, so ``pytest -v`` output doubles as the acceptance log.
Elapsed times for checks that reuse the cached default training include the
time that training took.
"""

import time

import numpy as np
import pytest

from conftest import TRAIN_SECONDS, UNSEEN, central_difference, default_run, episode_gradient_errors, rel_error, smooth_npr
from nprmitigate import cli, estimator, evaluation, nn, npr, pipeline
from nprmitigate.channel_sim import ScenarioConfig, generate_scenario
from nprmitigate.dataset_io import Dataset, dumps, load, save, split
from test_estimator import mixture_mean_on_grid
from test_evaluation import sort_oracle


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail, elapsed, limit):
        ok = bool(ok) and elapsed < limit
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail} "
                  f"({elapsed:.1f}s, limit {limit:.0f}s)")
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def test_criterion_1_mmse_matches_mixture_integration(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        d_bar, p = rng.uniform(5, 80), rng.uniform(0, 1)
        bias, sigma = rng.uniform(0, 4), rng.uniform(0.05, 1.0)
        worst = max(worst, abs(estimator.mmse_range(d_bar, p, bias) - mixture_mean_on_grid(d_bar, p, bias, sigma)))
    verdict(1, "MMSE vs grid integration", worst < 1e-6, f"max deviation {worst:.2e} m",
            time.perf_counter() - t0, 10)


def _random_net(rng, n_in, n_out):
    depth = int(rng.integers(1, 4))
    sizes = [n_in] + [int(rng.integers(2, 17)) for _ in range(depth - 1)] + [n_out]
    acts = [str(rng.choice(nn.ACTIVATIONS)) for _ in range(depth - 1)] + ["identity"]
    return nn.init_net(sizes, acts, rng)


def _net_loss_error(rng, kind):
    """Worst relative error of parameter gradients for one loss on a random net."""
    n, d = int(rng.integers(2, 7)), int(rng.integers(1, 7))
    k = int(rng.integers(1, 4))
    X = rng.standard_normal((n, d))
    y = rng.standard_normal(n)
    prior_m, prior_v = rng.standard_normal(k), rng.random(k) + 0.5
    net = _random_net(rng, d, {"mse": 1, "nll": 2, "kl": 2 * k}[kind])

    def value_and_upstream(out):
        if kind == "mse":
            loss, g = nn.mse_grad(out[:, 0], y)
            return loss, g[:, None]
        if kind == "nll":
            v = npr.variance_map(out[:, 1])
            loss, dm, dv = nn.gaussian_nll_grad(out[:, 0], v, y)
            return loss, np.column_stack([dm, dv * nn.sigmoid(out[:, 1])])
        m, v = out[:, :k], npr.variance_map(out[:, k:])
        pm, pv = np.broadcast_to(prior_m, m.shape), np.broadcast_to(prior_v, m.shape)
        loss, dm, dv = nn.kl_diag_gaussians_grad(m.ravel(), v.ravel(), pm.ravel(), pv.ravel())
        return loss, np.column_stack([dm.reshape(m.shape), dv.reshape(m.shape) * nn.sigmoid(out[:, k:])])

    out, trace = nn.forward_trace(net, X)
    _, up = value_and_upstream(out)
    grads, _ = nn.backward(net, X, up, trace)
    numeric = central_difference(lambda: value_and_upstream(nn.forward(net, X))[0], net.params())
    return max(np.max(rel_error(a, b)) for a, b in zip(grads, numeric))


def _head_error(rng, seed):
    dec = smooth_npr(seed, hidden=(int(rng.integers(2, 9)),)).decoder
    n = int(rng.integers(2, 7))
    X = rng.standard_normal((n, dec.input_dim))
    ym, yv = rng.standard_normal(n), rng.random(n) + 0.1
    _, grads = npr.head_loss(dec, X, ym, yv)
    numeric = central_difference(lambda: npr.head_loss(dec, X, ym, yv, want_grads=False)[0], dec.params())
    return max(np.max(rel_error(a, b)) for a, b in zip(grads, numeric))


def test_criterion_2_gradients(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(77)
    kinds = ["mse", "nll", "kl", "episode", "head"]
    worst = {k: 0.0 for k in kinds}
    for trial in range(100):
        kind = kinds[trial % 5]
        if kind == "episode":
            model = smooth_npr(trial, max_paths=int(rng.integers(2, 4)), latent_dim=int(rng.integers(1, 4)),
                               hidden=(int(rng.integers(2, 9)),))
            err = episode_gradient_errors(model, rng, kl_weight=float(rng.uniform(0, 0.1)))
        elif kind == "head":
            err = _head_error(rng, trial)
        else:
            err = _net_loss_error(rng, kind)
        worst[kind] = max(worst[kind], err)
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(2, "analytic vs finite-difference gradients (100 trials)", max(worst.values()) < 1e-4,
            "max rel error " + detail, time.perf_counter() - t0, 60)


def test_criterion_3_aggregator_laws(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    perm_err = stream_err = 0.0
    exact = True
    for _ in range(50):
        n, L = int(rng.integers(1, 60)), int(rng.integers(1, 9))
        Z = rng.standard_normal((n, L)) * rng.uniform(0.1, 10)
        a = npr.aggregate(Z)
        b = npr.aggregate(Z[rng.permutation(n)])
        perm_err = max(perm_err, np.abs(a.mu_z - b.mu_z).max(), np.abs(a.var_z - b.var_z).max())
        s = npr.LatentStats.empty(L)
        for z in Z:
            s = npr.aggregate_online(s, z)
        stream_err = max(stream_err, np.abs(s.mu_z - a.mu_z).max(), np.abs(s.var_z - a.var_z).max())
        one = npr.aggregate(Z[:1])
        same = npr.aggregate(np.tile(Z[0], (n, 1)))
        online_one = npr.aggregate_online(npr.LatentStats.empty(L), Z[0])
        exact &= np.array_equal(one.mu_z, Z[0]) and not one.var_z.any() and one.count == 1
        exact &= np.array_equal(same.mu_z, Z[0]) and not same.var_z.any()
        exact &= np.array_equal(online_one.mu_z, Z[0]) and not online_one.var_z.any()
    ok = perm_err <= 1e-12 and stream_err <= 1e-10 and exact
    verdict(3, "aggregator laws", ok,
            f"permutation {perm_err:.1e}, streaming {stream_err:.1e}, degenerate cases exact={exact}",
            time.perf_counter() - t0, 5)


def test_criterion_4_online_update_isolation(verdict, two_scenarios):
    tr, va = split(two_scenarios["a"], 0.8, 0)
    model = npr.build_model(seed=1)
    npr.train_encoder_decoder(model, tr, va, epochs=2, seed=1)
    t0 = time.perf_counter()
    enc, dec = model.encoder.flat_params().copy(), model.decoder.flat_params().copy()
    before = npr.model_to_dict(model)
    stream = generate_scenario(ScenarioConfig("iso", nlos_probability=0.0, rng_seed=4), 1000)
    m, updated = model, 0
    for s in stream:
        m, status = npr.online_update(m, s.pdp, 0.0)
        updated += status == "updated"
    after = npr.model_to_dict(m)
    same = np.array_equal(enc, m.encoder.flat_params()) and np.array_equal(dec, m.decoder.flat_params())
    changed = {k for k in before if before[k] != after[k]}
    ok = same and changed == {"stats"} and updated == 1000
    verdict(4, "online updates leave the networks untouched", ok,
            f"{updated} updates, bit-identical nets={same}, changed fields={sorted(changed)}",
            time.perf_counter() - t0, 30)


def test_criterion_5_cross_scenario_improvement(verdict):
    t0 = time.perf_counter()
    cached = sum(TRAIN_SECONDS.get(seed, 0.0) for seed in range(5))
    rows, passed = [], 0
    for seed in range(5):
        models, train, test = default_run(seed)
        techs = [evaluation.NprTechnique(models.npr_model, models.classifier),
                 evaluation.GprTechnique(models.gpr, models.classifier),
                 evaluation.MlpTechnique(models.mlp, models.classifier)]
        r = evaluation.run_online_eval(techs, models.train_scenarios, UNSEEN, 500, list(train[UNSEEN].samples),
                                       test[UNSEEN].nlos(), models.classifier, timing=False)
        ok = (r["npr"].improvement_vs_baseline >= 0.25 and r["npr"].p50 < r["gpr"].p50
              and r["npr"].p50 < r["mlp"].p50)
        passed += ok
        rows.append(f"seed {seed}: npr {r['npr'].p50:.3f} gpr {r['gpr'].p50:.3f} mlp {r['mlp'].p50:.3f} "
                    f"improvement {r['npr'].improvement_vs_baseline:.1%} {'ok' if ok else 'miss'}")
    verdict(5, "cross-scenario improvement", passed >= 4, f"{passed}/5 seeds; " + "; ".join(rows),
            time.perf_counter() - t0 + cached, 600)


def test_criterion_6_complexity_trends(verdict):
    t0 = time.perf_counter()
    rows = cli.run_bench(npr.build_model(seed=0), repeats=7, seed=0)
    r2 = cli.linear_r2([r["n"] for r in rows], [r["npr_aggregate_s"] for r in rows])
    ratios = {b["n"]: b["gpr_fit_s"] / a["gpr_fit_s"] for a, b in zip(rows, rows[1:]) if a["n"] >= 400}
    ok = r2 > 0.9 and all(v >= 4 for v in ratios.values())
    detail = f"aggregation R^2 {r2:.3f}; GP fit ratios " + ", ".join(f"{n // 2}->{n}: {v:.2f}" for n, v in ratios.items())
    verdict(6, "complexity trends", ok, detail, time.perf_counter() - t0, 300)


def test_criterion_7_calibration(verdict):
    models, train, test = default_run(0)
    t0 = time.perf_counter()
    known = {k: train[k] for k in models.train_scenarios}
    tech = evaluation.NprTechnique(models.npr_model, models.classifier,
                                   stats_by_scenario=pipeline.scenario_stats(models.npr_model, known))
    samples = [s for k in models.train_scenarios for s in test[k].nlos().samples]
    mean, var = tech.predict_distribution(samples)
    y = np.array([s.delta_d_m for s in samples])
    coverage = float(np.mean(np.abs(y - mean) <= np.sqrt(var)))
    verdict(7, "one-sigma coverage in distribution", 0.58 <= coverage <= 0.78,
            f"coverage {coverage:.3f} over {len(y)} samples", time.perf_counter() - t0 + TRAIN_SECONDS[0], 120)


def test_criterion_8_training_convergence(verdict):
    models = default_run(0)[0]
    t0 = time.perf_counter()
    t1 = models.traces["encoder_decoder"]
    first, best = t1["train"][0], t1["train"][t1["best_epoch"]]
    drop = 1.0 - best / first
    head = np.asarray(models.traces["head"]["train"])
    windows = [head[i : i + 50].mean() for i in range(0, len(head) - 49, 50)]
    ok = drop >= 0.5 and all(b <= a for a, b in zip(windows, windows[1:]))
    verdict(8, "training convergence", ok,
            f"objective {first:.3f} -> {best:.3f} at epoch {t1['best_epoch'] + 1} ({drop:.0%} drop); "
            f"head windows " + ", ".join(f"{w:.4f}" for w in windows),
            time.perf_counter() - t0 + TRAIN_SECONDS[0], 300)


def test_criterion_9_plumbing(verdict, tmp_path):
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    pct_err = 0.0
    for _ in range(20):
        x = rng.standard_normal(int(rng.integers(1, 1000))) * rng.uniform(0.01, 100)
        for q in rng.uniform(0.001, 0.999, 5):
            pct_err = max(pct_err, abs(evaluation.percentile(x, q) - sort_oracle(x, q)))
    ds = Dataset(tuple(generate_scenario(ScenarioConfig("rt", rng_seed=9), 500))).fit_normalization()
    save(ds, tmp_path / "d.jsonl")
    back = load(tmp_path / "d.jsonl")
    roundtrip = back.samples == ds.samples and back.normalization == ds.normalization and dumps(back) == dumps(ds)
    partition = True
    for seed in range(20):
        f = rng.uniform(0.1, 0.9)
        a, b = split(ds, f, seed)
        ids_a, ids_b = {id(s) for s in a}, {id(s) for s in b}
        partition &= not ids_a & ids_b and ids_a | ids_b == {id(s) for s in ds} and len(a) == int(len(ds) * f)
    ok = pct_err <= 1e-12 and roundtrip and partition
    verdict(9, "percentile and dataset plumbing", ok,
            f"percentile error {pct_err:.1e}, round-trip identical={roundtrip}, split partitions={partition}",
            time.perf_counter() - t0, 10)
