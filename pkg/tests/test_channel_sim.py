import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_pdp
from nprmitigate.channel_sim import (
    LOS,
    NLOS,
    SPEED_OF_LIGHT,
    ConfigError,
    PowerDelayProfile,
    ScenarioConfig,
    analytic_bias,
    default_scenarios,
    generate_scenario,
    load_scenario_config,
    parse_keyvalue,
    pdp_features,
    quantization_noise_std,
    quantize_delays,
    summarize,
)

C = SPEED_OF_LIGHT


def test_profile_validation():
    with pytest.raises(ValueError):
        PowerDelayProfile([1.0, 0.5], [1e-9])
    with pytest.raises(ValueError):
        PowerDelayProfile([1.0, 0.5], [2e-9, 1e-9])
    with pytest.raises(ValueError):
        PowerDelayProfile([1.0, -0.5], [1e-9, 2e-9])
    with pytest.raises(ValueError):
        PowerDelayProfile([], [])


def test_strip_first():
    p = PowerDelayProfile([0.1, 1.0, 0.5], [1e-9, 2e-9, 4e-9])
    q = p.strip_first()
    assert np.array_equal(q.powers, [1.0, 0.5]) and np.array_equal(q.delays, [2e-9, 4e-9])


def test_config_errors():
    with pytest.raises(ConfigError):
        ScenarioConfig("x", nlos_probability=1.5).validate()
    with pytest.raises(ConfigError):
        ScenarioConfig("x", path_count_range=(1, 4)).validate()
    with pytest.raises(ConfigError):
        generate_scenario(ScenarioConfig("x"), 0)


def test_all_los_noise_level():
    cfg = ScenarioConfig("los", nlos_probability=0.0, rng_seed=3)
    samples = generate_scenario(cfg, 10_000)
    assert all(s.condition == LOS for s in samples)
    dd = np.array([s.delta_d_m for s in samples])
    assert abs(dd.mean()) < 4 * cfg.sigma_los / math.sqrt(dd.size)
    assert dd.std() == pytest.approx(cfg.sigma_los, rel=0.05)


def test_noise_free_nlos_bias_is_the_rule():
    cfg = ScenarioConfig("nf", nlos_probability=1.0, bias_noise_std=0.0, sigma_nlos=0.0, rng_seed=5)
    alpha, beta = cfg.bias_coefficients
    for s in generate_scenario(cfg, 300):
        f = pdp_features(s.pdp)
        expected = alpha * f[2] * C + beta * (s.pdp.delays[1] - s.pdp.delays[0]) * C
        assert s.delta_d_m == pytest.approx(expected, rel=1e-9, abs=1e-9)
        assert s.delta_d_m == pytest.approx(analytic_bias(s, cfg), rel=1e-9, abs=1e-9)


def _oracle_nlos_bias(cfg, n, rng):
    """Independent re-draw of the NLOS profile process; returns bias samples."""
    alpha, beta = cfg.bias_coefficients
    out = np.empty(n)
    for k in range(n):
        m = rng.integers(cfg.path_count_range[0], cfg.path_count_range[1] + 1)
        gaps = np.maximum(rng.exponential(cfg.mean_gap, m - 2), 1e-3 * cfg.mean_gap)
        tail = np.concatenate(([0.0], np.cumsum(gaps)))
        shape = np.exp(-tail / cfg.decay_constant) * 10 ** (rng.normal(0, cfg.power_jitter_db, m - 1) / 10)
        g0 = max(rng.exponential(cfg.mean_gap), 0.05 * cfg.mean_gap)
        p = np.concatenate(([rng.uniform(*cfg.blocking_range)], shape * math.exp(-g0 / cfg.decay_constant)))
        t = np.concatenate(([0.0], g0 + tail))
        w = p / p.sum()
        mu = (w * t).sum()
        rms = math.sqrt((w * (t - mu) ** 2).sum())
        out[k] = alpha * rms * C + beta * g0 * C
    return out


def test_nlos_mean_bias_matches_monte_carlo_oracle():
    cfg = ScenarioConfig("mc", nlos_probability=1.0, bias_coefficients=(0.5, 0.2), rng_seed=21)
    dd = np.array([s.delta_d_m for s in generate_scenario(cfg, 10_000)])
    oracle = _oracle_nlos_bias(cfg, 20_000, np.random.default_rng(99))
    se = math.sqrt(dd.var() / dd.size + oracle.var() / oracle.size)
    assert abs(dd.mean() - oracle.mean()) < 3 * se


def test_label_consistency_and_determinism():
    cfg = ScenarioConfig("det", rng_seed=8)
    a = generate_scenario(cfg, 500)
    b = generate_scenario(cfg, 500)
    assert a == b
    for s in a:
        assert s.delta_d_m - (s.estimated_distance_m - s.true_distance_m) == 0.0
        assert s.pdp.delays[0] == pytest.approx(max(s.estimated_distance_m, 0) / C, rel=1e-12)


def test_nlos_biased_upwards():
    samples = generate_scenario(ScenarioConfig("up", rng_seed=4), 4000)
    nlos = np.mean([s.delta_d_m for s in samples if s.condition == NLOS])
    los = np.mean([s.delta_d_m for s in samples if s.condition == LOS])
    assert nlos > los


def test_quantize_examples():
    bw = 400e6
    q = quantize_delays(PowerDelayProfile([1.0], [2.5e-9]), bw)
    assert q.delays[0] == pytest.approx(2.5e-9, abs=1e-21)
    q = quantize_delays(PowerDelayProfile([0.3, 0.4], [2.6e-9, 2.7e-9]), bw)
    assert len(q) == 1 and q.powers[0] == pytest.approx(0.7)
    assert q.delays[0] == pytest.approx(2.5e-9, abs=1e-21)


def test_quantize_matches_per_path_binning(rng):
    bw = 400e6
    width = 1 / bw
    for _ in range(50):
        pdp = random_pdp(rng)
        bins = {}
        for p, t in zip(pdp.powers, pdp.delays):
            k = math.floor(t / width + 1e-9)
            bins[k] = bins.get(k, 0.0) + p
        keys = sorted(bins)
        q = quantize_delays(pdp, bw)
        assert np.allclose(q.delays, [k * width for k in keys], rtol=1e-12)
        assert np.allclose(q.powers, [bins[k] for k in keys], rtol=1e-12)


def test_quantization_noise_std():
    assert quantization_noise_std(400e6) == pytest.approx((C / 400e6) / math.sqrt(12))


def test_features_single_path():
    f = pdp_features(PowerDelayProfile([0.7], [3e-8]))
    assert f[2] == 0.0 and f[1] == 1.0 and f[5] == 1


def test_features_two_equal_paths():
    tau, delta = 5e-8, 4e-9
    f = pdp_features(PowerDelayProfile([1.0, 1.0], [tau, tau + delta]))
    assert f[3] == pytest.approx(delta / 2, rel=1e-12)
    assert f[2] == pytest.approx(delta / 2, rel=1e-9)


def test_features_match_textbook_formulas(rng):
    for _ in range(20):
        pdp = random_pdp(rng, 10)
        p, t = list(pdp.powers), list(pdp.delays - pdp.delays[0])
        tot = sum(p)
        mean = sum(pi * ti for pi, ti in zip(p, t)) / tot
        second = sum(pi * ti * ti for pi, ti in zip(p, t)) / tot
        rms = math.sqrt(max(second - mean * mean, 0.0))
        pm = sum(p) / len(p)
        m2 = sum((x - pm) ** 2 for x in p) / len(p)
        m4 = sum((x - pm) ** 4 for x in p) / len(p)
        f = pdp_features(pdp)
        assert f[0] == pytest.approx(tot, rel=1e-12)
        assert f[1] == pytest.approx(p[0] / tot, rel=1e-12)
        assert f[2] == pytest.approx(rms, rel=1e-6)
        assert f[3] == pytest.approx(mean, rel=1e-12)
        assert f[4] == pytest.approx(m4 / m2**2, rel=1e-9)
        assert f[5] == 10


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(0.0, 1.0))
def test_generated_profiles_are_valid(seed, p_nlos):
    cfg = ScenarioConfig("h", nlos_probability=p_nlos, rng_seed=seed)
    for s in generate_scenario(cfg, 20):
        assert np.all(np.diff(s.pdp.delays) > 0)
        assert np.all(s.pdp.powers >= 0)
        assert cfg.path_count_range[0] <= len(s.pdp) <= cfg.path_count_range[1]


def test_full_nlos_summary():
    s = summarize(generate_scenario(ScenarioConfig("n", nlos_probability=1.0), 50))
    assert s == {"n": 50, "nlos_fraction": 1.0}


def test_default_suite_reseeding():
    a = default_scenarios(3)
    assert [c.scenario_id for c in a] == [f"env{i}" for i in range(1, 7)]
    assert len({c.rng_seed for c in a}) == 6
    assert default_scenarios(3) == a


def test_config_file(tmp_path):
    path = tmp_path / "s.cfg"
    path.write_text("# scenario\nscenario_id = room\nnlos_probability = 0.3  # comment\nbias_coefficients = 0.4, 0.6\n")
    cfg = load_scenario_config(path)
    assert cfg.scenario_id == "room" and cfg.nlos_probability == 0.3 and cfg.bias_coefficients == (0.4, 0.6)
    with pytest.raises(ConfigError):
        parse_keyvalue("scenario_id room")
    path.write_text("scenario_id = x\nbogus = 1\n")
    with pytest.raises(ConfigError):
        load_scenario_config(path)
