import functools

import numpy as np
import pytest

from nprmitigate import nn
from nprmitigate.channel_sim import PowerDelayProfile, ScenarioConfig, generate_scenario
from nprmitigate.dataset_io import Dataset

GRAD_ABS_FLOOR = 1e-6


def rel_error(a, b, floor=GRAD_ABS_FLOOR):
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


def central_difference(f, arrays, h=1e-5):
    """d f / d a for each array in ``arrays`` (perturbed in place, restored)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            fp = f()
            a[i] = old - h
            fm = f()
            a[i] = old
            g[i] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def random_pdp(rng, n_paths=None):
    n = int(rng.integers(1, 12)) if n_paths is None else n_paths
    delays = np.cumsum(rng.uniform(0.1e-9, 3e-9, n)) + rng.uniform(1e-8, 3e-7)
    powers = rng.uniform(0.01, 1.0, n)
    return PowerDelayProfile(powers, delays)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    cfg = ScenarioConfig("toy", rng_seed=7)
    return Dataset(tuple(generate_scenario(cfg, 300)))


@pytest.fixture(scope="session")
def two_scenarios():
    a = ScenarioConfig("a", bias_coefficients=(0.4, 0.4), rng_seed=11)
    b = ScenarioConfig("b", bias_coefficients=(1.0, 0.8), rng_seed=12)
    return {c.scenario_id: Dataset(tuple(generate_scenario(c, 400))) for c in (a, b)}


@pytest.fixture
def tiny_net(rng):
    return nn.init_net([5, 7, 3], "tanh", rng)


def smooth_npr(seed=0, max_paths=3, latent_dim=2, hidden=(5,)):
    """Tiny NPR with tanh hidden units so finite differences are well behaved."""
    from nprmitigate import npr

    cfg = npr.NprConfig(max_paths=max_paths, latent_dim=latent_dim, encoder_hidden=hidden,
                        decoder_hidden=hidden)
    model = npr.build_model(cfg, seed)
    for net in (model.encoder, model.decoder):
        for layer in net.layers[:-1]:
            layer.activation = "tanh"
    return model


def episode_gradient_errors(model, rng, kl_weight=0.01, n_c=4, n_t=5, per_target_eps=True, h=1e-5):
    """Max relative error of the episode gradients against finite differences.

    The encoder and every decoder entry follow the objective; the likelihood
    term adds to the output layer's variance column only.
    """
    from nprmitigate import npr

    f = model.config.feature_dim
    L = model.latent_dim
    Rc, dc = rng.standard_normal((n_c, f)), rng.standard_normal(n_c)
    Rt, dt = rng.standard_normal((n_t, f)), rng.standard_normal(n_t)
    eps = rng.standard_normal((n_t, L) if per_target_eps else L)

    def objective():
        return npr._episode_loss(model, Rc, dc, Rt, dt, eps, kl_weight, want_grads=False)[0]

    def likelihood():
        return npr._episode_loss(model, Rc, dc, Rt, dt, eps, kl_weight, want_grads=False)[1]

    _, _, ge, gd = npr._episode_loss(model, Rc, dc, Rt, dt, eps, kl_weight)
    enc_p, dec_p = model.encoder.params(), model.decoder.params()
    num_e = central_difference(objective, enc_p, h)
    num_d = central_difference(objective, dec_p, h)
    W, b = dec_p[-2], dec_p[-1]
    wcol = W[:, 1:2].copy()
    bcol = b[1:2].copy()

    def lik_col():
        W[:, 1], b[1] = wcol[:, 0], bcol[0]
        return likelihood()

    extra_w, extra_b = central_difference(lik_col, [wcol, bcol], h)
    W[:, 1], b[1] = wcol[:, 0], bcol[0]
    num_d[-2][:, 1] += extra_w[:, 0]
    num_d[-1][1] += extra_b[0]
    errs = [np.max(rel_error(a, n)) for a, n in zip(ge + gd, num_e + num_d)]
    return max(errs)


UNSEEN = "env6"
TRAIN_SECONDS: dict = {}


@functools.lru_cache(maxsize=None)
def default_run(seed):
    """Full-size training on the five known default scenarios, cached per seed."""
    import time

    from nprmitigate import pipeline
    from nprmitigate.channel_sim import default_scenarios

    t0 = time.perf_counter()
    data = pipeline.generate(default_scenarios(seed), 2000)
    train, test = pipeline.split_all(data, seed)
    known = {k: v for k, v in train.items() if k != UNSEEN}
    models = pipeline.train_all(known, seed)
    TRAIN_SECONDS[seed] = time.perf_counter() - t0
    return models, train, test
