"""Small dense-network toolkit with hand-written reverse-mode gradients.

Networks are plain stacks of affine layers followed by an elementwise
activation.  Everything runs in float64 on numpy arrays.  Inputs may be a
single vector of shape ``(input_dim,)`` or a batch of shape
``(n, input_dim)``; outputs follow the same convention.

Parameters are exposed as a flat list ``[W0, b0, W1, b1, ...]`` so that the
optimizer and gradient checks can treat them uniformly.  Weight matrices are
stored as ``(fan_in, fan_out)`` and a layer computes ``x @ W + b``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh", "identity", "softplus")


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


def softplus(x):
    x = np.asarray(x, dtype=np.float64)
    return np.logaddexp(0.0, x)


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _activate(name, a):
    if name == "relu":
        return np.maximum(a, 0.0)
    if name == "tanh":
        return np.tanh(a)
    if name == "softplus":
        return softplus(a)
    return a


def _activation_grad(name, a, out):
    # derivative wrt the pre-activation, given pre-activation a and output out
    if name == "relu":
        return (a > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - out * out
    if name == "softplus":
        return sigmoid(a)
    return np.ones_like(a)


@dataclass
class Layer:
    weight: np.ndarray
    bias: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"layer weight {self.weight.shape} and bias {self.bias.shape} do not match"
            )


@dataclass
class FeedForwardNet:
    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ShapeError("a network needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.weight.shape[1] != nxt.weight.shape[0]:
                raise ShapeError(
                    f"layer dims do not chain: {prev.weight.shape} -> {nxt.weight.shape}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[0]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[1]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.weight, layer.bias))
        return out

    def set_params(self, params):
        if len(params) != 2 * len(self.layers):
            raise ShapeError("parameter list length does not match the network")
        for i, layer in enumerate(self.layers):
            w, b = params[2 * i], params[2 * i + 1]
            if w.shape != layer.weight.shape or b.shape != layer.bias.shape:
                raise ShapeError("parameter shapes do not match the network")
            layer.weight, layer.bias = w, b

    def flat_params(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def copy(self) -> "FeedForwardNet":
        return FeedForwardNet(
            [Layer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.params())


def init_net(sizes, activations, rng) -> FeedForwardNet:
    """Build a net with uniform Glorot weights and zero biases.

    ``sizes`` lists every width including input and output, so a net with
    ``len(sizes) - 1`` layers results.  ``activations`` gives one name per
    layer, or a single name reused for the hidden layers with an identity
    output layer.
    """
    n_layers = len(sizes) - 1
    if n_layers < 1:
        raise ShapeError("need at least input and output sizes")
    if isinstance(activations, str):
        activations = [activations] * (n_layers - 1) + ["identity"]
    if len(activations) != n_layers:
        raise ShapeError("one activation per layer required")
    layers = []
    for fan_in, fan_out, act in zip(sizes[:-1], sizes[1:], activations):
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(Layer(w, np.zeros(fan_out), act))
    return FeedForwardNet(layers)


def _as_batch(net, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ShapeError(f"expected input of width {net.input_dim}, got shape {x.shape}")
    return xb, single


def forward(net: FeedForwardNet, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    h = xb
    for layer in net.layers:
        h = _activate(layer.activation, h @ layer.weight + layer.bias)
    return h[0] if single else h


def forward_trace(net: FeedForwardNet, x):
    """Forward pass that also returns the intermediates ``backward`` needs."""
    xb, single = _as_batch(net, x)
    inputs, pre, post = [], [], []
    h = xb
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.weight + layer.bias
        h = _activate(layer.activation, a)
        pre.append(a)
        post.append(h)
    trace = (inputs, pre, post, single)
    return (h[0] if single else h), trace


def backward(net: FeedForwardNet, x, upstream, trace=None):
    """Reverse-mode gradients for a scalar objective.

    ``upstream`` is d(objective)/d(output), shaped like ``forward(net, x)``.
    Returns ``(param_grads, input_grad)`` with ``param_grads`` aligned to
    ``net.params()``.
    """
    if trace is None:
        _, trace = forward_trace(net, x)
    inputs, pre, post, single = trace
    g = np.asarray(upstream, dtype=np.float64)
    if single:
        g = g[None, :]
    if g.shape != post[-1].shape:
        raise ShapeError(f"upstream gradient shape {g.shape} != output shape {post[-1].shape}")
    grads = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        ga = g * _activation_grad(layer.activation, pre[i], post[i])
        grads[2 * i] = inputs[i].T @ ga
        grads[2 * i + 1] = ga.sum(axis=0)
        g = ga @ layer.weight.T
    return grads, (g[0] if single else g)


# ---------------------------------------------------------------------------
# losses; each *_grad variant returns (value, grads wrt its arguments)


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError("prediction and target shapes differ")
    return float(np.mean((pred - target) ** 2))


def mse_grad(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def _check_positive(name, v):
    v = np.asarray(v, dtype=np.float64)
    if np.any(~(v > 0)):
        raise DomainError(f"{name} must be strictly positive")
    return v


def gaussian_nll(mean, variance, target) -> float:
    """Negative log density of ``target`` under independent Gaussians, summed."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = _check_positive("variance", variance)
    target = np.asarray(target, dtype=np.float64)
    resid = target - mean
    return float(np.sum(0.5 * np.log(2.0 * np.pi * variance) + resid**2 / (2.0 * variance)))


def gaussian_nll_grad(mean, variance, target):
    """Value plus gradients wrt ``mean`` and ``variance``."""
    mean = np.asarray(mean, dtype=np.float64)
    variance = _check_positive("variance", variance)
    resid = np.asarray(target, dtype=np.float64) - mean
    value = float(np.sum(0.5 * np.log(2.0 * np.pi * variance) + resid**2 / (2.0 * variance)))
    d_mean = -resid / variance
    d_var = 0.5 / variance - resid**2 / (2.0 * variance**2)
    return value, d_mean, d_var


def kl_diag_gaussians(mu_q, var_q, mu_p, var_p) -> float:
    """KL(q || p) for diagonal Gaussians, summed over dimensions."""
    mu_q = np.asarray(mu_q, dtype=np.float64)
    mu_p = np.asarray(mu_p, dtype=np.float64)
    var_q = _check_positive("var_q", var_q)
    var_p = _check_positive("var_p", var_p)
    ratio = var_q / var_p
    terms = 0.5 * (ratio + (mu_q - mu_p) ** 2 / var_p - 1.0 - np.log(ratio))
    return float(np.sum(terms))


def kl_diag_gaussians_grad(mu_q, var_q, mu_p, var_p):
    """Value plus gradients wrt ``mu_q`` and ``var_q`` (p held fixed)."""
    value = kl_diag_gaussians(mu_q, var_q, mu_p, var_p)
    mu_q = np.asarray(mu_q, dtype=np.float64)
    var_q = np.asarray(var_q, dtype=np.float64)
    var_p = np.asarray(var_p, dtype=np.float64)
    d_mu = (mu_q - np.asarray(mu_p, dtype=np.float64)) / var_p
    d_var = 0.5 * (1.0 / var_p - 1.0 / var_q)
    return value, d_mu, d_var


# ---------------------------------------------------------------------------
# Adam


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        return cls(
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
            lr=lr,
            beta1=beta1,
            beta2=beta2,
            eps=eps,
        )


def optimizer_step(state: OptimizerState, params, grads):
    """One bias-corrected Adam update.  Returns new parameter arrays; the
    moment buffers in ``state`` are updated in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state disagree in length")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    corr1 = 1.0 - b1**t
    corr2 = 1.0 - b2**t
    new_params = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if p.shape != g.shape or p.shape != state.m[i].shape:
            raise ShapeError(f"shape mismatch at parameter {i}: {p.shape} vs {g.shape}")
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = state.m[i] / corr1
        v_hat = state.v[i] / corr2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return new_params


# ---------------------------------------------------------------------------
# checkpoints: weights are flattened row-major, shape (fan_in, fan_out)


def net_to_dict(net: FeedForwardNet) -> dict:
    return {
        "version": CHECKPOINT_VERSION,
        "layers": [
            {
                "in": int(l.weight.shape[0]),
                "out": int(l.weight.shape[1]),
                "activation": l.activation,
                "weight": l.weight.ravel(order="C").tolist(),
                "bias": l.bias.tolist(),
            }
            for l in net.layers
        ],
    }


def net_from_dict(d: dict) -> FeedForwardNet:
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported network checkpoint version {d.get('version')!r}")
    layers = []
    for spec in d["layers"]:
        w = np.asarray(spec["weight"], dtype=np.float64).reshape(spec["in"], spec["out"])
        layers.append(Layer(w, np.asarray(spec["bias"], dtype=np.float64), spec["activation"]))
    return FeedForwardNet(layers)


def save_net(net: FeedForwardNet, path):
    with open(path, "w") as fh:
        json.dump(net_to_dict(net), fh)


def load_net(path) -> FeedForwardNet:
    with open(path) as fh:
        return net_from_dict(json.load(fh))
