"""Tanh MLPs with hand-written backprop, a diagonal Gaussian policy head and Adam."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from marl_reach.errors import ContractViolation
from marl_reach.numerics import RngStream

LOG_2PI = float(np.log(2.0 * np.pi))

OBS_DIM = 9
ACT_DIM = 4
HIDDEN = (64, 64)


@dataclass
class MlpParams:
    weights: list  # weights[i] has shape (out_i, in_i)
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ContractViolation("need one bias vector per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ContractViolation(f"layer {i}: weight {w.shape} / bias {b.shape}")
            if i and w.shape[1] != self.weights[i - 1].shape[0]:
                raise ContractViolation(f"layer {i} does not chain onto layer {i - 1}")
        if self.activation != "tanh":
            raise ContractViolation(f"unsupported activation {self.activation!r}")

    @property
    def layer_sizes(self) -> list[int]:
        return [self.weights[0].shape[1]] + [w.shape[0] for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in zip(self.weights, self.biases) for a in wb])

    def with_flat(self, vec) -> "MlpParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ContractViolation(f"flat vector of length {vec.size}, expected {self.n_params}")
        ws, bs, pos = [], [], 0
        for w, b in zip(self.weights, self.biases):
            ws.append(vec[pos:pos + w.size].reshape(w.shape).copy())
            pos += w.size
            bs.append(vec[pos:pos + b.size].copy())
            pos += b.size
        return MlpParams(ws, bs, self.activation)

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         self.activation)


@dataclass
class MlpCache:
    layer_sizes: tuple
    activations: list  # input followed by each hidden post-activation
    batched: bool


def init_params(rng: RngStream, layer_sizes, output_gain: float = 1.0) -> MlpParams:
    """Weights ~ N(0, 1/fan_in), biases zero.

    ``output_gain`` multiplies the std of the last layer only.
    """
    layer_sizes = list(layer_sizes)
    if len(layer_sizes) < 2 or min(layer_sizes) < 1:
        raise ContractViolation(f"invalid layer sizes {layer_sizes}")
    ws, bs = [], []
    n_layers = len(layer_sizes) - 1
    for i, (fan_in, fan_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
        std = 1.0 / np.sqrt(fan_in)
        if i == n_layers - 1:
            std *= output_gain
        ws.append(rng.standard_normal((fan_out, fan_in)) * std)
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def mlp_forward(p: MlpParams, x):
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    if x.shape[-1] != p.weights[0].shape[1] or x.ndim not in (1, 2):
        raise ContractViolation(f"input shape {x.shape} does not match width {p.weights[0].shape[1]}")
    acts = [x]
    h = x
    last = len(p.weights) - 1
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        z = h @ w.T + b
        if i < last:
            h = np.tanh(z)
            acts.append(h)
        else:
            h = z
    return h, MlpCache(tuple(p.layer_sizes), acts, batched)


@dataclass
class MlpGrads:
    weights: list
    biases: list
    input: np.ndarray

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for wb in zip(self.weights, self.biases) for a in wb])


def mlp_backward(p: MlpParams, cache: MlpCache, grad_output) -> MlpGrads:
    """Gradients of ``sum(output * grad_output)`` w.r.t. parameters and input.

    For batched caches the parameter gradients are summed over the batch.
    """
    if tuple(p.layer_sizes) != cache.layer_sizes:
        raise ContractViolation("cache was produced by a network of different shape")
    g = np.asarray(grad_output, dtype=np.float64)
    expected = cache.activations[0].shape[:-1] + (p.weights[-1].shape[0],)
    if g.shape != expected:
        raise ContractViolation(f"grad_output shape {g.shape}, expected {expected}")
    n = len(p.weights)
    gw, gb = [None] * n, [None] * n
    for i in range(n - 1, -1, -1):
        a_in = cache.activations[i]
        if cache.batched:
            gw[i] = g.T @ a_in
            gb[i] = g.sum(axis=0)
        else:
            gw[i] = np.outer(g, a_in)
            gb[i] = g.copy()
        g = g @ p.weights[i]
        if i > 0:
            g = g * (1.0 - a_in * a_in)
    return MlpGrads(gw, gb, g)


def _check_std(*stds):
    for s in stds:
        if np.any(~(np.asarray(s) > 0)):
            raise ContractViolation("standard deviations must be positive")


def log_prob(mean, std, action):
    """Log density of a diagonal Gaussian, summed over the last axis."""
    _check_std(std)
    mean, std, action = (np.asarray(a, dtype=np.float64) for a in (mean, std, action))
    z = (action - mean) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def log_prob_grad(mean, std, action):
    """Per-sample gradients of ``log_prob`` w.r.t. the mean and ``log(std)``."""
    _check_std(std)
    mean, std, action = (np.asarray(a, dtype=np.float64) for a in (mean, std, action))
    z = (action - mean) / std
    return z / std, z * z - 1.0


def diag_gaussian_kl(p_mean, p_std, q_mean, q_std):
    """KL(p || q) for diagonal Gaussians, summed over the last axis."""
    _check_std(p_std, q_std)
    p_mean, p_std, q_mean, q_std = (np.asarray(a, dtype=np.float64)
                                    for a in (p_mean, p_std, q_mean, q_std))
    var_ratio = (p_std / q_std) ** 2
    d = (p_mean - q_mean) / q_std
    return np.sum(0.5 * (var_ratio + d * d - 1.0) - np.log(p_std / q_std), axis=-1)


@dataclass
class GaussianPolicyParams:
    """Action mean is ``action_scale * trunk((obs - obs_shift) * obs_scale)``.

    The standard deviation is ``exp(log_std)``, independent of the state.
    """

    trunk: MlpParams
    log_std: np.ndarray
    action_scale: np.ndarray
    obs_scale: np.ndarray
    obs_shift: np.ndarray = None

    def __post_init__(self):
        sizes = self.trunk.layer_sizes
        if sizes[0] != self.obs_scale.size or sizes[-1] != self.log_std.size:
            raise ContractViolation("policy trunk does not match observation/action widths")
        if self.action_scale.shape != self.log_std.shape:
            raise ContractViolation("action_scale and log_std must have equal shape")
        if self.obs_shift is None:
            self.obs_shift = np.zeros_like(self.obs_scale)

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std)

    def mean_and_cache(self, obs):
        out, cache = mlp_forward(self.trunk, (np.asarray(obs) - self.obs_shift) * self.obs_scale)
        return out * self.action_scale, cache

    def mean(self, obs) -> np.ndarray:
        return self.mean_and_cache(obs)[0]

    @property
    def n_params(self) -> int:
        return self.trunk.n_params + self.log_std.size

    def flat(self) -> np.ndarray:
        return np.concatenate([self.trunk.flat(), self.log_std])

    def with_flat(self, vec) -> "GaussianPolicyParams":
        vec = np.asarray(vec, dtype=np.float64)
        k = self.trunk.n_params
        if vec.shape != (self.n_params,):
            raise ContractViolation("flat policy vector has wrong length")
        return replace(self, trunk=self.trunk.with_flat(vec[:k]), log_std=vec[k:].copy())

    def copy(self) -> "GaussianPolicyParams":
        return GaussianPolicyParams(self.trunk.copy(), self.log_std.copy(),
                                    self.action_scale.copy(), self.obs_scale.copy(),
                                    self.obs_shift.copy())


@dataclass
class ValueParams:
    """State value is ``value_scale * trunk((obs - obs_shift) * obs_scale)``."""

    trunk: MlpParams
    obs_scale: np.ndarray
    value_scale: float = 1.0
    obs_shift: np.ndarray = None

    def __post_init__(self):
        sizes = self.trunk.layer_sizes
        if sizes[-1] != 1 or sizes[0] != self.obs_scale.size:
            raise ContractViolation("value trunk must map observations to one output")
        if self.obs_shift is None:
            self.obs_shift = np.zeros_like(self.obs_scale)

    def value_and_cache(self, obs):
        out, cache = mlp_forward(self.trunk, (np.asarray(obs) - self.obs_shift) * self.obs_scale)
        return out[..., 0] * self.value_scale, cache

    def __call__(self, obs) -> np.ndarray:
        return self.value_and_cache(obs)[0]

    @property
    def n_params(self) -> int:
        return self.trunk.n_params

    def flat(self) -> np.ndarray:
        return self.trunk.flat()

    def with_flat(self, vec) -> "ValueParams":
        return replace(self, trunk=self.trunk.with_flat(vec))

    def copy(self) -> "ValueParams":
        return ValueParams(self.trunk.copy(), self.obs_scale.copy(), self.value_scale,
                           self.obs_shift.copy())


def init_policy(rng: RngStream, action_scale, obs_scale, obs_shift=None, hidden=HIDDEN,
                output_gain: float = 0.01) -> GaussianPolicyParams:
    action_scale = np.asarray(action_scale, dtype=np.float64)
    obs_scale = np.asarray(obs_scale, dtype=np.float64)
    shift = np.zeros_like(obs_scale) if obs_shift is None else np.asarray(obs_shift, np.float64)
    trunk = init_params(rng, [obs_scale.size, *hidden, action_scale.size], output_gain)
    return GaussianPolicyParams(trunk, np.log(0.5 * action_scale), action_scale, obs_scale, shift)


def init_value(rng: RngStream, obs_scale, obs_shift=None, hidden=HIDDEN,
               value_scale: float = 1.0) -> ValueParams:
    obs_scale = np.asarray(obs_scale, dtype=np.float64)
    shift = np.zeros_like(obs_scale) if obs_shift is None else np.asarray(obs_shift, np.float64)
    trunk = init_params(rng, [obs_scale.size, *hidden, 1])
    return ValueParams(trunk, obs_scale, float(value_scale), shift)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, **hyper) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, **hyper)

    def copy(self) -> "AdamState":
        return replace(self, m=self.m.copy(), v=self.v.copy())


def adam_step(state: AdamState, params, grads):
    """One bias-corrected Adam descent step. Returns ``(new_params, new_state)``."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ContractViolation(
            f"length mismatch: params {params.shape}, grads {grads.shape}, moments {state.m.shape}")
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, t=t)


def params_to_arrays(prefix: str, p: MlpParams) -> dict:
    out = {f"{prefix}.layer_sizes": np.asarray(p.layer_sizes, dtype=np.int64)}
    for i, (w, b) in enumerate(zip(p.weights, p.biases)):
        out[f"{prefix}.w{i}"] = w
        out[f"{prefix}.b{i}"] = b
    return out


def params_from_arrays(prefix: str, arrays) -> MlpParams:
    sizes = [int(s) for s in arrays[f"{prefix}.layer_sizes"]]
    n = len(sizes) - 1
    ws = [np.array(arrays[f"{prefix}.w{i}"], dtype=np.float64) for i in range(n)]
    bs = [np.array(arrays[f"{prefix}.b{i}"], dtype=np.float64) for i in range(n)]
    p = MlpParams(ws, bs)
    if p.layer_sizes != sizes:
        raise ContractViolation(f"{prefix}: stored layer sizes disagree with weights")
    return p

