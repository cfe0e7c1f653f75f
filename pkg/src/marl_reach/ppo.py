"""Synchronous PPO with an adaptive KL penalty.

The learner maximises ``mean(ratio * A) - beta * mean(KL(old || new))`` over a
batch collected by every agent under one frozen policy snapshot, and adapts
``beta`` after each update from the measured divergence.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from marl_reach import kernels
from marl_reach.errors import ContractViolation, NumericalGuardError
from marl_reach.nn import (
    AdamState,
    GaussianPolicyParams,
    ValueParams,
    adam_step,
    diag_gaussian_kl,
    log_prob,
    log_prob_grad,
    mlp_backward,
)
from marl_reach.numerics import RngStream

LOG_RATIO_LIMIT = 20.0
BETA_MIN, BETA_MAX = 1e-4, 1e4


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    lam: float = 0.95
    beta: float = 1.0
    kl_target: float = 0.01
    epochs: int = 10
    minibatch_size: int = 256
    policy_lr: float = 3e-4
    value_lr: float = 3e-4
    horizon: int = 2048
    normalize_advantages: bool = True

    def __post_init__(self):
        if not (0 <= self.gamma <= 1 and 0 <= self.lam <= 1):
            raise ContractViolation("gamma and lambda must lie in [0, 1]")
        if not (self.beta > 0 and self.kl_target > 0):
            raise ContractViolation("beta and kl_target must be positive")
        if self.epochs < 1 or self.minibatch_size < 1 or self.horizon < 1:
            raise ContractViolation("epochs, minibatch_size and horizon must be >= 1")


@dataclass
class Transition:
    observation: np.ndarray
    action: np.ndarray
    reward: float
    old_log_prob: float
    value_estimate: float
    done: bool
    agent_id: int


@dataclass
class RolloutBatch:
    """Transitions laid out as ``(T, n_agents, ...)``; time is the leading axis.

    ``last_obs`` holds each agent's observation after the final step, used to
    bootstrap values of unfinished episodes.
    """

    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    old_log_probs: np.ndarray
    values: np.ndarray
    last_obs: np.ndarray
    version: int = 0

    def __post_init__(self):
        T, n = self.rewards.shape if self.rewards.ndim == 2 else (0, 0)
        if T == 0 or n == 0:
            raise ContractViolation("empty rollout batch")
        for name in ("dones", "old_log_probs", "values"):
            if getattr(self, name).shape != (T, n):
                raise ContractViolation(f"{name} has shape {getattr(self, name).shape}")
        if self.obs.shape[:2] != (T, n) or self.actions.shape[:2] != (T, n):
            raise ContractViolation("observation/action arrays misaligned with rewards")
        if self.last_obs.shape != (n, self.obs.shape[2]):
            raise ContractViolation("last_obs must hold one observation per agent")
        if not np.all(np.isfinite(self.old_log_probs)):
            raise ContractViolation("non-finite old log-probabilities")

    @property
    def n_agents(self) -> int:
        return self.rewards.shape[1]

    def __len__(self) -> int:
        return self.rewards.size

    def transitions(self) -> Iterator[Transition]:
        T, n = self.rewards.shape
        for t in range(T):
            for j in range(n):
                yield Transition(self.obs[t, j], self.actions[t, j], float(self.rewards[t, j]),
                                 float(self.old_log_probs[t, j]), float(self.values[t, j]),
                                 bool(self.dones[t, j]), j)

    def flat(self, name: str) -> np.ndarray:
        a = getattr(self, name)
        return a.reshape((-1,) + a.shape[2:])


@dataclass
class AdvantageEstimate:
    advantages: np.ndarray  # (T, n_agents)
    returns: np.ndarray


def compute_gae(batch: RolloutBatch, value_fn: Callable, gamma: float, lam: float) -> AdvantageEstimate:
    T, n = batch.rewards.shape
    values = np.ascontiguousarray(
        np.asarray(value_fn(batch.flat("obs")), dtype=np.float64).reshape(T, n))
    last = np.ascontiguousarray(np.asarray(value_fn(batch.last_obs), dtype=np.float64).reshape(n))
    adv = kernels.gae(np.ascontiguousarray(batch.rewards, dtype=np.float64), values,
                      np.ascontiguousarray(batch.dones, dtype=np.float64), last,
                      float(gamma), float(lam))
    return AdvantageEstimate(adv, adv + values)


def normalize(adv: np.ndarray) -> np.ndarray:
    std = adv.std()
    return (adv - adv.mean()) / std if std > 0 else adv - adv.mean()


def adapt_beta(beta: float, measured_kl: float, kl_target: float) -> float:
    if measured_kl > 1.5 * kl_target:
        beta = beta * 2.0
    elif measured_kl < kl_target / 1.5:
        beta = beta / 2.0
    return float(min(max(beta, BETA_MIN), BETA_MAX))


def _log_ratio(policy: GaussianPolicyParams, obs, actions, old_log_probs):
    mean, cache = policy.mean_and_cache(obs)
    lr = log_prob(mean, policy.std, actions) - old_log_probs
    bad = np.flatnonzero(~(np.abs(lr) <= LOG_RATIO_LIMIT))
    if bad.size:
        i = int(bad[0])
        raise NumericalGuardError(
            f"log importance ratio {lr[i]:.3g} at transition {i} exceeds ±{LOG_RATIO_LIMIT}",
            i, float(lr[i]))
    return lr, mean, cache


def surrogate_objective(policy: GaussianPolicyParams, obs, actions, old_log_probs, advantages) -> float:
    lr, _, _ = _log_ratio(policy, obs, actions, old_log_probs)
    return float(np.mean(np.exp(lr) * advantages))


def policy_kl(policy_k: GaussianPolicyParams, policy: GaussianPolicyParams, obs) -> float:
    """Batch-averaged KL(policy_k || policy) over the given states."""
    return float(np.mean(diag_gaussian_kl(policy_k.mean(obs), policy_k.std,
                                          policy.mean(obs), policy.std)))


def ppo_objective(policy, policy_k, obs, actions, old_log_probs, advantages, beta: float) -> float:
    if not beta > 0:
        raise ContractViolation("beta must be positive")
    return (surrogate_objective(policy, obs, actions, old_log_probs, advantages)
            - beta * policy_kl(policy_k, policy, obs))


def ppo_objective_and_grad(policy: GaussianPolicyParams, obs, actions, old_log_probs,
                           advantages, old_mean, old_std, beta: float):
    """Value and flat gradient of the KL-penalised surrogate.

    ``old_mean``/``old_std`` describe the snapshot distribution at ``obs``.
    Returns ``(objective, surrogate, kl, grad)``; ``beta = 0`` gives the plain
    surrogate.
    """
    n = len(advantages)
    lr, mean, cache = _log_ratio(policy, obs, actions, old_log_probs)
    ratio = np.exp(lr)
    std = policy.std
    g_mean, g_log_std = log_prob_grad(mean, std, actions)
    w = (ratio * advantages / n)[:, None]
    d_mean = w * g_mean
    d_log_std = (w * g_log_std).sum(axis=0)
    surrogate = float(np.sum(ratio * advantages) / n)

    kl = 0.0
    if beta:
        var = std * std
        diff = mean - old_mean
        kl_terms = diag_gaussian_kl(old_mean, old_std, mean, std)
        kl = float(np.mean(kl_terms))
        d_mean -= beta * diff / var / n
        d_log_std -= beta * np.sum(1.0 - (old_std ** 2 + diff * diff) / var, axis=0) / n
    grads = mlp_backward(policy.trunk, cache, d_mean * policy.action_scale)
    return surrogate - beta * kl, surrogate, kl, np.concatenate([grads.flat(), d_log_std])


def value_loss_and_grad(value: ValueParams, obs, targets):
    v, cache = value.value_and_cache(obs)
    err = v - targets
    n = len(targets)
    d_out = (2.0 / n) * err * value.value_scale
    grads = mlp_backward(value.trunk, cache, d_out[:, None])
    return float(np.mean(err * err)), grads.flat()


@dataclass
class LearnerState:
    policy_adam: AdamState
    value_adam: AdamState
    beta: float

    @classmethod
    def fresh(cls, policy: GaussianPolicyParams, value: ValueParams, config: PpoConfig) -> "LearnerState":
        return cls(AdamState.zeros(policy.n_params, lr=config.policy_lr),
                   AdamState.zeros(value.n_params, lr=config.value_lr), config.beta)

    def copy(self) -> "LearnerState":
        return LearnerState(self.policy_adam.copy(), self.value_adam.copy(), self.beta)


@dataclass
class UpdateStats:
    kl: float = 0.0
    objective: float = 0.0
    value_loss: float = 0.0
    beta_before: float = 0.0
    beta_after: float = 0.0
    guard_tripped: bool = False
    guard_message: str = ""
    extra: dict = field(default_factory=dict)


def update_policy(policy_k: GaussianPolicyParams, value: ValueParams, batch: RolloutBatch,
                  estimate: AdvantageEstimate, config: PpoConfig, learner: LearnerState,
                  rng: RngStream):
    """Run ``config.epochs`` passes of minibatch Adam on policy and value nets.

    Returns ``(policy_new, value_new, learner_new, stats)``.  If the log-ratio
    guard trips, the snapshot policy and value net and the incoming learner
    state are returned unchanged with ``stats.guard_tripped`` set.
    """
    obs = batch.flat("obs")
    actions = batch.flat("actions")
    old_lp = batch.flat("old_log_probs")
    adv = estimate.advantages.reshape(-1)
    if config.normalize_advantages:
        adv = normalize(adv)
    targets = estimate.returns.reshape(-1)
    n = len(adv)
    old_mean_all = policy_k.mean(obs)
    old_std = policy_k.std

    beta = learner.beta
    stats = UpdateStats(beta_before=beta)
    policy, vnet = policy_k.copy(), value.copy()
    p_adam, v_adam = learner.policy_adam.copy(), learner.value_adam.copy()
    p_flat, v_flat = policy.flat(), vnet.flat()
    mb = min(config.minibatch_size, n)
    try:
        for _ in range(config.epochs):
            order = rng.permutation(n)
            for start in range(0, n, mb):
                idx = order[start:start + mb]
                _, _, _, g = ppo_objective_and_grad(policy, obs[idx], actions[idx], old_lp[idx],
                                                    adv[idx], old_mean_all[idx], old_std, beta)
                p_flat, p_adam = adam_step(p_adam, p_flat, -g)
                policy = policy.with_flat(p_flat)
                _, vg = value_loss_and_grad(vnet, obs[idx], targets[idx])
                v_flat, v_adam = adam_step(v_adam, v_flat, vg)
                vnet = vnet.with_flat(v_flat)
        objective, _, kl, _ = ppo_objective_and_grad(policy, obs, actions, old_lp, adv,
                                                     old_mean_all, old_std, beta)
    except NumericalGuardError as exc:
        stats.guard_tripped = True
        stats.guard_message = str(exc)
        stats.beta_after = beta
        return policy_k, value, learner, stats

    stats.kl = kl
    stats.objective = objective
    stats.value_loss = value_loss_and_grad(vnet, obs, targets)[0]
    stats.beta_after = adapt_beta(beta, kl, config.kl_target)
    return policy, vnet, replace(learner, policy_adam=p_adam, value_adam=v_adam,
                                 beta=stats.beta_after), stats


def flat_arrays(batch: RolloutBatch, estimate: Optional[AdvantageEstimate] = None):
    """Convenience: flattened ``(obs, actions, old_log_probs, advantages)``."""
    adv = None if estimate is None else estimate.advantages.reshape(-1)
    return batch.flat("obs"), batch.flat("actions"), batch.flat("old_log_probs"), adv
