import numpy as np
import pytest
from conftest import perturbed_policy, random_policy, random_value
from hypothesis import given, settings
from hypothesis import strategies as st

from marl_reach.errors import ContractViolation, NumericalGuardError
from marl_reach.nn import diag_gaussian_kl, log_prob
from marl_reach.numerics import RngStream, finite_difference_gradient
from marl_reach.ppo import (
    BETA_MAX,
    LearnerState,
    PpoConfig,
    RolloutBatch,
    adapt_beta,
    compute_gae,
    normalize,
    policy_kl,
    ppo_objective,
    ppo_objective_and_grad,
    surrogate_objective,
    update_policy,
)


def make_batch(policy, T=6, n=3, seed=0, done_p=0.2):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(T, n, 9))
    mean = policy.mean(obs.reshape(-1, 9)).reshape(T, n, 4)
    actions = mean + policy.std * rng.normal(size=(T, n, 4))
    lp = log_prob(mean, policy.std, actions)
    rewards = rng.normal(size=(T, n))
    dones = (rng.random((T, n)) < done_p).astype(float)
    return RolloutBatch(obs, actions, rewards, dones, lp, np.zeros((T, n)),
                        rng.normal(size=(n, 9)))


def brute_force_returns(rewards, dones, last_value, gamma):
    """Discounted return of every step, cutting at episode ends."""
    T = len(rewards)
    out = np.empty(T)
    for t in range(T):
        g, disc = 0.0, 1.0
        for k in range(t, T):
            g += disc * rewards[k]
            if dones[k]:
                break
            disc *= gamma
        else:
            g += disc * last_value
        out[t] = g
    return out


def table_value(values, last):
    """value_fn looking states up by identity (obs[..., 0] holds an index)."""
    table = np.concatenate([values.reshape(-1), last])

    def fn(obs):
        return table[obs[..., 0].astype(int)]
    return fn


def indexed_batch(rewards, dones, values, last_values):
    T, n = rewards.shape
    obs = np.zeros((T, n, 9))
    obs[..., 0] = np.arange(T * n).reshape(T, n)
    last_obs = np.zeros((n, 9))
    last_obs[:, 0] = T * n + np.arange(n)
    batch = RolloutBatch(obs, np.zeros((T, n, 4)), rewards, dones, np.zeros((T, n)),
                         values, last_obs)
    return batch, table_value(values, last_values)


def test_gae_single_terminal_step():
    batch, fn = indexed_batch(np.array([[2.5]]), np.array([[1.0]]), np.array([[0.7]]),
                              np.array([9.0]))
    est = compute_gae(batch, fn, 0.99, 0.95)
    assert est.advantages[0, 0] == 2.5 - 0.7
    assert est.returns[0, 0] == pytest.approx(2.5)


def test_gae_lambda_zero_is_td_error():
    rng = np.random.default_rng(1)
    T, n = 20, 3
    r, v, last = rng.normal(size=(T, n)), rng.normal(size=(T, n)), rng.normal(size=n)
    d = (rng.random((T, n)) < 0.2).astype(float)
    batch, fn = indexed_batch(r, d, v, last)
    est = compute_gae(batch, fn, 0.9, 0.0)
    nxt = np.vstack([v[1:], last[None]])
    assert np.array_equal(est.advantages, r + 0.9 * (1 - d) * nxt - v)


@pytest.mark.parametrize("seed", range(5))
def test_gae_lambda_one_matches_monte_carlo(seed):
    rng = np.random.default_rng(seed)
    T, n = 50, 2
    r, v, last = rng.normal(size=(T, n)), rng.normal(size=(T, n)), rng.normal(size=n)
    d = (rng.random((T, n)) < 0.1).astype(float)
    batch, fn = indexed_batch(r, d, v, last)
    est = compute_gae(batch, fn, 0.99, 1.0)
    for j in range(n):
        expected = brute_force_returns(r[:, j], d[:, j], last[j], 0.99)
        assert np.max(np.abs(est.advantages[:, j] + v[:, j] - expected)) < 1e-10


def test_gae_backends_agree():
    from marl_reach import kernels
    rng = np.random.default_rng(2)
    args = (rng.normal(size=(64, 5)), rng.normal(size=(64, 5)),
            (rng.random((64, 5)) < 0.1).astype(float), rng.normal(size=5), 0.99, 0.95)
    results = [m.gae(*args) for m in kernels.backends().values()]
    for other in results[1:]:
        assert np.array_equal(results[0], other)


def test_empty_batch_rejected():
    with pytest.raises(ContractViolation):
        RolloutBatch(np.zeros((0, 1, 9)), np.zeros((0, 1, 4)), np.zeros((0, 1)), np.zeros((0, 1)),
                     np.zeros((0, 1)), np.zeros((0, 1)), np.zeros((1, 9)))


def test_surrogate_on_policy_is_mean_advantage():
    pk = random_policy(3)
    b = make_batch(pk)
    adv = np.random.default_rng(4).normal(size=len(b))
    val = surrogate_objective(pk, b.flat("obs"), b.flat("actions"), b.flat("old_log_probs"), adv)
    assert val == pytest.approx(adv.mean(), abs=1e-12)


def test_surrogate_zero_advantage():
    pk = random_policy(5)
    b = make_batch(pk)
    p = perturbed_policy(pk, 6)
    assert surrogate_objective(p, b.flat("obs"), b.flat("actions"), b.flat("old_log_probs"),
                               np.zeros(len(b))) == 0.0


def test_surrogate_guard():
    pk = random_policy(7)
    b = make_batch(pk)
    bad = b.flat("old_log_probs").copy()
    bad[3] -= 50.0
    with pytest.raises(NumericalGuardError) as info:
        surrogate_objective(pk, b.flat("obs"), b.flat("actions"), bad, np.ones(len(b)))
    assert info.value.index == 3


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("beta", [0.0, 0.5])
def test_objective_gradient_matches_finite_differences(seed, beta):
    pk = random_policy(10 + seed)
    p = perturbed_policy(pk, 20 + seed)
    b = make_batch(pk, seed=seed)
    obs, act, old = b.flat("obs"), b.flat("actions"), b.flat("old_log_probs")
    adv = np.random.default_rng(seed).normal(size=len(b))
    _, _, _, g = ppo_objective_and_grad(p, obs, act, old, adv, pk.mean(obs), pk.std, beta)
    if beta:
        f = lambda v: ppo_objective(p.with_flat(v), pk, obs, act, old, adv, beta)  # noqa: E731
    else:
        f = lambda v: surrogate_objective(p.with_flat(v), obs, act, old, adv)  # noqa: E731
    fd = finite_difference_gradient(f, p.flat(), h=1e-6)
    assert np.max(np.abs(g - fd)) / np.max(np.abs(fd)) < 1e-4


def test_ppo_objective_identities():
    pk = random_policy(30)
    b = make_batch(pk)
    obs, act, old = b.flat("obs"), b.flat("actions"), b.flat("old_log_probs")
    adv = np.random.default_rng(3).normal(size=len(b))
    assert ppo_objective(pk, pk, obs, act, old, adv, 1.0) == pytest.approx(adv.mean(), abs=1e-12)
    p = perturbed_policy(pk, 31)
    j1 = ppo_objective(p, pk, obs, act, old, adv, 1.0)
    j2 = ppo_objective(p, pk, obs, act, old, adv, 2.0)
    assert j2 - j1 == pytest.approx(-policy_kl(pk, p, obs), abs=1e-12)


def test_ppo_objective_compositional_oracle():
    pk = random_policy(32)
    p = perturbed_policy(pk, 33)
    b = make_batch(pk)
    obs, act, old = b.flat("obs"), b.flat("actions"), b.flat("old_log_probs")
    adv = np.random.default_rng(5).normal(size=len(b))
    surr = np.mean([np.exp(log_prob(p.mean(o), p.std, a) - lo) * A
                    for o, a, lo, A in zip(obs, act, old, adv)])
    kl = np.mean([diag_gaussian_kl(pk.mean(o), pk.std, p.mean(o), p.std) for o in obs])
    assert ppo_objective(p, pk, obs, act, old, adv, 0.3) == pytest.approx(surr - 0.3 * kl, abs=1e-12)


def test_ppo_objective_rejects_nonpositive_beta():
    pk = random_policy(34)
    b = make_batch(pk)
    with pytest.raises(ContractViolation):
        ppo_objective(pk, pk, b.flat("obs"), b.flat("actions"), b.flat("old_log_probs"),
                      np.zeros(len(b)), 0.0)


def test_adapt_beta_rules():
    assert adapt_beta(1.0, 0.01, 0.01) == 1.0
    assert adapt_beta(1.0, 0.1, 0.01) == 2.0
    assert adapt_beta(1.0, 0.001, 0.01) == 0.5
    assert adapt_beta(BETA_MAX, 1.0, 0.01) == BETA_MAX


@settings(max_examples=200, deadline=None)
@given(st.floats(1e-4, 1e4), st.floats(0, 1), st.floats(0, 1))
def test_adapt_beta_monotone(beta, kl_a, kl_b):
    lo, hi = sorted((kl_a, kl_b))
    assert adapt_beta(beta, lo, 0.01) <= adapt_beta(beta, hi, 0.01)


def test_normalize_moments():
    adv = normalize(np.random.default_rng(0).normal(3.0, 7.0, 1000))
    assert abs(adv.mean()) < 1e-10 and abs(adv.std() - 1.0) < 1e-10


def _learner(pk, v, cfg):
    return LearnerState.fresh(pk, v, cfg)


def test_update_zero_advantage_is_stationary():
    pk, v = random_policy(40), random_value(41)
    b = make_batch(pk, T=16, n=4)
    cfg = PpoConfig(epochs=3, minibatch_size=16)
    from marl_reach.ppo import AdvantageEstimate
    est = AdvantageEstimate(np.zeros((16, 4)), np.zeros((16, 4)))
    new, _, _, stats = update_policy(pk, v, b, est, cfg, _learner(pk, v, cfg), RngStream(0))
    assert np.max(np.abs(new.flat() - pk.flat())) < 1e-8
    assert stats.kl >= 0 and not stats.guard_tripped


def test_update_guard_returns_snapshot():
    pk, v = random_policy(42), random_value(43)
    b = make_batch(pk, T=8, n=2)
    b.old_log_probs[0, 0] -= 100.0
    cfg = PpoConfig(epochs=1, minibatch_size=8)
    est = compute_gae(b, v, 0.99, 0.95)
    learner = _learner(pk, v, cfg)
    new, vnew, lnew, stats = update_policy(pk, v, b, est, cfg, learner, RngStream(0))
    assert stats.guard_tripped and new is pk and vnew is v and lnew is learner


def test_update_improves_bandit():
    """One state, reward = first action component: the mean must move toward +x."""
    from marl_reach.nn import init_policy, init_value
    rng = RngStream(50)
    pk = init_policy(rng, np.ones(4), np.ones(9))
    v = init_value(rng, np.ones(9))
    cfg = PpoConfig(epochs=4, minibatch_size=64, policy_lr=1e-3)
    learner = _learner(pk, v, cfg)
    obs0 = np.zeros((64, 1, 9))
    start = pk.mean(np.zeros(9))[0]
    noise = RngStream(51)
    for _ in range(100):
        mean = pk.mean(obs0.reshape(-1, 9)).reshape(64, 1, 4)
        acts = mean + pk.std * noise.standard_normal((64, 1, 4))
        b = RolloutBatch(obs0, acts, acts[..., 0], np.ones((64, 1)),
                         log_prob(mean, pk.std, acts), np.zeros((64, 1)), np.zeros((1, 9)))
        est = compute_gae(b, v, 0.99, 0.95)
        pk, v, learner, stats = update_policy(pk, v, b, est, cfg, learner, RngStream(52))
        assert stats.kl >= 0
    assert pk.mean(np.zeros(9))[0] > start + 0.5
