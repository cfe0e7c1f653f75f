import numpy as np
import pytest

from marl_reach.nn import GaussianPolicyParams, ValueParams, init_params
from marl_reach.numerics import RngStream


def random_policy(seed, hidden=(8, 8), obs_dim=9, act_dim=4):
    rng = RngStream(seed, 99)
    trunk = init_params(rng, [obs_dim, *hidden, act_dim], output_gain=0.5)
    log_std = rng.normal(-1.0, 0.3, act_dim)
    scale = rng.uniform(0.5, 2.0, act_dim)
    return GaussianPolicyParams(trunk, log_std, scale, np.ones(obs_dim))


def random_value(seed, hidden=(8, 8), obs_dim=9):
    rng = RngStream(seed, 98)
    return ValueParams(init_params(rng, [obs_dim, *hidden, 1]), np.ones(obs_dim), 1.0)


def perturbed_policy(policy, seed, size=0.05):
    rng = np.random.default_rng(seed)
    flat = policy.flat()
    return policy.with_flat(flat + rng.normal(0, size, flat.size))


@pytest.fixture
def rng():
    return RngStream(2024, 0)


# acceptance criterion -> (status, detail); filled by test_acceptance.py
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        status, title, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"[{status}] {key}. {title}: {detail}")
