import numpy as np
import pytest

from marl_reach.errors import ContractViolation, ScenarioParseError
from marl_reach.numerics import RngStream
from marl_reach.perturbation import (
    FIXED,
    INPUT,
    OUTPUT,
    SCENARIO_CODES,
    VARIABLE,
    PerturbationSpec,
    perturb_action,
    perturb_observation,
    scaled_count,
    scenario_from_code,
)

FIXED_IN = PerturbationSpec.fixed(INPUT, 0.005)
FIXED_OUT = PerturbationSpec.fixed(OUTPUT, 0.005)
VAR_IN = PerturbationSpec.variable(INPUT, 0.005, 0.01)
VAR_OUT = PerturbationSpec.variable(OUTPUT, 0.005, 0.01)


def test_fixed_input_all_nine():
    out = perturb_observation(FIXED_IN, np.zeros(9), RngStream(0))
    assert np.all(out == 0.005)


def test_identity_without_spec():
    obs = np.arange(9.0)
    assert perturb_observation(None, obs, RngStream(0)) is obs
    act = np.arange(4.0)
    assert perturb_action(None, act, RngStream(0)) is act


def test_variable_input_range_and_fresh_draws():
    rng = RngStream(1)
    obs = np.linspace(-1, 1, 9)
    outs = np.array([perturb_observation(VAR_IN, obs, rng) for _ in range(100)])
    diffs = outs - obs
    assert np.all((diffs >= 0.005) & (diffs < 0.01 + 1e-15))
    assert len({row.tobytes() for row in outs}) > 1
    # resampled per element, not one shared draw
    assert np.ptp(diffs[0]) > 0


def test_fixed_output_on_x_only():
    out = perturb_action(FIXED_OUT, np.zeros(4), RngStream(0))
    assert out.tolist() == [0.005, 0.0, 0.0, 0.0]


def test_variable_output_mean():
    rng = RngStream(2)
    added = np.array([perturb_action(VAR_OUT, np.zeros(4), rng)[0] for _ in range(10_000)])
    se = (0.005 / np.sqrt(12)) / np.sqrt(added.size)
    assert abs(added.mean() - 0.0075) < 3 * se


def test_variable_output_leaves_other_components():
    act = np.array([0.1, 0.2, 0.3, 0.4])
    out = perturb_action(VAR_OUT, act, RngStream(3))
    assert out[1:].tolist() == [0.2, 0.3, 0.4]
    assert act.tolist() == [0.1, 0.2, 0.3, 0.4]


def test_channel_mismatch():
    with pytest.raises(ContractViolation):
        perturb_observation(FIXED_OUT, np.zeros(9), RngStream(0))
    with pytest.raises(ContractViolation):
        perturb_action(FIXED_IN, np.zeros(4), RngStream(0))


def test_fixed_is_step_invariant():
    rng = RngStream(4)
    obs = np.linspace(0, 1, 9)
    outs = {perturb_observation(FIXED_IN, obs, rng).tobytes() for _ in range(50)}
    assert len(outs) == 1


def test_spec_validation():
    with pytest.raises(ContractViolation):
        PerturbationSpec.variable(INPUT, 0.01, 0.005)
    with pytest.raises(ContractViolation):
        PerturbationSpec(OUTPUT, FIXED, 0.005, axis_mask=(7,))


def test_if15_full_team():
    sc = scenario_from_code("IF15", 30)
    assert sc.perturbed_agents == 15
    for i, spec in enumerate(sc.per_agent_specs):
        if i < 15:
            assert (spec.channel, spec.kind, spec.fixed_offset) == (INPUT, FIXED, 0.005)
        else:
            assert spec is None


def test_base_has_no_specs():
    sc = scenario_from_code("base", 30)
    assert sc.perturbed_agents == 0 and sc.per_agent_specs == [None] * 30


def test_ofd25_distinct_offsets():
    sc = scenario_from_code("OFD25", 30)
    specs = sc.per_agent_specs
    offsets = [s.fixed_offset for s in specs[:25]]
    assert all(s.channel == OUTPUT and s.kind == FIXED for s in specs[:25])
    assert specs[25:] == [None] * 5
    assert offsets[0] == 0.005 and offsets[-1] == 0.025
    assert len(set(offsets)) == 25
    assert np.allclose(np.diff(offsets), 0.02 / 24)


def test_large_variants():
    for code, channel in (("IF15L", INPUT), ("OF15L", OUTPUT)):
        sc = scenario_from_code(code, 30)
        assert sc.perturbed_agents == 15
        assert all(s.fixed_offset == 0.015 and s.channel == channel for s in sc.per_agent_specs[:15])


def test_variable_codes():
    sc = scenario_from_code("OV25", 30)
    assert sc.perturbed_agents == 25
    assert sc.per_agent_specs[0].kind == VARIABLE
    assert sc.per_agent_specs[0].interval == (0.005, 0.01)


@pytest.mark.parametrize("code", SCENARIO_CODES)
def test_round_trip_all_codes(code):
    assert scenario_from_code(code, 30).code == code
    assert scenario_from_code(code, 8).code == code


def test_unknown_code_lists_valid():
    with pytest.raises(ScenarioParseError, match="IF15L"):
        scenario_from_code("IF10", 30)
    with pytest.raises(ScenarioParseError):
        scenario_from_code("IV15L", 30)


def test_scaled_counts_for_small_teams():
    assert [scaled_count(k, 30) for k in (5, 15, 25)] == [5, 15, 25]
    assert [scaled_count(k, 8) for k in (5, 15, 25)] == [1, 4, 7]
    sc = scenario_from_code("IFD25", 8)
    offsets = [s.fixed_offset for s in sc.per_agent_specs if s is not None]
    assert len(offsets) == 7 and offsets[0] == 0.005 and offsets[-1] == 0.025
