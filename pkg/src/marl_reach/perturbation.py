"""Sensing and actuation disturbances applied per agent.

A scenario code names which channel is disturbed (``I`` input / ``O`` output),
whether the error is fixed or redrawn every step (``F`` / ``V``), and how many
agents out of a 30-agent team are affected (5, 15 or 25).  Two extra families
exist: ``L`` (larger 0.015 m fixed offset, 15 agents) and ``D`` (25 agents,
each with its own fixed offset between 0.005 m and 0.025 m).

For teams that are not 30 strong the affected count is scaled proportionally.
"""
from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from marl_reach.errors import ContractViolation, ScenarioParseError
from marl_reach.numerics import RngStream

INPUT, OUTPUT = "input", "output"
FIXED, VARIABLE = "fixed", "variable"

SMALL_OFFSET = 0.005
LARGE_OFFSET = 0.015
VARIABLE_INTERVAL = (0.005, 0.01)
DISTINCT_RANGE = (0.005, 0.025)
REFERENCE_TEAM = 30

SCENARIO_CODES = (
    "base",
    "IF5", "IF15", "IF25", "IV5", "IV15", "IV25",
    "OF5", "OF15", "OF25", "OV5", "OV15", "OV25",
    "IF15L", "OF15L", "IFD25", "OFD25",
)

_CODE_RE = re.compile(r"^(?P<ch>[IO])(?P<kind>[FV])(?P<dist>D)?(?P<count>5|15|25)(?P<large>L)?$")


@dataclass(frozen=True)
class PerturbationSpec:
    channel: str
    kind: str
    fixed_offset: float = 0.0
    interval: tuple = (0.0, 0.0)
    axis_mask: tuple = ()

    def __post_init__(self):
        if self.channel not in (INPUT, OUTPUT) or self.kind not in (FIXED, VARIABLE):
            raise ContractViolation(f"bad channel/kind {self.channel}/{self.kind}")
        if not self.axis_mask:
            default = tuple(range(9)) if self.channel == INPUT else (0,)
            object.__setattr__(self, "axis_mask", default)
        if self.kind == VARIABLE and self.interval[0] > self.interval[1]:
            raise ContractViolation(f"inverted interval {self.interval}")
        width = 9 if self.channel == INPUT else 4
        if any(not 0 <= k < width for k in self.axis_mask):
            raise ContractViolation(f"axis mask {self.axis_mask} out of range for {self.channel}")

    @classmethod
    def fixed(cls, channel: str, offset: float) -> "PerturbationSpec":
        return cls(channel, FIXED, fixed_offset=float(offset))

    @classmethod
    def variable(cls, channel: str, lo: float, hi: float) -> "PerturbationSpec":
        return cls(channel, VARIABLE, interval=(float(lo), float(hi)))

    def offsets(self, rng: RngStream) -> np.ndarray:
        """Additive error for the masked components, one value per component."""
        if self.kind == FIXED:
            return np.full(len(self.axis_mask), self.fixed_offset)
        return np.asarray(rng.uniform(self.interval[0], self.interval[1], len(self.axis_mask)),
                          dtype=np.float64)

    def to_items(self) -> dict:
        return {"channel": self.channel, "kind": self.kind, "fixed_offset": self.fixed_offset,
                "interval": self.interval, "axis_mask": self.axis_mask}


def perturb_observation(spec: Optional[PerturbationSpec], obs, rng: RngStream):
    if spec is None:
        return obs
    if spec.channel != INPUT:
        raise ContractViolation("observation perturbation needs an input-channel spec")
    out = np.array(obs, dtype=np.float64)
    out[list(spec.axis_mask)] += spec.offsets(rng)
    return out


def perturb_action(spec: Optional[PerturbationSpec], action, rng: RngStream):
    if spec is None:
        return action
    if spec.channel != OUTPUT:
        raise ContractViolation("action perturbation needs an output-channel spec")
    out = np.array(action, dtype=np.float64)
    out[list(spec.axis_mask)] += spec.offsets(rng)
    return out


@dataclass
class ScenarioConfig:
    code: str
    n_agents: int
    perturbed_agents: int
    per_agent_specs: list = field(default_factory=list)

    def __post_init__(self):
        if len(self.per_agent_specs) != self.n_agents:
            raise ContractViolation("need one (possibly empty) spec per agent")
        if self.perturbed_agents > self.n_agents:
            raise ContractViolation("more perturbed agents than agents")
        if sum(s is not None for s in self.per_agent_specs) != self.perturbed_agents:
            raise ContractViolation("perturbed_agents disagrees with per-agent specs")

    def to_items(self) -> dict:
        items = {"scenario": self.code, "n_agents": self.n_agents,
                 "perturbed_agents": self.perturbed_agents}
        for i, spec in enumerate(self.per_agent_specs):
            if spec is not None:
                for k, v in spec.to_items().items():
                    items[f"agent{i}.{k}"] = v
        return items


def scaled_count(count: int, n_agents: int) -> int:
    """Affected agents out of ``n_agents`` for a count stated out of 30."""
    return min(n_agents, int(math.floor(count * n_agents / REFERENCE_TEAM + 0.5)))


def scenario_from_code(code: str, n_agents: int = REFERENCE_TEAM) -> ScenarioConfig:
    if n_agents < 1:
        raise ContractViolation("n_agents must be >= 1")
    if code == "base":
        return ScenarioConfig(code, n_agents, 0, [None] * n_agents)
    m = _CODE_RE.match(code)
    if m is None or code not in SCENARIO_CODES:
        raise ScenarioParseError(f"unknown scenario {code!r}; valid codes: {', '.join(SCENARIO_CODES)}")
    channel = INPUT if m["ch"] == "I" else OUTPUT
    k = scaled_count(int(m["count"]), n_agents)
    if m["dist"]:
        offsets = np.linspace(*DISTINCT_RANGE, k) if k > 1 else np.array([DISTINCT_RANGE[0]])
        specs = [PerturbationSpec.fixed(channel, float(o)) for o in offsets]
    elif m["kind"] == "V":
        specs = [PerturbationSpec.variable(channel, *VARIABLE_INTERVAL)] * k
    else:
        specs = [PerturbationSpec.fixed(channel, LARGE_OFFSET if m["large"] else SMALL_OFFSET)] * k
    return ScenarioConfig(code, n_agents, k, specs + [None] * (n_agents - k))
