"""Kinematic reaching task for a gripper above a bin.

The commanded Cartesian displacement is applied directly to the gripper pose
(after per-component clamping and clipping to the workspace).  Only the wrist
roll is actuated among the three Euler angles; yaw and pitch stay at their
home values.

Observation layout (9 values)::

    [x_g, y_g, z_g, yaw_g, pit_g, rol_g, x_og, y_og, rol_og]

where the last three give the object position rotated into the gripper's yaw
frame and the object roll relative to the gripper roll, wrapped to (-pi, pi].

Action layout (4 values): ``[dx, dy, dz, dphi]`` in metres / radians.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from marl_reach import kernels, kvfile
from marl_reach.errors import ConfigurationError, ContractViolation
from marl_reach.numerics import RngStream

OBS_DIM = 9
ACT_DIM = 4

RUNNING, CONTACT, TIMEOUT = 0, 1, 2
REASON_NAMES = {RUNNING: "none", CONTACT: "contact", TIMEOUT: "timeout"}


@dataclass(frozen=True)
class EnvConfig:
    max_steps: int = 1200
    contact_threshold: float = 0.008
    far_threshold: float = 1.0
    step_cost: float = 1.0
    distance_reward_scale: float = 10.0
    far_penalty: float = 1000.0
    success_bonus: float = 1000.0
    action_bound: tuple = (0.01, 0.01, 0.01, 0.05)
    # the floor keeps the fingertip at or above the bin surface (object_z)
    workspace_lo: tuple = (-0.5, -0.5, 0.05)
    workspace_hi: tuple = (0.5, 0.5, 1.05)
    spawn_lo: tuple = (-0.15, -0.15)
    spawn_hi: tuple = (0.15, 0.15)
    object_z: float = 0.0
    home_pose: tuple = (0.0, 0.0, 0.2, 0.0, 0.0, 0.0)
    fingertip_offset: float = 0.05

    def __post_init__(self):
        numbers = [v for f in dataclasses.fields(self) for v in np.ravel(getattr(self, f.name))]
        if not all(math.isfinite(float(v)) for v in numbers):
            raise ConfigurationError("all EnvConfig values must be finite")
        if self.max_steps < 1:
            raise ConfigurationError("max_steps must be >= 1")
        if not 0 <= self.contact_threshold < self.far_threshold:
            raise ConfigurationError("need 0 <= contact_threshold < far_threshold")
        if len(self.action_bound) != ACT_DIM or min(self.action_bound) <= 0:
            raise ConfigurationError("action_bound needs 4 positive entries")
        if any(lo > hi for lo, hi in zip(self.workspace_lo, self.workspace_hi)):
            raise ConfigurationError("workspace bounds are inverted")
        if any(lo > hi for lo, hi in zip(self.spawn_lo, self.spawn_hi)):
            raise ConfigurationError("spawn region bounds are inverted")
        if len(self.home_pose) != 6:
            raise ConfigurationError("home_pose needs 6 entries")
        home = np.asarray(self.home_pose[:3])
        if np.any(home < self.workspace_lo) or np.any(home > self.workspace_hi):
            raise ConfigurationError("home pose lies outside the workspace")

    def packed(self) -> np.ndarray:
        """Flat parameter vector consumed by the step kernels."""
        return np.array([*self.action_bound, *self.workspace_lo, *self.workspace_hi,
                         self.fingertip_offset, self.object_z, self.contact_threshold,
                         self.far_threshold, self.step_cost, self.distance_reward_scale,
                         self.far_penalty, self.success_bonus, float(self.max_steps)],
                        dtype=np.float64)

    def to_items(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        kvfile.write(path, self.to_items())

    @classmethod
    def load(cls, path) -> "EnvConfig":
        return kvfile.dataclass_from_items(cls, kvfile.read(path))


@dataclass
class EnvState:
    gripper: np.ndarray  # x, y, z, yaw, pitch, roll
    obj: np.ndarray  # x, y, roll
    step_count: int = 0
    done: bool = False

    def copy(self) -> "EnvState":
        return EnvState(self.gripper.copy(), self.obj.copy(), self.step_count, self.done)


@dataclass
class StepResult:
    observation: np.ndarray
    reward: float
    terminal: bool
    terminal_reason: str


def wrap_angle(x):
    """Wrap to (-pi, pi]."""
    return x - 2.0 * np.pi * np.ceil((x - np.pi) / (2.0 * np.pi))


def compute_reward(distance: float, contact: bool, config: EnvConfig = EnvConfig()) -> float:
    if not distance >= 0:
        raise ContractViolation(f"distance must be non-negative, got {distance}")
    if contact:
        return config.success_bonus
    if distance > config.far_threshold:
        return -config.far_penalty
    return -config.distance_reward_scale * distance - config.step_cost


def fingertip(gripper, config: EnvConfig = EnvConfig()) -> np.ndarray:
    x, y, z, yaw, pit = gripper[:5]
    f = config.fingertip_offset
    return np.array([x + f * (math.sin(pit) * math.cos(yaw)),
                     y + f * (math.sin(pit) * math.sin(yaw)),
                     z + f * (-math.cos(pit))])


def distance(state: EnvState, config: EnvConfig = EnvConfig()) -> float:
    d = kernels.tip_distance(np.ascontiguousarray(state.gripper[None, :], dtype=np.float64),
                             _obj_xyz(state.obj)[None, :], config.packed())
    return float(d[0])


def _obj_xyz(obj) -> np.ndarray:
    return np.ascontiguousarray(obj, dtype=np.float64)


def observe_batch(gripper: np.ndarray, obj: np.ndarray) -> np.ndarray:
    """Observations for ``(n, 6)`` gripper poses and ``(n, 3)`` object poses."""
    yaw = gripper[:, 3]
    c, s = np.cos(yaw), np.sin(yaw)
    dx = obj[:, 0] - gripper[:, 0]
    dy = obj[:, 1] - gripper[:, 1]
    out = np.empty((gripper.shape[0], OBS_DIM))
    out[:, :6] = gripper
    out[:, 6] = c * dx + s * dy
    out[:, 7] = -s * dx + c * dy
    out[:, 8] = wrap_angle(obj[:, 2] - gripper[:, 5])
    return out


def observe(state: EnvState) -> np.ndarray:
    return observe_batch(state.gripper[None, :], state.obj[None, :])[0]


def check_spawnable(config: EnvConfig) -> None:
    tip = fingertip(np.asarray(config.home_pose), config)
    far_x = max(abs(config.spawn_lo[0] - tip[0]), abs(config.spawn_hi[0] - tip[0]))
    far_y = max(abs(config.spawn_lo[1] - tip[1]), abs(config.spawn_hi[1] - tip[1]))
    if math.sqrt(far_x ** 2 + far_y ** 2 + (config.object_z - tip[2]) ** 2) <= config.contact_threshold:
        raise ConfigurationError("spawn region lies entirely within contact range of the home pose")


def sample_object(config: EnvConfig, rng: RngStream) -> np.ndarray:
    """Uniform object pose in the spawn region, redrawn while in contact range of home."""
    check_spawnable(config)
    tip = fingertip(np.asarray(config.home_pose), config)
    while True:
        x = rng.uniform(config.spawn_lo[0], config.spawn_hi[0])
        y = rng.uniform(config.spawn_lo[1], config.spawn_hi[1])
        roll = rng.uniform(-np.pi, np.pi)
        d = math.sqrt((x - tip[0]) ** 2 + (y - tip[1]) ** 2 + (config.object_z - tip[2]) ** 2)
        if d > config.contact_threshold:
            return np.array([x, y, roll], dtype=np.float64)


def reset(config: EnvConfig, rng: RngStream):
    state = EnvState(np.array(config.home_pose, dtype=np.float64), sample_object(config, rng))
    return state, observe(state)


def step(state: EnvState, action, config: EnvConfig = EnvConfig()):
    """Advance a single environment; returns ``(new_state, StepResult)``."""
    if state.done or state.step_count >= config.max_steps:
        raise ContractViolation("cannot step a terminated episode")
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACT_DIM,) or not np.all(np.isfinite(action)):
        raise ContractViolation(f"action must be 4 finite values, got {action!r}")
    new = state.copy()
    steps = np.array([new.step_count], dtype=np.int64)
    gripper = new.gripper[None, :].copy()
    rewards, _, reasons = kernels.step_batch(gripper, _obj_xyz(new.obj)[None, :], steps,
                                             action[None, :].copy(), config.packed())
    new.gripper = gripper[0]
    new.step_count = int(steps[0])
    reason = int(reasons[0])
    new.done = reason != RUNNING
    return new, StepResult(observe(new), float(rewards[0]), new.done, REASON_NAMES[reason])


class VecReacher:
    """``n`` independent reacher instances stepped together by the kernel.

    Each instance resets from its own :class:`RngStream`.
    """

    def __init__(self, config: EnvConfig, rngs: list):
        check_spawnable(config)
        self.config = config
        self.rngs = rngs
        self.n = len(rngs)
        self._params = config.packed()
        self.gripper = np.zeros((self.n, 6))
        self.obj = np.zeros((self.n, 3))
        self.steps = np.zeros(self.n, dtype=np.int64)
        for i in range(self.n):
            self.reset_one(i)

    def reset_one(self, i: int) -> None:
        self.gripper[i] = self.config.home_pose
        self.obj[i] = sample_object(self.config, self.rngs[i])
        self.steps[i] = 0

    def observe(self) -> np.ndarray:
        return observe_batch(self.gripper, self.obj)

    def step(self, actions: np.ndarray):
        """Step all instances; terminated ones are reset before returning.

        Returns ``(rewards, reasons)``.
        """
        actions = np.ascontiguousarray(actions, dtype=np.float64)
        if actions.shape != (self.n, ACT_DIM) or not np.all(np.isfinite(actions)):
            raise ContractViolation(f"bad action batch of shape {actions.shape}")
        rewards, _, reasons = kernels.step_batch(self.gripper, self.obj, self.steps,
                                                 actions, self._params)
        for i in np.flatnonzero(reasons):
            self.reset_one(int(i))
        return rewards, reasons

    def state(self, i: int) -> EnvState:
        return EnvState(self.gripper[i].copy(), self.obj[i].copy(), int(self.steps[i]))
