"""Seeded random streams, small dense linear algebra and a gradient oracle.

Every stochastic component of a run draws from its own :class:`RngStream`,
keyed by ``(seed, stream_id)``.  Streams are PCG64 generators seeded through
``numpy.random.SeedSequence`` with the stream id as spawn key, so streams with
different ids are independent and any stream can be replayed exactly.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from marl_reach.errors import ContractViolation, OracleFailure


class RngStream:
    def __init__(self, seed: int, stream_id: int = 0):
        if seed < 0 or stream_id < 0:
            raise ContractViolation("seed and stream_id must be non-negative")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream_id,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    @property
    def generator(self) -> np.random.Generator:
        return self._gen

    def uniform(self, lo: float, hi: float, size=None):
        if lo > hi:
            raise ContractViolation(f"empty interval [{lo}, {hi})")
        if lo == hi:
            return lo if size is None else np.full(size, lo, dtype=np.float64)
        return self._gen.uniform(lo, hi, size)

    def normal(self, mean: float = 0.0, std: float = 1.0, size=None):
        if not std > 0:
            raise ContractViolation(f"std must be positive, got {std}")
        return self._gen.normal(mean, std, size)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    # checkpoint support
    def get_state(self) -> dict:
        return {"seed": self.seed, "stream_id": self.stream_id,
                "bit_generator": self._gen.bit_generator.state}

    @classmethod
    def from_state(cls, state: dict) -> "RngStream":
        rng = cls(state["seed"], state["stream_id"])
        rng._gen.bit_generator.state = state["bit_generator"]
        return rng

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"


def _as_matrix(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ContractViolation(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def identity(n: int) -> np.ndarray:
    return np.eye(n, dtype=np.float64)


def zeros(rows: int, cols: int) -> np.ndarray:
    return np.zeros((rows, cols), dtype=np.float64)


def matvec(m, v) -> np.ndarray:
    """Return ``m @ v`` after checking shapes and finiteness."""
    m = _as_matrix(m)
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.shape[0] != m.shape[1]:
        raise ContractViolation(
            f"dimension mismatch: matrix {m.shape} times vector {v.shape}")
    if not np.all(np.isfinite(m)):
        raise ContractViolation("matrix has non-finite entries")
    return m @ v


def sample_uniform(rng: RngStream, lo: float, hi: float) -> float:
    return float(rng.uniform(lo, hi))


def sample_gaussian(rng: RngStream, mean: float, std: float) -> float:
    return float(rng.normal(mean, std))


def finite_difference_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference estimate of the gradient of ``f`` at ``x``."""
    if not h > 0:
        raise ContractViolation("step h must be positive")
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise OracleFailure(f"non-finite function value around component {i}")
        grad[i] = (fp - fm) / (2.0 * h)
    return grad.reshape(x.shape)
