"""Compare the compiled and pure-numpy kernel backends.

    python benchmarks/bench_kernels.py [--repeat 5]

Times ``step_batch`` and ``gae`` on both backends, then a full rollout
(policy forward pass included) with each backend swapped in.
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from marl_reach import kernels
from marl_reach.env import EnvConfig
from marl_reach.orchestrator import TrainingConfig, build_scenario, collect_rollout
from marl_reach.perturbation import scenario_from_code


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def bench_step(mod, n, steps, repeat):
    params = EnvConfig().packed()
    rng = np.random.default_rng(0)
    actions = rng.normal(0, 0.01, (steps, n, 4))

    def run():
        pose = np.tile([0.0, 0.0, 0.2, 0.0, 0.0, 0.0], (n, 1))
        obj = np.column_stack([rng.uniform(-0.15, 0.15, (n, 2)), np.zeros(n)])
        count = np.zeros(n, dtype=np.int64)
        for a in actions:
            mod.step_batch(pose, obj, count, a, params)
            count[count >= 1200] = 0
    return best_of(run, repeat) / (steps * n)


def bench_gae(mod, T, n, repeat):
    rng = np.random.default_rng(1)
    args = (rng.normal(size=(T, n)), rng.normal(size=(T, n)),
            (rng.random((T, n)) < 0.01).astype(float), rng.normal(size=n), 0.99, 0.95)
    return best_of(lambda: mod.gae(*args), repeat)


def bench_rollout(mod, repeat):
    saved = (kernels.step_batch, kernels.tip_distance, kernels.gae)
    kernels.step_batch, kernels.tip_distance, kernels.gae = mod.step_batch, mod.tip_distance, mod.gae
    try:
        tc = TrainingConfig(n_agents=8, total_env_steps=2048)
        run = build_scenario(scenario_from_code("base", 8), tc)
        return best_of(lambda: collect_rollout(run), repeat) / tc.rollout_transitions
    finally:
        kernels.step_batch, kernels.tip_distance, kernels.gae = saved


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = kernels.backends()
    print(f"default backend: {kernels.BACKEND}; available: {', '.join(backends)}")
    rows = []
    for name, mod in backends.items():
        rows.append((name,
                     bench_step(mod, 8, 2000, args.repeat) * 1e9,
                     bench_step(mod, 256, 200, args.repeat) * 1e9,
                     bench_gae(mod, 256, 8, args.repeat) * 1e6,
                     bench_rollout(mod, args.repeat) * 1e6))
    print(f"{'backend':<8} {'step n=8':>14} {'step n=256':>14} {'gae 256x8':>12} {'rollout':>14}")
    print(f"{'':<8} {'ns/agent-step':>14} {'ns/agent-step':>14} {'us/call':>12} {'us/transition':>14}")
    for name, s8, s256, g, r in rows:
        print(f"{name:<8} {s8:14.1f} {s256:14.1f} {g:12.1f} {r:14.2f}")
    timings = {name: np.array(r) for name, *r in rows}
    if {"cython", "python"} <= set(timings):
        ratio = timings["python"] / timings["cython"]
        print("python/cython time ratio: " + ", ".join(f"{x:.1f}x" for x in ratio))


if __name__ == "__main__":
    main()
