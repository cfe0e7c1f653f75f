import os
import subprocess
import sys

import numpy as np
import pytest

from marl_reach import kernels
from marl_reach.env import EnvConfig

BACKENDS = kernels.backends()


def random_state(n, seed):
    rng = np.random.default_rng(seed)
    pose = np.column_stack([rng.uniform(-0.6, 0.6, (n, 2)), rng.uniform(0.0, 1.1, n),
                            rng.uniform(-0.3, 0.3, (n, 2)), rng.uniform(-4, 4, n)])
    obj = np.column_stack([rng.uniform(-0.15, 0.15, (n, 2)), rng.uniform(-3, 3, n)])
    steps = rng.integers(0, 1200, n)
    actions = rng.normal(0, 0.03, (n, 4))
    return pose, obj, steps, actions


def test_compiled_backend_is_default_when_built():
    if "cython" in BACKENDS and os.environ.get("MARL_REACH_PURE") != "1":
        assert kernels.BACKEND == "cython"
    else:
        assert kernels.BACKEND == "python"


def test_pure_flag_forces_fallback():
    env = dict(os.environ, MARL_REACH_PURE="1")
    out = subprocess.run([sys.executable, "-c", "from marl_reach import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
@pytest.mark.parametrize("seed", range(5))
def test_step_batch_bit_identical(seed):
    params = EnvConfig(max_steps=1200).packed()
    results = []
    for mod in BACKENDS.values():
        pose, obj, steps, actions = random_state(500, seed)
        out = mod.step_batch(pose, obj, steps, actions, params)
        results.append((pose, steps, *out, mod.tip_distance(pose, obj, params)))
    for a, b in zip(*results):
        assert np.array_equal(a, b)


@pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled extension not built")
def test_training_identical_across_backends(tmp_path):
    code = ("import sys; from marl_reach.cli import main; "
            "sys.exit(main(['train', '--agents', '4', '--steps', '8192', '--seed', '5', "
            "'--out', sys.argv[1]]))")
    curves = []
    for pure in ("0", "1"):
        out = tmp_path / pure
        env = dict(os.environ, MARL_REACH_PURE=pure)
        subprocess.run([sys.executable, "-c", code, str(out)], env=env, check=True,
                       capture_output=True)
        curves.append((out / "updates.csv").read_bytes())
    assert curves[0] == curves[1]
