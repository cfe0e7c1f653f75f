"""Backend selection for the hot kernels.

The compiled extension is used when it imports; otherwise the numpy fallback.
Set ``MARL_REACH_PURE=1`` to force the fallback.
"""
import os

from marl_reach import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("MARL_REACH_PURE", "") not in ("1", "true", "yes"):
    try:
        from marl_reach import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "cython"

step_batch = _impl.step_batch
tip_distance = _impl.tip_distance
gae = _impl.gae


def backends():
    """Map of backend name to kernel module, for benchmarks and equivalence tests."""
    out = {"python": _kernels_py}
    try:
        from marl_reach import _kernels as compiled
        out["cython"] = compiled
    except ImportError:
        pass
    return out
