"""Kernel backend selection.

The hot inner loops (rollout, validity, polygon tests, gate frames) exist
twice: numba-compiled in `_kernels_numba` and vectorized numpy in
`_kernels_numpy`. Set NEEDLEPLAN_DISABLE_NUMBA=1 to force the numpy path;
it is also the automatic fallback when numba is unavailable.
"""

import os

import numpy as np

from . import _kernels_numpy

_flag = os.environ.get("NEEDLEPLAN_DISABLE_NUMBA", "").strip().lower()
if _flag in ("1", "true", "yes"):
    _impl = _kernels_numpy
    BACKEND = "numpy"
else:
    try:
        from . import _kernels_numba as _impl
        BACKEND = "numba"
    except ImportError:  # pragma: no cover - exercised only without numba
        _impl = _kernels_numpy
        BACKEND = "numpy"

VALID = _kernels_numpy.VALID
OUT_OF_BOUNDS = _kernels_numpy.OUT_OF_BOUNDS
DEEP_TISSUE = _kernels_numpy.DEEP_TISSUE
CONTROL_BOUNDS = _kernels_numpy.CONTROL_BOUNDS
TISSUE_DAMAGE = _kernels_numpy.TISSUE_DAMAGE

STOP_NONE = _kernels_numpy.STOP_NONE
STOP_ENTER_GATE = _kernels_numpy.STOP_ENTER_GATE
STOP_EXIT_GATE = _kernels_numpy.STOP_EXIT_GATE

wrap_angle = _impl.wrap_angle
rollout = _impl.rollout
points_in_polys = _impl.points_in_polys
trace_validity = _impl.trace_validity
gate_feature_rows = _impl.gate_feature_rows

_EMPTY_VERTS = np.zeros((0, 2))
_EMPTY_OFFS = np.zeros(1, dtype=np.int64)


def pack_polygons(polys):
    """Flatten a list of (m, 2) vertex arrays into (verts, offsets)."""
    if not polys:
        return _EMPTY_VERTS, _EMPTY_OFFS
    arrs = [np.asarray(p, dtype=float).reshape(-1, 2) for p in polys]
    offsets = np.zeros(len(arrs) + 1, dtype=np.int64)
    for i, a in enumerate(arrs):
        offsets[i + 1] = offsets[i] + a.shape[0]
    return np.concatenate(arrs, axis=0), offsets


def warmup():
    """Trigger JIT compilation of every kernel (no-op on the numpy path)."""
    states, controls = rollout(0.0, 0.0, 0.0, np.array([0.1]), np.array([1.0]),
                               np.array([3], dtype=np.int64), 100.0, True)
    rollout(0.0, 0.0, 0.0, np.array([0.1]), np.array([1.0]),
            np.array([3], dtype=np.int64), 100.0, True,
            STOP_ENTER_GATE, 2.0, 0.0, 0.1, 1.0, 2.0)
    verts, offs = pack_polygons([[(2.0, -1.0), (3.0, -1.0), (3.0, 1.0), (2.0, 1.0)]])
    points_in_polys(states[:, :2], verts, offs)
    trace_validity(states, controls, verts, offs, verts, offs,
                   100.0, 100.0, 1.0, 1.0, 1.0, 1.0)
    gate_feature_rows(states, 1.0, 2.0, 0.3)
