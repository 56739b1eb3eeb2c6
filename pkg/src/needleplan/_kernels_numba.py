"""Numba-compiled inner loops: rollout, validity, polygon tests, gate frames.

Same contracts as `_kernels_numpy`; selected via NEEDLEPLAN_DISABLE_NUMBA.
"""

import numpy as np
from numba import njit

# validity reason codes shared by both backends
VALID = 0
OUT_OF_BOUNDS = 1
DEEP_TISSUE = 2
CONTROL_BOUNDS = 3
TISSUE_DAMAGE = 4

_CTRL_TOL = 1e-9


@njit(cache=True)
def wrap_angle(a):
    """Wrap an angle to (-pi, pi]."""
    w = (a + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return w


# rollout gate-stop modes
STOP_NONE = 0
STOP_ENTER_GATE = 1
STOP_EXIT_GATE = 2


@njit(cache=True)
def _in_gate(x, y, gx, gy, gc, gs, ghw, ghh):
    dx = x - gx
    dy = y - gy
    lx = gc * dx + gs * dy
    ly = -gs * dx + gc * dy
    return abs(lx) <= ghw and abs(ly) <= ghh


@njit(cache=True)
def rollout(x0, y0, th0, useg, vseg, steps, width, stop_at_exit,
            stop_mode=0, gx=0.0, gy=0.0, gth=0.0, ghw=0.0, ghh=0.0):
    """Apply piecewise-constant controls; returns (states (T+1,3), controls (T,2)).

    state_{i+1} = [x + v cos(th), y + v sin(th), wrap(th + u)].
    stop_at_exit truncates right after the first state with x > width.
    stop_mode additionally ends the trace at an action boundary: entering
    the given gate (STOP_ENTER_GATE) or leaving it after having been
    inside (STOP_EXIT_GATE); the boundary state is kept as the terminal.
    """
    total = 0
    for k in range(steps.shape[0]):
        total += steps[k]
    states = np.empty((total + 1, 3))
    controls = np.empty((total, 2))
    states[0, 0] = x0
    states[0, 1] = y0
    states[0, 2] = wrap_angle(th0)
    gc = np.cos(gth)
    gs = np.sin(gth)
    inside0 = _in_gate(x0, y0, gx, gy, gc, gs, ghw, ghh) if stop_mode != STOP_NONE else False
    been_inside = inside0
    if (stop_at_exit and x0 > width) or (stop_mode == STOP_ENTER_GATE and inside0) \
            or (stop_mode == STOP_EXIT_GATE and been_inside and not inside0):
        return states[:1], controls[:0]
    i = 0
    for k in range(useg.shape[0]):
        u = useg[k]
        v = vseg[k]
        for _ in range(steps[k]):
            x = states[i, 0]
            y = states[i, 1]
            th = states[i, 2]
            controls[i, 0] = u
            controls[i, 1] = v
            states[i + 1, 0] = x + v * np.cos(th)
            states[i + 1, 1] = y + v * np.sin(th)
            states[i + 1, 2] = wrap_angle(th + u)
            i += 1
            if stop_at_exit and states[i, 0] > width:
                return states[: i + 1], controls[:i]
            if stop_mode != STOP_NONE:
                ins = _in_gate(states[i, 0], states[i, 1], gx, gy, gc, gs, ghw, ghh)
                if stop_mode == STOP_ENTER_GATE and ins:
                    return states[: i + 1], controls[:i]
                if stop_mode == STOP_EXIT_GATE:
                    if ins:
                        been_inside = True
                    elif been_inside:
                        return states[: i + 1], controls[:i]
    return states, controls


@njit(cache=True)
def _point_in_poly(px, py, verts, lo, hi):
    """Even-odd ray cast against verts[lo:hi]."""
    inside = False
    j = hi - 1
    for i in range(lo, hi):
        xi = verts[i, 0]
        yi = verts[i, 1]
        xj = verts[j, 0]
        yj = verts[j, 1]
        if (yi > py) != (yj > py):
            xcross = (xj - xi) * (py - yi) / (yj - yi) + xi
            if px < xcross:
                inside = not inside
        j = i
    return inside


@njit(cache=True)
def _point_in_any(px, py, verts, offsets):
    for p in range(offsets.shape[0] - 1):
        if _point_in_poly(px, py, verts, offsets[p], offsets[p + 1]):
            return True
    return False


@njit(cache=True)
def points_in_polys(xy, verts, offsets):
    """For each row of xy: inside any of the packed polygons?"""
    n = xy.shape[0]
    out = np.zeros(n, dtype=np.bool_)
    if offsets.shape[0] <= 1:
        return out
    for i in range(n):
        out[i] = _point_in_any(xy[i, 0], xy[i, 1], verts, offsets)
    return out


@njit(cache=True)
def trace_validity(states, controls, deep_verts, deep_offs, tis_verts, tis_offs,
                   width, height, u_max, v_max, damage_rate, damage_budget):
    """First rule violation along the trace.

    Returns (code, index): VALID/-1 when clean. States are checked before
    the control applied at the same index; leaving through the right edge
    (x > width) is legal.
    """
    T = controls.shape[0]
    has_deep = deep_offs.shape[0] > 1
    has_tis = tis_offs.shape[0] > 1
    acc = 0.0
    for i in range(states.shape[0]):
        x = states[i, 0]
        y = states[i, 1]
        if x < 0.0 or y < 0.0 or y > height:
            return OUT_OF_BOUNDS, i
        if has_deep and _point_in_any(x, y, deep_verts, deep_offs):
            return DEEP_TISSUE, i
        if i < T:
            u = controls[i, 0]
            v = controls[i, 1]
            if abs(u) > u_max + _CTRL_TOL or v < -_CTRL_TOL or v > v_max + _CTRL_TOL:
                return CONTROL_BOUNDS, i
            if has_tis and _point_in_any(x, y, tis_verts, tis_offs):
                acc += abs(u) * damage_rate
                if acc > damage_budget:
                    return TISSUE_DAMAGE, i
    return VALID, -1


@njit(cache=True)
def gate_feature_rows(states, gx, gy, gth):
    """Per-state gate-frame features [along, across, dist, |angdiff|]."""
    n = states.shape[0]
    out = np.empty((n, 4))
    c = np.cos(gth)
    s = np.sin(gth)
    for i in range(n):
        dx = states[i, 0] - gx
        dy = states[i, 1] - gy
        out[i, 0] = c * dx + s * dy
        out[i, 1] = -s * dx + c * dy
        out[i, 2] = np.sqrt(dx * dx + dy * dy)
        out[i, 3] = abs(wrap_angle(gth - states[i, 2]))
    return out
