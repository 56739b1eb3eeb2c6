"""Vectorized numpy fallbacks for the numba kernels.

Same contracts as `_kernels_numba`; results agree within float rounding
(angle wrapping is applied once to the cumulative sum instead of per step).
"""

import numpy as np

VALID = 0
OUT_OF_BOUNDS = 1
DEEP_TISSUE = 2
CONTROL_BOUNDS = 3
TISSUE_DAMAGE = 4

_CTRL_TOL = 1e-9


def wrap_angle(a):
    w = (a + np.pi) % (2.0 * np.pi) - np.pi
    if w == -np.pi:
        w = np.pi
    return w


def _wrap_array(a):
    w = np.mod(a + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


STOP_NONE = 0
STOP_ENTER_GATE = 1
STOP_EXIT_GATE = 2


def rollout(x0, y0, th0, useg, vseg, steps, width, stop_at_exit,
            stop_mode=0, gx=0.0, gy=0.0, gth=0.0, ghw=0.0, ghh=0.0):
    total = int(steps.sum())
    u = np.repeat(useg, steps)
    v = np.repeat(vseg, steps)
    th = np.empty(total + 1)
    th[0] = wrap_angle(th0)
    if total:
        th[1:] = th[0] + np.cumsum(u)
        th = _wrap_array(th)
    x = np.empty(total + 1)
    y = np.empty(total + 1)
    x[0] = x0
    y[0] = y0
    if total:
        x[1:] = x0 + np.cumsum(v * np.cos(th[:-1]))
        y[1:] = y0 + np.cumsum(v * np.sin(th[:-1]))
    states = np.stack([x, y, th], axis=1)
    controls = np.stack([u, v], axis=1)

    cut = states.shape[0] - 1  # terminal index
    if stop_at_exit:
        past = np.nonzero(x > width)[0]
        if past.size:
            cut = min(cut, int(past[0]))
    if stop_mode != STOP_NONE:
        gc, gs = np.cos(gth), np.sin(gth)
        dx = x - gx
        dy = y - gy
        lx = gc * dx + gs * dy
        ly = -gs * dx + gc * dy
        inside = (np.abs(lx) <= ghw) & (np.abs(ly) <= ghh)
        if stop_mode == STOP_ENTER_GATE:
            hit = np.nonzero(inside)[0]
            if hit.size:
                cut = min(cut, int(hit[0]))
        else:  # STOP_EXIT_GATE: first outside state after having been inside
            been = np.logical_or.accumulate(inside)
            hit = np.nonzero(been & ~inside)[0]
            if hit.size:
                cut = min(cut, int(hit[0]))
    return states[: cut + 1], controls[:cut]


def _points_in_one_poly(xy, poly):
    px = xy[:, 0][:, None]
    py = xy[:, 1][:, None]
    xi = poly[:, 0][None, :]
    yi = poly[:, 1][None, :]
    xj = np.roll(poly[:, 0], 1)[None, :]
    yj = np.roll(poly[:, 1], 1)[None, :]
    straddle = (yi > py) != (yj > py)
    with np.errstate(divide="ignore", invalid="ignore"):
        xcross = (xj - xi) * (py - yi) / (yj - yi) + xi
    hits = straddle & (px < xcross)
    return np.sum(hits, axis=1) % 2 == 1


def points_in_polys(xy, verts, offsets):
    n = xy.shape[0]
    out = np.zeros(n, dtype=bool)
    for p in range(offsets.shape[0] - 1):
        poly = verts[offsets[p]: offsets[p + 1]]
        out |= _points_in_one_poly(xy, poly)
    return out


def trace_validity(states, controls, deep_verts, deep_offs, tis_verts, tis_offs,
                   width, height, u_max, v_max, damage_rate, damage_budget):
    T = controls.shape[0]
    x = states[:, 0]
    y = states[:, 1]
    n_states = states.shape[0]

    # candidate (code, index) pairs; the loop semantics pick the smallest
    # index, with state checks outranking the control check at equal index
    best_code = VALID
    best_idx = np.inf

    bounds_bad = (x < 0.0) | (y < 0.0) | (y > height)
    deep_bad = np.zeros(n_states, dtype=bool)
    if deep_offs.shape[0] > 1:
        deep_bad = points_in_polys(states[:, :2], deep_verts, deep_offs)
    state_bad = bounds_bad | deep_bad
    hit = np.nonzero(state_bad)[0]
    if hit.size:
        i = int(hit[0])
        best_code = OUT_OF_BOUNDS if bounds_bad[i] else DEEP_TISSUE
        best_idx = i

    if T:
        u = controls[:, 0]
        v = controls[:, 1]
        ctrl_bad = (np.abs(u) > u_max + _CTRL_TOL) | (v < -_CTRL_TOL) | (v > v_max + _CTRL_TOL)
        hit = np.nonzero(ctrl_bad)[0]
        if hit.size and hit[0] < best_idx:
            best_code = CONTROL_BOUNDS
            best_idx = int(hit[0])

        if tis_offs.shape[0] > 1:
            in_tis = points_in_polys(states[:T, :2], tis_verts, tis_offs)
            dmg = np.cumsum(np.abs(u) * damage_rate * in_tis)
            hit = np.nonzero(dmg > damage_budget)[0]
            if hit.size and hit[0] < best_idx:
                best_code = TISSUE_DAMAGE
                best_idx = int(hit[0])

    if best_code == VALID:
        return VALID, -1
    return best_code, int(best_idx)


def gate_feature_rows(states, gx, gy, gth):
    c = np.cos(gth)
    s = np.sin(gth)
    dx = states[:, 0] - gx
    dy = states[:, 1] - gy
    out = np.empty((states.shape[0], 4))
    out[:, 0] = c * dx + s * dy
    out[:, 1] = -s * dx + c * dy
    out[:, 2] = np.hypot(dx, dy)
    out[:, 3] = np.abs(_wrap_array(gth - states[:, 2]))
    return out
