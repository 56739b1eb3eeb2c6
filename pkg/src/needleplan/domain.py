"""Deterministic Needle Master world.

Needle kinematics, levels (gates, tissue, deep tissue, bounds), latching
predicates, per-action feature functions, validity checking, scoring,
seeded level generation, and the level/demonstration file formats.

Conventions: one unit time step; angles wrapped to (-pi, pi]; a gate is an
oriented rectangle whose passage runs along its local x axis, with the
breakable bars covering the top and bottom fractions of its height. The
level is exited through the right edge (x > width); leaving through any
other edge is invalid.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from . import kernels
from .errors import GenerationError, InvalidArgumentError, ParseError

LEVEL_FORMAT = "needle-level"
DEMO_FORMAT = "needle-demo"
LEVEL_VERSION = 1
DEMO_VERSION = 1

# action kinds
APPROACH_GATE = "APPROACH_GATE"
PASS_THROUGH_GATE = "PASS_THROUGH_GATE"
CONNECT_GATES = "CONNECT_GATES"
MOVE_TO_EXIT = "MOVE_TO_EXIT"
DONE = "DONE"

MOTION_KINDS = (APPROACH_GATE, PASS_THROUGH_GATE, CONNECT_GATES, MOVE_TO_EXIT)

DYNAMICS_TOL = 1e-9


def wrap_angle(a):
    """Wrap a scalar angle to (-pi, pi]."""
    w = (a + math.pi) % (2.0 * math.pi) - math.pi
    return math.pi if w == -math.pi else w


@dataclass(frozen=True)
class NeedleState:
    x: float
    y: float
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", wrap_angle(float(self.theta)))

    def as_array(self):
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class Control:
    u: float  # rotation rate, radians/step
    v: float  # speed, units/step


@dataclass(frozen=True)
class Gate:
    x: float
    y: float
    theta: float
    width: float   # extent along the passage (local x)
    height: float  # extent across the passage (local y); bars sit at +-height/2
    bar_fraction: float = 0.25

    def __post_init__(self):
        if not (0.0 < self.bar_fraction < 0.5):
            raise InvalidArgumentError("bar_fraction must lie in (0, 0.5)")
        if self.width <= 0 or self.height <= 0:
            raise InvalidArgumentError("gate width/height must be positive")

    def to_local(self, x, y):
        """World point -> gate frame (rotate by -theta about the center)."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx, dy = x - self.x, y - self.y
        return c * dx + s * dy, -s * dx + c * dy

    def contains(self, x, y):
        lx, ly = self.to_local(x, y)
        return abs(lx) <= self.width / 2 and abs(ly) <= self.height / 2

    def in_bar(self, x, y):
        """Inside the gate AND within a top/bottom bar band."""
        lx, ly = self.to_local(x, y)
        if abs(lx) > self.width / 2 or abs(ly) > self.height / 2:
            return False
        return abs(ly) >= self.height / 2 - self.bar_fraction * self.height

    def side_of(self, x, y):
        """-1/+1 when beyond a long face (local |x| > width/2), else 0."""
        lx, _ = self.to_local(x, y)
        if lx < -self.width / 2:
            return -1
        if lx > self.width / 2:
            return 1
        return 0


def _proper_cross(a, b, c, d):
    """Segments ab and cd cross at interior points."""
    def orient(p, q, r):
        return (q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0])
    o1, o2 = orient(a, b, c), orient(a, b, d)
    o3, o4 = orient(c, d, a), orient(c, d, b)
    return (o1 * o2 < 0) and (o3 * o4 < 0)


def polygon_is_simple(poly):
    """No two non-adjacent edges properly intersect."""
    poly = np.asarray(poly, dtype=float)
    m = poly.shape[0]
    if m < 3:
        return False
    edges = [(poly[i], poly[(i + 1) % m]) for i in range(m)]
    for i in range(m):
        for j in range(i + 1, m):
            if j == i + 1 or (i == 0 and j == m - 1):
                continue
            if _proper_cross(*edges[i], *edges[j]):
                return False
    return True


@dataclass(frozen=True)
class Level:
    width: float
    height: float
    gates: tuple
    tissues: tuple = ()        # pink: rotation damage accrues inside
    deep_tissues: tuple = ()   # dark red: touching is fatal
    u_max: float = 0.35
    v_max: float = 1.0
    damage_rate: float = 1.0
    damage_budget: float = 2.0
    start_x: float = 1.0
    start_y: float = 10.0
    start_theta: float = 0.0
    level_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "gates", tuple(self.gates))
        for attr in ("tissues", "deep_tissues"):
            polys = tuple(np.asarray(p, dtype=float).reshape(-1, 2)
                          for p in getattr(self, attr))
            for i, p in enumerate(polys):
                if not polygon_is_simple(p):
                    raise InvalidArgumentError(f"{attr}[{i}] is not a simple polygon")
            object.__setattr__(self, attr, polys)

    @property
    def start_state(self):
        return NeedleState(self.start_x, self.start_y, self.start_theta)

    @cached_property
    def _deep_packed(self):
        return kernels.pack_polygons(self.deep_tissues)

    @cached_property
    def _tissue_packed(self):
        return kernels.pack_polygons(self.tissues)

    def in_deep_tissue(self, x, y):
        verts, offs = self._deep_packed
        return bool(kernels.points_in_polys(np.array([[x, y]]), verts, offs)[0])

    def in_tissue(self, x, y):
        verts, offs = self._tissue_packed
        return bool(kernels.points_in_polys(np.array([[x, y]]), verts, offs)[0])

    def states_in_tissue(self, states):
        verts, offs = self._tissue_packed
        return kernels.points_in_polys(np.ascontiguousarray(states[:, :2]), verts, offs)


@dataclass(frozen=True)
class PredicateSet:
    needle_in_gate: int | None
    has_prev_gate: bool
    gate_closed: tuple
    gate_open: tuple
    at_exit: bool


@dataclass
class Metrics:
    gates_entered: int = 0
    gates_cleared: int = 0
    gates_broken: int = 0
    finished: int = 0

    def as_dict(self):
        return {
            "gates_entered": self.gates_entered,
            "gates_cleared": self.gates_cleared,
            "gates_broken": self.gates_broken,
            "finished": self.finished,
        }


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def step(s: NeedleState, c: Control) -> NeedleState:
    """One needle step: translate along the current heading, then rotate."""
    return NeedleState(
        s.x + c.v * math.cos(s.theta),
        s.y + c.v * math.sin(s.theta),
        wrap_angle(s.theta + c.u),
    )


def rollout_primitives(s0: NeedleState, segments, width=math.inf, stop_at_exit=False,
                       stop_gate: Gate | None = None, gate_stop: str | None = None):
    """Roll out (u, v, t) primitives; each runs round(t) unit steps.

    Returns (states (T+1,3), controls (T,2)) as arrays; row i of controls
    is the control applied at state i. gate_stop ('enter' or 'exit') ends
    the trace at the named action boundary of stop_gate, mirroring where
    segmentation would switch labels.
    """
    segs = list(segments)
    useg = np.array([s[0] for s in segs], dtype=float)
    vseg = np.array([s[1] for s in segs], dtype=float)
    tseg = np.array([s[2] for s in segs], dtype=float)
    if np.any(tseg < 0):
        raise InvalidArgumentError("segment durations must be >= 0")
    steps = np.rint(tseg).astype(np.int64)
    mode = kernels.STOP_NONE
    gx = gy = gth = ghw = ghh = 0.0
    if gate_stop is not None:
        if stop_gate is None:
            raise InvalidArgumentError("gate_stop requires stop_gate")
        mode = {"enter": kernels.STOP_ENTER_GATE, "exit": kernels.STOP_EXIT_GATE}[gate_stop]
        gx, gy, gth = stop_gate.x, stop_gate.y, stop_gate.theta
        ghw, ghh = stop_gate.width / 2, stop_gate.height / 2
    return kernels.rollout(float(s0.x), float(s0.y), float(s0.theta),
                           useg, vseg, steps, float(width), bool(stop_at_exit),
                           mode, gx, gy, gth, ghw, ghh)


# ---------------------------------------------------------------------------
# Features
# ---------------------------------------------------------------------------

def gate_features(s: NeedleState, g: Gate):
    """[along, across, dist, |angdiff|] of the needle in the gate's frame."""
    return kernels.gate_feature_rows(s.as_array().reshape(1, 3), g.x, g.y, g.theta)[0]


@dataclass(frozen=True)
class ActionLabel:
    kind: str
    gates: tuple = ()

    def __post_init__(self):
        if self.kind not in MOTION_KINDS + (DONE,):
            raise InvalidArgumentError(f"unknown action kind {self.kind!r}")
        object.__setattr__(self, "gates", tuple(int(g) for g in self.gates))
        expected = {APPROACH_GATE: 1, PASS_THROUGH_GATE: 1, CONNECT_GATES: 2,
                    MOVE_TO_EXIT: 0, DONE: 0}[self.kind]
        if len(self.gates) != expected:
            raise InvalidArgumentError(
                f"{self.kind} takes {expected} gate parameter(s), got {len(self.gates)}")

    def validate(self, level):
        for g in self.gates:
            if not (0 <= g < len(level.gates)):
                raise InvalidArgumentError(f"{self} references missing gate {g}")

    def __str__(self):
        if self.gates:
            return f"{self.kind}({','.join(map(str, self.gates))})"
        return self.kind


def _gate_blocks(label: ActionLabel):
    if label.kind == APPROACH_GATE or label.kind == PASS_THROUGH_GATE:
        return [("gate", label.gates[0])]
    if label.kind == CONNECT_GATES:
        return [("prev", label.gates[0]), ("next", label.gates[1])]
    return []


def feature_names(label: ActionLabel):
    """Ordered entry names for the action's feature rows."""
    base = []
    for prefix, _ in _gate_blocks(label):
        base += [f"{prefix}_along", f"{prefix}_across", f"{prefix}_dist", f"{prefix}_angdiff"]
    if label.kind == MOVE_TO_EXIT:
        base = ["exit_dx"]
    core = base + ["abs_u"]
    return core + [f"d_{n}" for n in core] + ["in_tissue"]


def feature_core(states, controls, level, label: ActionLabel):
    """Core feature matrix: per-entity gate-frame blocks (or distance to
    the right edge for the exit action) followed by |u|. Shape (n, b+1)."""
    label.validate(level)
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    blocks = []
    for _, gi in _gate_blocks(label):
        g = level.gates[gi]
        blocks.append(kernels.gate_feature_rows(np.ascontiguousarray(states), g.x, g.y, g.theta))
    if label.kind == MOVE_TO_EXIT:
        blocks.append((level.width - states[:, 0])[:, None])
    blocks.append(np.abs(controls[:, 0])[:, None])
    return np.concatenate(blocks, axis=1)


def action_feature_rows(states, controls, level, label: ActionLabel, clip_start=True,
                        prev_core=None):
    """Feature rows for the steps of one clip.

    states is (n, 3) (one state per step, terminal state excluded),
    controls is (n, 2). Layout: the core entries, first differences of all
    core entries, then the in-tissue flag. The first row's differences are
    zero unless prev_core (the core row to difference against) is given.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float))
    n = states.shape[0]
    core = feature_core(states, controls, level, label)

    deltas = np.zeros_like(core)
    if n > 1:
        deltas[1:] = core[1:] - core[:-1]
    if prev_core is not None:
        if n > 0:
            deltas[0] = core[0] - prev_core
    elif not clip_start:
        raise InvalidArgumentError("prev_core is required when the row does not start a clip")

    in_tis = level.states_in_tissue(states).astype(float)[:, None]
    return np.concatenate([core, deltas, in_tis], axis=1)


def action_features(t, s: NeedleState, c: Control, level, label: ActionLabel, history=None):
    """Single feature row for step t; history supplies the previous core row."""
    prev_core = None if history is None else np.asarray(history, dtype=float)
    rows = action_feature_rows(s.as_array().reshape(1, 3),
                               np.array([[c.u, c.v]]), level, label,
                               clip_start=prev_core is None, prev_core=prev_core)
    return rows[0]


def goal_feature_row(state, level, label: ActionLabel):
    """Features of a bare state as the would-be first step of `label`."""
    return action_feature_rows(state.reshape(1, 3) if isinstance(state, np.ndarray)
                               else state.as_array().reshape(1, 3),
                               np.zeros((1, 2)), level, label)[0]


def transition_feature_row(states, controls, level, label: ActionLabel):
    """Feature row of a trajectory's final state under `label`, with
    differences taken against the incoming transition (how the endpoint is
    being approached); the last applied control stands in for the next one."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    controls = np.atleast_2d(np.asarray(controls, dtype=float)) if len(controls) \
        else np.zeros((0, 2))
    if states.shape[0] >= 2 and controls.shape[0] >= 1:
        last_c = controls[-1:].copy()
        prev = feature_core(states[-2:-1], last_c, level, label)[0]
        return action_feature_rows(states[-1:], last_c, level, label,
                                   prev_core=prev)[0]
    return action_feature_rows(states[-1:], np.zeros((1, 2)), level, label)[0]


# ---------------------------------------------------------------------------
# Predicates, validity, scoring
# ---------------------------------------------------------------------------

class TraceHistory:
    """Latching per-gate progress, updated state by state.

    A gate closes once the needle has entered and exited it, or broken it;
    a completed traversal counts as cleared when it crossed long face to
    long face, never touched a bar, and every earlier gate was already
    closed when the traversal finished.
    """

    def __init__(self, level: Level):
        self.level = level
        n = len(level.gates)
        self.inside = [False] * n
        self.entered = [False] * n
        self.broken = [False] * n
        self.closed = [False] * n
        self.cleared = [False] * n
        self.entry_side = [0] * n
        self.last_closed = None
        self._prev_xy = None

    def update(self, x, y):
        lvl = self.level
        for i, g in enumerate(lvl.gates):
            ins = g.contains(x, y)
            if ins:
                if not self.inside[i]:
                    self.inside[i] = True
                    self.entered[i] = True
                    if self._prev_xy is None:
                        self.entry_side[i] = 0
                    else:
                        self.entry_side[i] = g.side_of(*self._prev_xy)
                if g.in_bar(x, y):
                    self.broken[i] = True
                    if not self.closed[i]:
                        self.closed[i] = True
                        self.last_closed = i
            elif self.inside[i]:
                self.inside[i] = False
                exit_side = g.side_of(x, y)
                traversed = (self.entry_side[i] != 0 and exit_side != 0
                             and exit_side == -self.entry_side[i])
                order_ok = all(self.closed[j] for j in range(i))
                if not self.closed[i]:
                    self.closed[i] = True
                    self.last_closed = i
                if traversed and not self.broken[i] and order_ok:
                    self.cleared[i] = True
        self._prev_xy = (x, y)

    def predicates(self, state_x, state_y=None) -> PredicateSet:
        if state_y is None:  # accept a NeedleState
            state_x, state_y = state_x.x, state_x.y
        in_gate = None
        for i, flag in enumerate(self.inside):
            if flag:
                in_gate = i
                break
        closed = tuple(self.closed)
        opened = tuple(not c for c in closed)
        return PredicateSet(
            needle_in_gate=in_gate,
            has_prev_gate=any(closed) and any(opened),
            gate_closed=closed,
            gate_open=opened,
            at_exit=state_x > self.level.width,
        )


def eval_predicates(s: NeedleState, level: Level, history: TraceHistory) -> PredicateSet:
    """Advance the latching history with s and report the predicate set."""
    history.update(s.x, s.y)
    return history.predicates(s)


@dataclass(frozen=True)
class Validity:
    valid: bool
    reason: int = kernels.VALID
    first_bad: int = -1

    REASONS = {
        kernels.VALID: "valid",
        kernels.OUT_OF_BOUNDS: "out_of_bounds",
        kernels.DEEP_TISSUE: "deep_tissue",
        kernels.CONTROL_BOUNDS: "control_bounds",
        kernels.TISSUE_DAMAGE: "tissue_damage",
    }

    def __bool__(self):
        return self.valid

    @property
    def reason_name(self):
        return self.REASONS[self.reason]


def check_valid(states, controls, level: Level) -> Validity:
    """INVALID on deep tissue, out-of-bounds (right edge excepted), control
    bound violations, or exceeding the tissue damage budget."""
    states = np.ascontiguousarray(np.atleast_2d(np.asarray(states, dtype=float)))
    controls = np.ascontiguousarray(np.atleast_2d(np.asarray(controls, dtype=float))
                                    if len(controls) else np.zeros((0, 2)))
    dverts, doffs = level._deep_packed
    tverts, toffs = level._tissue_packed
    code, idx = kernels.trace_validity(
        states, controls, dverts, doffs, tverts, toffs,
        level.width, level.height, level.u_max, level.v_max,
        level.damage_rate, level.damage_budget)
    return Validity(code == kernels.VALID, int(code), int(idx))


def score(states, level: Level) -> Metrics:
    """Replay a trace against the game rules and count the four metrics."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    hist = TraceHistory(level)
    for i in range(states.shape[0]):
        hist.update(states[i, 0], states[i, 1])
    return Metrics(
        gates_entered=sum(hist.entered),
        gates_cleared=sum(hist.cleared),
        gates_broken=sum(hist.broken),
        finished=int(states[-1, 0] > level.width),
    )


# ---------------------------------------------------------------------------
# Demonstrations
# ---------------------------------------------------------------------------

@dataclass
class Demonstration:
    """Recorded trace: states (N+1, 3), controls (N+1, 2) where row i is the
    control applied at state i; the terminal row is a (0, 0) sentinel."""

    level_id: str
    states: np.ndarray
    controls: np.ndarray

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.states.shape[0] != self.controls.shape[0]:
            raise InvalidArgumentError("states and controls must have equal length")

    @property
    def n_steps(self):
        return self.states.shape[0] - 1

    def validate_dynamics(self):
        """Every transition must match step() within DYNAMICS_TOL."""
        for i in range(self.n_steps):
            s = NeedleState(*self.states[i])
            nxt = step(s, Control(*self.controls[i]))
            dx = abs(nxt.x - self.states[i + 1, 0])
            dy = abs(nxt.y - self.states[i + 1, 1])
            dth = abs(wrap_angle(nxt.theta - self.states[i + 1, 2]))
            if max(dx, dy, dth) > DYNAMICS_TOL:
                raise ParseError(
                    f"demonstration is not dynamics-consistent at step {i}", field="trace")


# ---------------------------------------------------------------------------
# Level generation
# ---------------------------------------------------------------------------

_GATE_W = 3.0
_GATE_H = 6.0
_LEVEL_W = 40.0
_LEVEL_H = 20.0


def _corridor_points(level_w, start_xy, gates):
    pts = [np.asarray(start_xy, dtype=float)]
    for g in gates:
        ax = np.array([math.cos(g.theta), math.sin(g.theta)])
        if ax[0] < 0:
            ax = -ax
        c = np.array([g.x, g.y])
        half = g.width / 2 + 5.0  # covers the demonstrator's lead-in
        pts += [c - half * ax, c, c + half * ax]
    last = pts[-1]
    pts.append(np.array([level_w + 2.0, last[1]]))
    return pts


def _dist_point_segment(p, a, b):
    ab = b - a
    denom = float(ab @ ab)
    t = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def _grid_path_exists(level: Level, cell=0.5):
    """Coarse 4-connected BFS start -> each gate center -> right edge."""
    nx = int(level.width / cell)
    ny = int(level.height / cell)
    verts, offs = level._deep_packed
    xs = (np.arange(nx) + 0.5) * cell
    ys = (np.arange(ny) + 0.5) * cell
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    blocked = kernels.points_in_polys(pts, verts, offs).reshape(nx, ny)

    def cell_of(p):
        return (min(nx - 1, max(0, int(p[0] / cell))),
                min(ny - 1, max(0, int(p[1] / cell))))

    waypoints = [np.array([level.start_x, level.start_y])]
    waypoints += [np.array([g.x, g.y]) for g in level.gates]

    def bfs(src, goal_cells):
        seen = np.zeros((nx, ny), dtype=bool)
        stack = [src]
        seen[src] = True
        while stack:
            nxt = []
            for cx, cy in stack:
                if (cx, cy) in goal_cells:
                    return True
                for dx2, dy2 in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ux, uy = cx + dx2, cy + dy2
                    if 0 <= ux < nx and 0 <= uy < ny and not seen[ux, uy] and not blocked[ux, uy]:
                        seen[ux, uy] = True
                        nxt.append((ux, uy))
            stack = nxt
        return False

    for i in range(len(waypoints) - 1):
        if not bfs(cell_of(waypoints[i]), {cell_of(waypoints[i + 1])}):
            return False
    right_edge = {(nx - 1, j) for j in range(ny) if not blocked[nx - 1, j]}
    return bfs(cell_of(waypoints[-1]), right_edge)


def _obstacle_polygon(rng, cx, cy, radius):
    # evenly spaced jittered angles keep every gap under pi, so the shape
    # is star-shaped about its center and therefore simple
    n = int(rng.integers(4, 7))
    base = 2.0 * math.pi * np.arange(n) / n
    angles = base + rng.uniform(0.08, 0.92, n) * (2.0 * math.pi / n)
    radii = rng.uniform(0.55 * radius, radius, n)
    return np.stack([cx + radii * np.cos(angles), cy + radii * np.sin(angles)], axis=1)


def generate_level(n_gates, n_obstacles, seed, n_tissues=0, level_id=None,
                   max_retries=200) -> Level:
    """Seeded random level: gates left to right, obstacles off the corridor.

    Gate orientations stay within +-45 degrees of the left-to-right passage
    direction. Obstacle (deep tissue) placement keeps a margin around the
    start -> gate -> exit corridor and the result must pass a coarse grid
    feasibility search; failures retry with fresh draws.
    """
    if n_gates < 1:
        raise InvalidArgumentError("n_gates must be >= 1")
    rng = np.random.default_rng(seed)
    W, H = _LEVEL_W, _LEVEL_H
    start = (1.0, H / 2.0)

    # at least one gate width apart (the published rule); in practice use
    # 2.5 widths when the level has room, so approach lead-ins fit between
    span = 0.78 * W - 0.22 * W
    min_gap = max(_GATE_W, min(2.5 * _GATE_W, 0.8 * span / max(n_gates, 1)))

    for _ in range(max_retries):
        lo, hi = 0.22 * W, 0.78 * W
        slots = np.linspace(lo, hi, n_gates + 1)
        gates = []
        ok = True
        for i in range(n_gates):
            gxlo, gxhi = slots[i], slots[i + 1] - _GATE_W
            if gxhi <= gxlo:
                ok = False
                break
            gx = float(rng.uniform(gxlo, gxhi))
            gy = float(rng.uniform(0.3 * H, 0.7 * H))
            gth = float(rng.uniform(-math.pi / 4, math.pi / 4))
            gates.append(Gate(gx, gy, gth, _GATE_W, _GATE_H))
        if not ok:
            continue
        if any(gates[i + 1].x - gates[i].x < min_gap for i in range(n_gates - 1)):
            continue

        corridor = _corridor_points(W, start, gates)
        segs = [(corridor[i], corridor[i + 1]) for i in range(len(corridor) - 1)]

        def off_corridor(cx, cy, rad, margin=3.5):
            p = np.array([cx, cy])
            return all(_dist_point_segment(p, a, b) > rad + margin for a, b in segs)

        obstacles = []
        tries = 0
        while len(obstacles) < n_obstacles and tries < 200:
            tries += 1
            rad = float(rng.uniform(1.2, 2.4))
            cx = float(rng.uniform(0.15 * W, 0.9 * W))
            cy = float(rng.uniform(0.1 * H, 0.9 * H))
            if not off_corridor(cx, cy, rad):
                continue
            if any(math.hypot(cx - g.x, cy - g.y) < rad + _GATE_H for g in gates):
                continue
            obstacles.append(_obstacle_polygon(rng, cx, cy, rad))
        if len(obstacles) < n_obstacles:
            continue

        tissues = []
        tries = 0
        while len(tissues) < n_tissues and tries < 200:
            tries += 1
            rad = float(rng.uniform(2.0, 3.5))
            cx = float(rng.uniform(0.2 * W, 0.8 * W))
            cy = float(rng.uniform(0.2 * H, 0.8 * H))
            if any(math.hypot(cx - g.x, cy - g.y) < rad + 0.8 * _GATE_H for g in gates):
                continue
            tissues.append(_obstacle_polygon(rng, cx, cy, rad))
        if len(tissues) < n_tissues:
            continue

        level = Level(width=W, height=H, gates=tuple(gates),
                      tissues=tuple(tissues), deep_tissues=tuple(obstacles),
                      start_x=start[0], start_y=start[1], start_theta=0.0,
                      level_id=level_id or f"gen-{seed}")
        if _grid_path_exists(level):
            return level
    raise GenerationError(
        f"could not generate a feasible level in {max_retries} attempts (seed={seed})")


# ---------------------------------------------------------------------------
# File formats (versioned JSON; floats round-trip exactly via repr)
# ---------------------------------------------------------------------------

def _require(obj, key, where):
    if key not in obj:
        raise ParseError(f"missing field '{key}' in {where}", field=key)
    return obj[key]


def level_to_dict(level: Level):
    return {
        "format": LEVEL_FORMAT,
        "version": LEVEL_VERSION,
        "level_id": level.level_id,
        "width": level.width,
        "height": level.height,
        "start": [level.start_x, level.start_y, level.start_theta],
        "u_max": level.u_max,
        "v_max": level.v_max,
        "damage_rate": level.damage_rate,
        "damage_budget": level.damage_budget,
        "gates": [
            {"x": g.x, "y": g.y, "theta": g.theta, "width": g.width,
             "height": g.height, "bar_fraction": g.bar_fraction}
            for g in level.gates
        ],
        "tissues": [p.tolist() for p in level.tissues],
        "deep_tissues": [p.tolist() for p in level.deep_tissues],
    }


def level_from_dict(obj) -> Level:
    if _require(obj, "format", "level file") != LEVEL_FORMAT:
        raise ParseError(f"unexpected format {obj['format']!r}", field="format")
    if _require(obj, "version", "level file") != LEVEL_VERSION:
        raise ParseError(f"unsupported level version {obj['version']!r}", field="version")
    gates = []
    for i, g in enumerate(_require(obj, "gates", "level file")):
        try:
            gates.append(Gate(float(g["x"]), float(g["y"]), float(g["theta"]),
                              float(g["width"]), float(g["height"]),
                              float(g.get("bar_fraction", 0.25))))
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"bad field gates[{i}]: {e}", field=f"gates[{i}]") from e
    start = _require(obj, "start", "level file")
    if not (isinstance(start, list) and len(start) == 3):
        raise ParseError("field 'start' must be [x, y, theta]", field="start")
    try:
        return Level(
            width=float(_require(obj, "width", "level file")),
            height=float(_require(obj, "height", "level file")),
            gates=tuple(gates),
            tissues=tuple(np.asarray(p, dtype=float) for p in obj.get("tissues", [])),
            deep_tissues=tuple(np.asarray(p, dtype=float) for p in obj.get("deep_tissues", [])),
            u_max=float(_require(obj, "u_max", "level file")),
            v_max=float(_require(obj, "v_max", "level file")),
            damage_rate=float(_require(obj, "damage_rate", "level file")),
            damage_budget=float(_require(obj, "damage_budget", "level file")),
            start_x=float(start[0]), start_y=float(start[1]), start_theta=float(start[2]),
            level_id=str(obj.get("level_id", "")),
        )
    except (TypeError, ValueError) as e:
        raise ParseError(f"bad numeric field in level file: {e}") from e


def save_level(level: Level, path):
    with open(path, "w") as f:
        json.dump(level_to_dict(level), f, indent=1)
        f.write("\n")


def load_level(path) -> Level:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
    return level_from_dict(obj)


def demo_to_dict(demo: Demonstration):
    rows = []
    for i in range(demo.states.shape[0]):
        rows.append([i, demo.states[i, 0], demo.states[i, 1], demo.states[i, 2],
                     demo.controls[i, 0], demo.controls[i, 1]])
    return {
        "format": DEMO_FORMAT,
        "version": DEMO_VERSION,
        "level_id": demo.level_id,
        "columns": ["t", "x", "y", "theta", "u", "v"],
        "trace": rows,
    }


def demo_from_dict(obj, validate=True) -> Demonstration:
    if _require(obj, "format", "demo file") != DEMO_FORMAT:
        raise ParseError(f"unexpected format {obj['format']!r}", field="format")
    if _require(obj, "version", "demo file") != DEMO_VERSION:
        raise ParseError(f"unsupported demo version {obj['version']!r}", field="version")
    rows = _require(obj, "trace", "demo file")
    if not rows:
        raise ParseError("empty trace", field="trace")
    states = np.empty((len(rows), 3))
    controls = np.empty((len(rows), 2))
    for i, row in enumerate(rows):
        if not (isinstance(row, list) and len(row) == 6):
            raise ParseError(f"trace row {i} must have 6 entries", field="trace")
        try:
            states[i] = [float(row[1]), float(row[2]), float(row[3])]
            controls[i] = [float(row[4]), float(row[5])]
        except (TypeError, ValueError) as e:
            raise ParseError(f"bad number in trace row {i}: {e}", field="trace") from e
    demo = Demonstration(str(_require(obj, "level_id", "demo file")), states, controls)
    if validate:
        demo.validate_dynamics()
    return demo


def save_demo(demo: Demonstration, path):
    with open(path, "w") as f:
        json.dump(demo_to_dict(demo), f, indent=1)
        f.write("\n")


def load_demo(path, validate=True) -> Demonstration:
    try:
        with open(path) as f:
            obj = json.load(f)
    except json.JSONDecodeError as e:
        raise ParseError(f"invalid JSON at line {e.lineno} col {e.colno}: {e.msg}") from e
    return demo_from_dict(obj, validate=validate)
