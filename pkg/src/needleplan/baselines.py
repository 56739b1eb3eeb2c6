"""Comparison methods: greedy Naive control and the No-Goal planner variant."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import kernels
from .domain import (
    Control, Level, NeedleState, TraceHistory, feature_core, step,
    wrap_angle as _wrap,
)
from .optimizer import OptimizerConfig, PlanResult, plan_task
from .skills import SkillBundle, SkillChain, label_from_predicates


@dataclass(frozen=True)
class ControlGrid:
    """Candidate (u, v) pairs; both grids carry their endpoints and u=0."""

    u: np.ndarray
    v: np.ndarray

    @staticmethod
    def for_level(level: Level, n_u=21, n_v=11):
        return ControlGrid(np.linspace(-level.u_max, level.u_max, n_u),
                           np.linspace(0.0, level.v_max, n_v))

    def candidates(self):
        """All pairs, ordered so np.argmax tie-breaks toward smaller |u|
        then larger v."""
        uu, vv = np.meshgrid(self.u, self.v, indexing="ij")
        cand = np.stack([uu.reshape(-1), vv.reshape(-1)], axis=1)
        order = np.lexsort((-cand[:, 1], np.abs(cand[:, 0])))
        return cand[order]


def _candidate_states(s: NeedleState, cand):
    cos_t, sin_t = math.cos(s.theta), math.sin(s.theta)
    nxt = np.empty((cand.shape[0], 3))
    nxt[:, 0] = s.x + cand[:, 1] * cos_t
    nxt[:, 1] = s.y + cand[:, 1] * sin_t
    nxt[:, 2] = s.theta + cand[:, 0]  # wrap is irrelevant to the features used
    return nxt


# minimum rightward progress per step, as a fraction of v_max; the game
# scrolls left to right and the needle never stalls or backtracks
_PROGRESS_FLOOR = 0.1


def _prune(s: NeedleState, nxt, cand, level: Level):
    """Candidate filter. Tier one demands the forward-progress floor; when
    an obstacle blocks the whole forward fan, tier two admits sideways
    (non-backward, moving) candidates so the needle can slide along the
    obstacle face. Without these rules a frozen, backward-crawling, or
    wall-riding pose is a fixed point of the greedy argmax and the level
    never terminates."""
    legal = (nxt[:, 1] >= 0.0) & (nxt[:, 1] <= level.height)
    dverts, doffs = level._deep_packed
    if doffs.shape[0] > 1:
        legal &= ~kernels.points_in_polys(np.ascontiguousarray(nxt[:, :2]), dverts, doffs)
    keep = legal & (nxt[:, 0] - s.x >= _PROGRESS_FLOOR * level.v_max)
    if not keep.any():
        keep = legal & (cand[:, 1] > 0.0) & (nxt[:, 0] >= s.x - 1e-12)
    return keep


def candidate_log_probs(skill, label, s: NeedleState, nxt, cand, level: Level,
                        prev_u=0.0):
    """Expert log-likelihood of each candidate's one-step-lookahead row."""
    cur_core = feature_core(s.as_array().reshape(1, 3),
                            np.array([[prev_u, 0.0]]), level, label)[0]
    core = feature_core(nxt, cand, level, label)
    deltas = core - cur_core
    in_tis = level.states_in_tissue(nxt).astype(float)[:, None]
    rows = np.concatenate([core, deltas, in_tis], axis=1)
    return skill.log_density_rows(rows)


def naive_step(skill, label, s: NeedleState, level: Level, history: TraceHistory,
               grid: ControlGrid, prev_u=0.0) -> Control:
    """One-step-lookahead greedy control under a single active skill.

    Simulates every grid candidate one step, scores the resulting feature
    row, and returns the argmax; pruned candidates (walls, deep tissue,
    no-ops) are excluded. When everything is pruned (cornered against a
    wall) the needle rotates in place toward the level center.
    """
    cand = grid.candidates()
    nxt = _candidate_states(s, cand)
    keep = _prune(s, nxt, cand, level)
    if not keep.any():
        # cornered: rotate in place toward the exit until the forward fan
        # clears (the exit bearing always has a rightward component)
        bearing = math.atan2(level.height / 2 - s.y, level.width + 2.0 - s.x)
        turn = math.copysign(level.u_max, _wrap(bearing - s.theta))
        return Control(turn, 0.0)
    lp = candidate_log_probs(skill, label, s, nxt, cand, level, prev_u=prev_u)
    lp[~keep] = -np.inf
    j = int(np.argmax(lp))
    return Control(float(cand[j, 0]), float(cand[j, 1]))


def instantiable_actions(preds, history: TraceHistory):
    """Actions whose entity parameters are determined by the predicates."""
    from .domain import (APPROACH_GATE, CONNECT_GATES, MOVE_TO_EXIT,
                         PASS_THROUGH_GATE, ActionLabel)

    actions = [ActionLabel(MOVE_TO_EXIT)]
    if preds.needle_in_gate is not None:
        actions.append(ActionLabel(PASS_THROUGH_GATE, (preds.needle_in_gate,)))
    elif any(preds.gate_open):
        nxt = preds.gate_open.index(True)
        actions.append(ActionLabel(APPROACH_GATE, (nxt,)))
        if preds.has_prev_gate:
            actions.append(ActionLabel(CONNECT_GATES, (history.last_closed, nxt)))
    return actions


def naive_policy_step(bundle: SkillBundle, s: NeedleState, level: Level,
                      history: TraceHistory, grid: ControlGrid, prev_u=0.0):
    """Joint greedy step: the (action, u, v) triple with the highest expert
    likelihood among the actions the current predicates make available."""
    cand = grid.candidates()
    nxt = _candidate_states(s, cand)
    keep = _prune(s, nxt, cand, level)
    if not keep.any():
        # cornered: rotate in place toward the exit until the forward fan
        # clears (the exit bearing always has a rightward component)
        bearing = math.atan2(level.height / 2 - s.y, level.width + 2.0 - s.x)
        turn = math.copysign(level.u_max, _wrap(bearing - s.theta))
        return Control(turn, 0.0)
    preds = history.predicates(s)
    best = None
    for label in instantiable_actions(preds, history):
        skill = bundle.require(label.kind)
        lp = candidate_log_probs(skill, label, s, nxt, cand, level, prev_u=prev_u)
        lp[~keep] = -np.inf
        j = int(np.argmax(lp))
        if best is None or lp[j] > best[0]:
            best = (float(lp[j]), Control(float(cand[j, 0]), float(cand[j, 1])))
    return best[1]


def default_max_steps(level: Level):
    """4x the straight-line crossing step count at the progress floor:
    enough headroom that the forward-progress guarantee can terminate."""
    return 4 * int(math.ceil(level.width / (_PROGRESS_FLOOR * level.v_max)))


def run_naive(bundle: SkillBundle, level: Level, s0: NeedleState | None = None,
              max_steps=None, grid: ControlGrid | None = None):
    """Greedy rollout until AT-EXIT or max_steps; returns (states, controls)."""
    s = s0 or level.start_state
    max_steps = max_steps or default_max_steps(level)
    grid = grid or ControlGrid.for_level(level)
    hist = TraceHistory(level)
    hist.update(s.x, s.y)
    states = [[s.x, s.y, s.theta]]
    controls = []
    prev_u = 0.0
    for _ in range(max_steps):
        if hist.predicates(s).at_exit:
            break
        c = naive_policy_step(bundle, s, level, hist, grid, prev_u=prev_u)
        s = step(s, c)
        hist.update(s.x, s.y)
        states.append([s.x, s.y, s.theta])
        controls.append([c.u, c.v])
        prev_u = c.u
    return np.array(states), np.array(controls) if controls else np.zeros((0, 2))


def plan_no_goal(chain: SkillChain, bundle: SkillBundle, level: Level,
                 s0: NeedleState | None = None,
                 cfg: OptimizerConfig | None = None) -> PlanResult:
    """plan_task with every successor forced to none (no goal coupling)."""
    stripped = SkillChain(tuple((lab, None) for lab, _ in chain.elements))
    return plan_task(stripped, bundle, level, s0=s0, cfg=cfg)
