"""Stochastic trajectory optimization against expert feature densities.

Each iteration draws trajectory parameters from a surrogate density,
rolls them out, rejects constraint violators, weights the survivors by
expert likelihood of their features (times a goal factor coupling the
endpoint to the successor skill), refits the surrogate in closed form,
blends it with the previous one by the step size, and injects decaying
diagonal exploration noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import gmm
from .domain import (
    APPROACH_GATE, CONNECT_GATES, DONE, MOVE_TO_EXIT, PASS_THROUGH_GATE,
    ActionLabel, Level, NeedleState, action_feature_rows, check_valid,
    feature_core, rollout_primitives, score, transition_feature_row,
)
from .errors import (
    ConfigurationError, DegenerateWeightsError, InfeasibilityError,
    InvalidArgumentError, NeedlePlanError, PlanError,
)

RUNLOG_FORMAT = "needleplan-runlog"
RUNLOG_VERSION = 1


@dataclass(frozen=True)
class TrajectoryParam:
    """K piecewise-constant primitives (u, v, t); flattens to 3K reals."""

    u: np.ndarray
    v: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "u", np.asarray(self.u, dtype=float).reshape(-1))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float).reshape(-1))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=float).reshape(-1))
        if not (self.u.shape == self.v.shape == self.t.shape):
            raise InvalidArgumentError("u, v, t must have one entry per segment")

    @property
    def n_segments(self):
        return self.u.shape[0]

    def flatten(self):
        return np.stack([self.u, self.v, self.t], axis=1).reshape(-1)

    @staticmethod
    def from_flat(vec):
        vec = np.asarray(vec, dtype=float).reshape(-1)
        if vec.size % 3:
            raise InvalidArgumentError("flattened parameter length must be a multiple of 3")
        m = vec.reshape(-1, 3)
        return TrajectoryParam(m[:, 0], m[:, 1], m[:, 2])

    def segments(self):
        return list(zip(self.u, self.v, self.t))


@dataclass
class Surrogate:
    """Parametric density over flattened parameters, plus the box that
    restricts draws to the valid parameter domain (|u| <= u_max,
    0 <= v <= v_max, 0 <= t <= t_cap)."""

    dist: object  # gmm.Gaussian or gmm.GmmModel
    lo: np.ndarray
    hi: np.ndarray

    def sample(self, n, rng):
        raw = self.dist.sample(n, rng)
        return np.clip(raw, self.lo, self.hi)


@dataclass
class OptimizerConfig:
    M: int = 100
    iters: int = 30
    alpha: float = 0.75
    noise0: float = 0.01
    noise_decay: float = 0.9
    K: int = 5
    max_rejections: int = 20000
    seed: int = 0
    early_stop_tol: float | None = 1e-4  # None disables early stopping
    surrogate_k: int = 1                 # >1 selects a GMM surrogate
    # Low-covariance handling: per iteration the expert densities used for
    # WEIGHTING get a diagonal term, chosen as the smallest grid value that
    # lifts the effective sample size above ess_frac * M; it shrinks to 0
    # as sampling concentrates. None evaluates weights on the raw density.
    # Costs and best-sample tracking always use the raw density.
    ess_frac: float | None = 0.15

    def __post_init__(self):
        if not (0.0 < self.alpha < 1.0):
            raise InvalidArgumentError("alpha must lie in (0, 1)")
        if self.M < 2:
            raise InvalidArgumentError("M must be >= 2")
        if not (0.0 < self.noise_decay <= 1.0):
            raise InvalidArgumentError("noise_decay must lie in (0, 1]")


@dataclass
class OptResult:
    label: ActionLabel
    next_label: ActionLabel | None
    best_param: TrajectoryParam
    best_states: np.ndarray
    best_controls: np.ndarray
    best_log_weight: float
    cost_trace: list
    accept_trace: list
    surrogate: Surrogate
    iterations: int


@dataclass
class PlanResult:
    states: np.ndarray
    controls: np.ndarray
    actions: list            # [{action, successor, start, end}] state-index ranges
    results: list            # per-action OptResult
    finished: bool


def _action_target_distance(label: ActionLabel, level: Level, s0: NeedleState):
    gates = level.gates
    if label.kind == APPROACH_GATE or label.kind == CONNECT_GATES:
        g = gates[label.gates[-1]]
        return math.hypot(g.x - s0.x, g.y - s0.y) + g.width
    if label.kind == PASS_THROUGH_GATE:
        g = gates[label.gates[0]]
        return g.width + 4.0
    return max(level.width - s0.x, 1.0) + 2.0


def make_initial_surrogate(label: ActionLabel, level: Level, s0: NeedleState,
                           cfg: OptimizerConfig) -> Surrogate:
    """Broad nominal density: zero rotation, mid-range speed, durations
    splitting a crossing horizon; per-field spreads documented here."""
    K = cfg.K
    v_nom = 0.55 * level.v_max
    horizon = _action_target_distance(label, level, s0) / v_nom + 4.0
    t_nom = horizon / K
    mean = TrajectoryParam(np.zeros(K), np.full(K, v_nom), np.full(K, t_nom)).flatten()
    sd = TrajectoryParam(
        np.full(K, 0.6 * level.u_max),
        np.full(K, 0.30 * level.v_max),
        np.full(K, 0.6 * t_nom),
    ).flatten()
    cov = np.diag(sd ** 2)
    lo = TrajectoryParam(np.full(K, -level.u_max), np.zeros(K), np.zeros(K)).flatten()
    hi = TrajectoryParam(np.full(K, level.u_max), np.full(K, level.v_max),
                         np.full(K, max(3.0 * t_nom, 10.0))).flatten()
    return Surrogate(gmm.Gaussian(mean, cov), lo, hi)


def _action_stop(label: ActionLabel, level: Level):
    """Where a rollout for this action ends, mirroring segmentation."""
    if label.kind == APPROACH_GATE:
        return level.gates[label.gates[0]], "enter"
    if label.kind == CONNECT_GATES:
        return level.gates[label.gates[1]], "enter"
    if label.kind == PASS_THROUGH_GATE:
        return level.gates[label.gates[0]], "exit"
    return None, None


def _action_completed(label: ActionLabel, level: Level, terminal):
    """Did a rollout reach this action's boundary (vs. run out of time)?"""
    x, y = float(terminal[0]), float(terminal[1])
    if x > level.width:
        return True
    if label.kind == APPROACH_GATE:
        return level.gates[label.gates[0]].contains(x, y)
    if label.kind == CONNECT_GATES:
        return level.gates[label.gates[1]].contains(x, y)
    if label.kind == PASS_THROUGH_GATE:
        return not level.gates[label.gates[0]].contains(x, y)
    return False  # MOVE_TO_EXIT completes only past the right edge


def sample_valid(surrogate: Surrogate, level: Level, s0: NeedleState, M, max_rejections,
                 rng, stop_at_exit=True, stop_gate=None, gate_stop=None):
    """Exactly M (param, states, controls) triples whose rollouts pass
    check_valid; i.i.d. draws filtered by rejection."""
    params = []
    rollouts = []
    rejected = 0
    while len(params) < M:
        batch = surrogate.sample(M, rng)
        for row in batch:
            p = TrajectoryParam.from_flat(row)
            states, controls = rollout_primitives(
                s0, p.segments(), width=level.width, stop_at_exit=stop_at_exit,
                stop_gate=stop_gate, gate_stop=gate_stop)
            if check_valid(states, controls, level):
                params.append(row)
                rollouts.append((states, controls))
                if len(params) == M:
                    break
            else:
                rejected += 1
                if rejected > max_rejections:
                    rate = rejected / (rejected + len(params))
                    raise InfeasibilityError(
                        f"rejection sampling exhausted: {rejected} rejections "
                        f"({rate:.1%} rejection rate) before reaching M={M}",
                        rejection_rate=rate)
    return np.array(params), rollouts, rejected


def compute_weights(feature_rows, skill, goal_rows=None, next_skill=None,
                    length_normalize=False):
    """Per-sample weights w_j = sum_i p(x_ij | skill) * p(x_Nj | next skill).

    Everything runs in log space; the returned linear weights are shifted
    by the max log-total before exponentiation. Also returns per-sample
    log totals (for cross-iteration comparison) and mean negative expert
    log-likelihood (the reported cost).

    length_normalize divides each sample's total by its row count (the
    1/N prefactor of the objective, applied per sample): trajectories of
    different truncated lengths then compete on per-step likelihood
    instead of accumulating weight merely by being long.
    """
    M = len(feature_rows)
    sizes = np.array([r.shape[0] for r in feature_rows], dtype=np.int64)
    if next_skill is not None:
        goal_lp = next_skill.log_density_rows(goal_rows)
    else:
        goal_lp = np.zeros(M)
    log_totals = np.full(M, -np.inf)
    costs = np.full(M, np.inf)
    if sizes.sum():
        all_rows = np.concatenate([r for r in feature_rows if r.shape[0]], axis=0)
        lp_all = skill.log_density_rows(all_rows)
        pos = 0
        for j in range(M):
            n = int(sizes[j])
            if n == 0:
                continue
            slp = lp_all[pos: pos + n]
            pos += n
            log_totals[j] = gmm.logsumexp(slp + goal_lp[j])
            if length_normalize:
                log_totals[j] -= np.log(n)
            denom = n + (1 if next_skill is not None else 0)
            total_lp = slp.sum() + (goal_lp[j] if next_skill is not None else 0.0)
            costs[j] = -total_lp / denom
    finite = np.isfinite(log_totals)
    if not finite.any():
        raise DegenerateWeightsError("all sample weights underflowed to zero")
    shift = np.max(log_totals[finite])
    w = np.zeros(M)
    w[finite] = np.exp(log_totals[finite] - shift)
    return w, log_totals, costs


class _AnnealedSkill:
    """A skill's density with a diagonal term added (z-space); duck-typed
    stand-in for SkillModel during weighting."""

    def __init__(self, skill, reg):
        self._model = gmm.regularize(skill.density, reg)
        self._schema = skill.schema

    def log_density_rows(self, raw_rows):
        return self._model.log_pdf_rows(self._schema.standardize(raw_rows))


# geometric grid of candidate diagonal terms, 0 then 0.25 * 4^j
_ANNEAL_GRID = [0.0] + [0.25 * (4.0 ** j) for j in range(12)]


def _weights_with_annealing(rows, skill, goal_rows, next_skill, ess_target):
    """Smallest grid term whose weights reach the target effective sample
    size; returns (weights, chosen term)."""
    last = None
    for reg in _ANNEAL_GRID:
        if reg == 0.0:
            w, _, _ = compute_weights(rows, skill, goal_rows, next_skill,
                                      length_normalize=True)
        else:
            a_skill = _AnnealedSkill(skill, reg)
            a_next = _AnnealedSkill(next_skill, reg) if next_skill is not None else None
            w, _, _ = compute_weights(rows, a_skill, goal_rows, a_next,
                                      length_normalize=True)
        last = (w, reg)
        ess = float(w.sum() ** 2 / (w ** 2).sum())
        if ess >= ess_target:
            return last
    return last


def update_surrogate(params, weights, prev: Surrogate, alpha, noise_i) -> Surrogate:
    """Closed-form weighted refit, convex blend by alpha, plus diagonal noise."""
    if isinstance(prev.dist, gmm.GmmModel):
        fit = gmm.fit_weighted_gmm(params, weights,
                                   gmm.FitConfig(k=prev.dist.k, max_iters=25),
                                   init_model=prev.dist)
        comps = []
        for c_new, c_old in zip(fit.components, prev.dist.components):
            mu = (1.0 - alpha) * c_old.mean + alpha * c_new.mean
            cov = (1.0 - alpha) * c_old.cov + alpha * c_new.cov
            comps.append(gmm.Gaussian(mu, cov + noise_i * np.eye(mu.shape[0])))
        wmix = (1.0 - alpha) * prev.dist.weights + alpha * fit.weights
        wmix = wmix / wmix.sum()
        return Surrogate(gmm.GmmModel(comps, wmix), prev.lo, prev.hi)
    fit = gmm.fit_weighted_gaussian(params, weights)
    mu = (1.0 - alpha) * prev.dist.mean + alpha * fit.mean
    cov = (1.0 - alpha) * prev.dist.cov + alpha * fit.cov
    cov = cov + noise_i * np.eye(mu.shape[0])
    return Surrogate(gmm.Gaussian(mu, cov), prev.lo, prev.hi)


def _early_stopped(costs, tol):
    if tol is None or len(costs) < 4:
        return False
    recent = costs[-4:]
    for a, b in zip(recent[:-1], recent[1:]):
        if not (np.isfinite(a) and np.isfinite(b)):
            return False
        if abs(b - a) >= tol * max(abs(a), 1e-12):
            return False
    return True


def optimize(label: ActionLabel, skill, next_label, next_skill, level: Level,
             s0: NeedleState, cfg: OptimizerConfig, rng=None,
             surrogate: Surrogate | None = None, prev_control=None) -> OptResult:
    """Iterate sample/weight/refit until cfg.iters or cost convergence.

    best_param is the sample with the highest total weight ever seen
    (boundary-completing samples ranked first); cost_trace records the
    per-iteration mean negative expert log-likelihood of the sampled
    features (the tractable stand-in for the divergence objective).
    prev_control is the control that led into s0, used to difference the
    first feature row when this action continues an earlier one.
    """
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    prev_core = None
    if prev_control is not None:
        prev_core = feature_core(s0.as_array().reshape(1, 3),
                                 np.asarray(prev_control, dtype=float).reshape(1, 2),
                                 level, label)[0]
    sur = surrogate if surrogate is not None else make_initial_surrogate(label, level, s0, cfg)
    if cfg.surrogate_k > 1 and not isinstance(sur.dist, gmm.GmmModel):
        comps = [gmm.Gaussian(sur.dist.mean + 0.01 * c, sur.dist.cov)
                 for c in range(cfg.surrogate_k)]
        sur = Surrogate(gmm.GmmModel(comps, np.full(cfg.surrogate_k, 1.0 / cfg.surrogate_k)),
                        sur.lo, sur.hi)

    stop_gate, gate_stop = _action_stop(label, level)
    noise = cfg.noise0
    cost_trace = []
    accept_trace = []
    best = None  # (log_weight, flat_param, states, controls)
    for it in range(cfg.iters):
        try:
            params, rollouts, rejected = sample_valid(
                sur, level, s0, cfg.M, cfg.max_rejections, rng,
                stop_gate=stop_gate, gate_stop=gate_stop)
        except InfeasibilityError as e:
            e.iteration = it
            raise
        accept_trace.append(cfg.M / (cfg.M + rejected))

        rows = [action_feature_rows(st[:-1] if st.shape[0] > 1 else st[:0],
                                    ct, level, label, prev_core=prev_core)
                for st, ct in rollouts]
        goal_rows = None
        if next_skill is not None:
            goal_rows = np.stack([transition_feature_row(st, ct, level, next_label)
                                  for st, ct in rollouts])
        try:
            w, log_totals, costs = compute_weights(rows, skill, goal_rows, next_skill,
                                                   length_normalize=True)
            if cfg.ess_frac is not None:
                w, _ = _weights_with_annealing(rows, skill, goal_rows, next_skill,
                                               cfg.ess_frac * cfg.M)
        except DegenerateWeightsError as e:
            raise DegenerateWeightsError(f"{e} (iteration {it})") from e

        finite = np.isfinite(costs)
        cost_trace.append(float(np.mean(costs[finite])) if finite.any() else float("inf"))

        # rank completed rollouts (boundary reached) above incomplete ones,
        # then by total weight; keep the best ever seen
        completed = np.array([_action_completed(label, level, st[-1])
                              for st, _ in rollouts])
        ranked = np.where(completed, 1.0, 0.0)
        jbest = int(np.lexsort((log_totals, ranked))[-1])
        key = (bool(ranked[jbest]), float(log_totals[jbest]))
        if best is None or key > (best[0], best[1]):
            st, ct = rollouts[jbest]
            best = (key[0], key[1], params[jbest].copy(), st, ct)

        sur = update_surrogate(params, w, sur, cfg.alpha, noise)
        noise *= cfg.noise_decay
        if _early_stopped(cost_trace, cfg.early_stop_tol):
            break

    return OptResult(
        label=label, next_label=next_label,
        best_param=TrajectoryParam.from_flat(best[2]),
        best_states=best[3], best_controls=best[4],
        best_log_weight=best[1],
        cost_trace=cost_trace, accept_trace=accept_trace,
        surrogate=sur, iterations=len(cost_trace))


def plan_task(chain, bundle, level: Level, s0: NeedleState | None = None,
              cfg: OptimizerConfig | None = None) -> PlanResult:
    """Optimize each chain element with its successor as the goal; each
    action starts from the previous action's final state."""
    cfg = cfg or OptimizerConfig()
    s0 = s0 or level.start_state
    seeds = np.random.SeedSequence(cfg.seed).spawn(len(chain.elements))

    results = []
    actions = []
    all_states = None
    all_controls = None
    cur = s0
    prev_control = None
    finished = False
    for idx, (label, succ) in enumerate(chain.elements):
        if label.kind == DONE:
            break
        skill = bundle.require(label.kind)
        next_skill = None
        next_label = None
        if succ is not None and succ.kind != DONE:
            next_skill = bundle.require(succ.kind)
            next_label = succ
        rng = np.random.default_rng(seeds[idx])
        try:
            res = optimize(label, skill, next_label, next_skill, level, cur, cfg,
                           rng=rng, prev_control=prev_control)
        except NeedlePlanError as e:
            partial = _assemble_plan(all_states, all_controls, actions, results, finished)
            raise PlanError(f"action {label}: {e}", partial=partial) from e
        results.append(res)

        if all_states is None:
            offset = 0
            all_states = res.best_states
            all_controls = res.best_controls
        else:
            offset = all_states.shape[0] - 1
            all_states = np.concatenate([all_states, res.best_states[1:]], axis=0)
            all_controls = np.concatenate([all_controls, res.best_controls], axis=0)
        actions.append({
            "action": str(label),
            "successor": str(succ) if succ is not None else None,
            "start": int(offset),
            "end": int(all_states.shape[0] - 1),
        })
        cur = NeedleState(*res.best_states[-1])
        if res.best_controls.shape[0]:
            prev_control = res.best_controls[-1]
        if cur.x > level.width:
            finished = True
            break
    return _assemble_plan(all_states, all_controls, actions, results, finished)


def _assemble_plan(states, controls, actions, results, finished):
    if states is None:
        states = np.zeros((0, 3))
        controls = np.zeros((0, 2))
    return PlanResult(states=states, controls=controls, actions=list(actions),
                      results=list(results), finished=finished)


# ---------------------------------------------------------------------------
# Run log
# ---------------------------------------------------------------------------

def plan_log_dict(plan: PlanResult, level: Level, cfg: OptimizerConfig):
    rows = []
    for i in range(plan.states.shape[0]):
        u, v = (plan.controls[i].tolist() if i < plan.controls.shape[0] else [0.0, 0.0])
        rows.append([i, plan.states[i, 0], plan.states[i, 1], plan.states[i, 2], u, v])
    m = score(plan.states, level) if plan.states.shape[0] else None
    return {
        "format": RUNLOG_FORMAT,
        "version": RUNLOG_VERSION,
        "level_id": level.level_id,
        "seed": cfg.seed,
        "config": {"M": cfg.M, "iters": cfg.iters, "alpha": cfg.alpha,
                   "noise0": cfg.noise0, "noise_decay": cfg.noise_decay,
                   "K": cfg.K, "surrogate_k": cfg.surrogate_k},
        "finished": bool(plan.finished),
        "score": m.as_dict() if m else None,
        "actions": [
            {**a,
             "iterations": r.iterations,
             "cost_trace": [float(c) for c in r.cost_trace],
             "accept_trace": [float(a2) for a2 in r.accept_trace],
             "best_log_weight": float(r.best_log_weight)}
            for a, r in zip(plan.actions, plan.results)
        ],
        "trace": rows,
    }


def save_run_log(plan: PlanResult, level: Level, cfg: OptimizerConfig, path):
    with open(path, "w") as f:
        json.dump(plan_log_dict(plan, level, cfg), f, indent=1)
        f.write("\n")
