"""Evaluation protocol: the 4-metric x 3-method comparison over a level
suite, and per-skill cost-trace exports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .baselines import plan_no_goal, run_naive
from .domain import Level, Metrics, score
from .errors import NeedlePlanError
from .optimizer import OptimizerConfig, plan_task
from .skills import SkillBundle, build_chain

METHODS = ("naive", "nogoal", "full")
SUMMARY_FORMAT = "needleplan-comparison"
SUMMARY_VERSION = 1


@dataclass
class LevelOutcome:
    level_id: str
    metrics: Metrics
    error: str | None = None


@dataclass
class Comparison:
    per_method: dict = field(default_factory=dict)  # method -> [LevelOutcome]

    def totals(self, method) -> Metrics:
        t = Metrics()
        for o in self.per_method[method]:
            t.gates_entered += o.metrics.gates_entered
            t.gates_cleared += o.metrics.gates_cleared
            t.gates_broken += o.metrics.gates_broken
            t.finished += o.metrics.finished
        return t

    def to_tsv(self):
        lines = ["method\tlevel\tgates_entered\tgates_cleared\tgates_broken\tfinished\terror"]
        for method in self.per_method:
            for o in self.per_method[method]:
                m = o.metrics
                lines.append(f"{method}\t{o.level_id}\t{m.gates_entered}\t{m.gates_cleared}"
                             f"\t{m.gates_broken}\t{m.finished}\t{o.error or ''}")
            t = self.totals(method)
            lines.append(f"{method}\tTOTAL\t{t.gates_entered}\t{t.gates_cleared}"
                         f"\t{t.gates_broken}\t{t.finished}\t")
        return "\n".join(lines) + "\n"

    def to_text(self):
        header = f"{'method':<8} {'entered':>8} {'cleared':>8} {'broken':>7} {'finished':>9}"
        lines = [header, "-" * len(header)]
        for method in self.per_method:
            t = self.totals(method)
            lines.append(f"{method:<8} {t.gates_entered:>8} {t.gates_cleared:>8} "
                         f"{t.gates_broken:>7} {t.finished:>9}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return {
            "format": SUMMARY_FORMAT,
            "version": SUMMARY_VERSION,
            "methods": {
                method: {
                    "totals": self.totals(method).as_dict(),
                    "levels": [
                        {"level_id": o.level_id, **o.metrics.as_dict(),
                         **({"error": o.error} if o.error else {})}
                        for o in outcomes
                    ],
                }
                for method, outcomes in self.per_method.items()
            },
        }


def _level_seed(base_seed, level_index):
    return int(np.random.SeedSequence([base_seed, level_index]).generate_state(1)[0])


def run_method(method, bundle: SkillBundle, level: Level, cfg: OptimizerConfig):
    """One method on one level; returns (states, plan-or-none)."""
    if method == "naive":
        states, _ = run_naive(bundle, level)
        return states, None
    chain = build_chain(level, bundle)
    if method == "nogoal":
        plan = plan_no_goal(chain, bundle, level, cfg=cfg)
    elif method == "full":
        plan = plan_task(chain, bundle, level, cfg=cfg)
    else:
        raise NeedlePlanError(f"unknown method {method!r}")
    return plan.states, plan


def run_comparison(bundle: SkillBundle, levels, cfg: OptimizerConfig,
                   methods=METHODS) -> Comparison:
    """Aggregate the four metrics per method over the suite.

    Per-level failures become zero-score rows with the error recorded;
    the suite never aborts.
    """
    comp = Comparison()
    for method in methods:
        outcomes = []
        for i, level in enumerate(levels):
            level_cfg = OptimizerConfig(
                M=cfg.M, iters=cfg.iters, alpha=cfg.alpha, noise0=cfg.noise0,
                noise_decay=cfg.noise_decay, K=cfg.K,
                max_rejections=cfg.max_rejections,
                seed=_level_seed(cfg.seed, i),
                early_stop_tol=cfg.early_stop_tol, surrogate_k=cfg.surrogate_k)
            try:
                states, _ = run_method(method, bundle, level, level_cfg)
                m = score(states, level) if states.shape[0] else Metrics()
                outcomes.append(LevelOutcome(level.level_id, m))
            except NeedlePlanError as e:
                outcomes.append(LevelOutcome(level.level_id, Metrics(),
                                             error=f"{type(e).__name__}: {e}"))
        comp.per_method[method] = outcomes
    return comp


def export_cost_traces(run_logs):
    """Per-skill iteration-vs-cost series as delimiter-separated text.

    Accepts run-log dicts (see optimizer.plan_log_dict); one row per
    (action, iteration).
    """
    lines = ["level\taction\titeration\tcost"]
    for log in run_logs:
        level_id = log.get("level_id", "")
        for a in log.get("actions", []):
            for it, c in enumerate(a["cost_trace"]):
                lines.append(f"{level_id}\t{a['action']}\t{it}\t{c!r}")
    return "\n".join(lines) + "\n"


def save_comparison(comp: Comparison, tsv_path, json_path):
    with open(tsv_path, "w") as f:
        f.write(comp.to_tsv())
    with open(json_path, "w") as f:
        json.dump(comp.to_dict(), f, indent=1)
        f.write("\n")
