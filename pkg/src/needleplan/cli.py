"""Single executable exposing the pipeline.

Subcommands: gen-levels, demo-script, serve, train, plan, eval, compare.
Every failure exits nonzero with one machine-parseable line on stderr:
`error: <ErrorType>: <message>`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import evaluate, optimizer
from .domain import generate_level, load_demo, load_level, save_demo, save_level, score
from .errors import InsufficientDataError, NeedlePlanError
from .gmm import FitConfig
from .optimizer import OptimizerConfig, plan_log_dict, plan_task
from .scripted import scripted_demos
from .skills import build_chain, load_bundle, save_bundle, train_bundle


def _load_suite(suite_dir):
    paths = sorted(Path(suite_dir).glob("*.json"))
    if not paths:
        raise NeedlePlanError(f"no level files found in {suite_dir}")
    return [load_level(p) for p in paths]


def cmd_gen_levels(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        level = generate_level(args.gates, args.obstacles, seed=args.seed + i,
                               n_tissues=args.tissues, level_id=f"level_{i:03d}")
        save_level(level, out / f"level_{i:03d}.json")
    print(f"wrote {args.n} levels to {out}")
    return 0


def cmd_demo_script(args):
    levels = _load_suite(args.levels)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_written = 0
    for level in levels:
        for i, demo in enumerate(scripted_demos(level, n=args.per_level, seed=args.seed)):
            save_demo(demo, out / f"demo_{level.level_id}_{i}.json")
            n_written += 1
    print(f"wrote {n_written} demonstrations to {out}")
    return 0


def cmd_serve(args):
    from .server import serve

    serve(args.levels, args.out, args.port, ui_dir=args.ui, host=args.host)
    return 0


def cmd_train(args):
    demo_paths = sorted(Path(args.demos).glob("*.json"))
    if not demo_paths:
        raise InsufficientDataError(f"no demonstration files found in {args.demos}")
    levels = {lvl.level_id: lvl for lvl in _load_suite(args.levels)}
    pairs = []
    for p in demo_paths:
        demo = load_demo(p)
        if demo.level_id not in levels:
            raise NeedlePlanError(f"demo {p.name} references unknown level {demo.level_id!r}")
        pairs.append((demo, levels[demo.level_id]))
    cfg = FitConfig(k=args.k, seed=args.seed)
    bundle = train_bundle(pairs, cfg)
    save_bundle(bundle, args.out)
    dims = {kind: s.density.dim for kind, s in bundle.skills.items()}
    print(f"trained {len(bundle.skills)} skills {dims} from {len(pairs)} demos -> {args.out}")
    return 0


def _opt_config(args):
    return OptimizerConfig(M=args.samples, iters=args.iters, alpha=args.alpha,
                           K=args.segments, seed=args.seed,
                           early_stop_tol=None if args.no_early_stop else 1e-4)


def cmd_plan(args):
    bundle = load_bundle(args.skills)
    level = load_level(args.level)
    cfg = _opt_config(args)
    chain = build_chain(level, bundle)
    plan = plan_task(chain, bundle, level, cfg=cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / f"plan_{level.level_id}.json"
    optimizer.save_run_log(plan, level, cfg, log_path)
    from .domain import Demonstration

    trace_path = out / f"trace_{level.level_id}.json"
    controls = list(plan.controls) + [[0.0, 0.0]]
    save_demo(Demonstration(level.level_id, plan.states, controls), trace_path)
    m = score(plan.states, level)
    print(f"planned {level.level_id}: finished={bool(m.finished)} "
          f"cleared={m.gates_cleared}/{len(level.gates)} -> {log_path}")
    return 0


def cmd_eval(args):
    bundle = load_bundle(args.skills)
    levels = _load_suite(args.suite)
    cfg = _opt_config(args)
    comp = evaluate.run_comparison(bundle, levels, cfg, methods=(args.method,))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.save_comparison(comp, out / f"scores_{args.method}.tsv",
                             out / f"scores_{args.method}.json")
    print(comp.to_text(), end="")
    return 0


def cmd_compare(args):
    bundle = load_bundle(args.skills)
    levels = _load_suite(args.suite)
    cfg = _opt_config(args)
    comp = evaluate.run_comparison(bundle, levels, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluate.save_comparison(comp, out / "comparison.tsv", out / "comparison.json")
    print(comp.to_text(), end="")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="needleplan",
                                description="demonstration-to-plan pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-levels", help="write a deterministic level suite")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--gates", type=int, default=2)
    g.add_argument("--obstacles", type=int, default=2)
    g.add_argument("--tissues", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_levels)

    d = sub.add_parser("demo-script", help="scripted demonstrations for a level suite")
    d.add_argument("--levels", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--per-level", type=int, default=3)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(fn=cmd_demo_script)

    s = sub.add_parser("serve", help="host the recorder API and UI assets")
    s.add_argument("--levels", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--port", type=int, default=8000)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--ui", default=None, help="directory of built UI assets")
    s.set_defaults(fn=cmd_serve)

    t = sub.add_parser("train", help="segment demos and fit the skill bundle")
    t.add_argument("--demos", required=True)
    t.add_argument("--levels", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--k", type=int, default=3)
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(fn=cmd_train)

    def add_opt_flags(q):
        q.add_argument("--seed", type=int, default=0)
        q.add_argument("--samples", type=int, default=100)
        q.add_argument("--iters", type=int, default=30)
        q.add_argument("--alpha", type=float, default=0.75)
        q.add_argument("--segments", type=int, default=5)
        q.add_argument("--no-early-stop", action="store_true")

    pl = sub.add_parser("plan", help="plan one level with the full method")
    pl.add_argument("--skills", required=True)
    pl.add_argument("--level", required=True)
    pl.add_argument("--out", required=True)
    add_opt_flags(pl)
    pl.set_defaults(fn=cmd_plan)

    ev = sub.add_parser("eval", help="score one method over a suite")
    ev.add_argument("--skills", required=True)
    ev.add_argument("--suite", required=True)
    ev.add_argument("--method", choices=evaluate.METHODS, required=True)
    ev.add_argument("--out", required=True)
    add_opt_flags(ev)
    ev.set_defaults(fn=cmd_eval)

    cp = sub.add_parser("compare", help="full three-method comparison table")
    cp.add_argument("--skills", required=True)
    cp.add_argument("--suite", required=True)
    cp.add_argument("--out", required=True)
    add_opt_flags(cp)
    cp.set_defaults(fn=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except NeedlePlanError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
