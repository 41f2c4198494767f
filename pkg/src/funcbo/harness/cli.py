"""Command line: run, gen-data, check, sweep, compare.

Exit codes: 0 success, 1 run failure, 2 config error, 3 acceptance failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..numkit import make_rng
from .config import ConfigError, load_config, read_sections

EXIT_OK, EXIT_RUN, EXIT_CONFIG, EXIT_ACCEPT = 0, 1, 2, 3


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_run(args) -> int:
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        sections = read_sections(args.config)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    sections.setdefault("run", {})["seed"] = str(cfg.seed)
    sections["run"]["out_dir"] = cfg.out_dir
    from .runner import execute

    try:
        summary = execute(cfg, sections)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:
        _err(f"run failed: {type(exc).__name__}: {exc}")
        return EXIT_RUN
    print(f"{cfg.method} on {cfg.task} seed {cfg.seed}: {summary['final_metrics']} -> {cfg.out_dir}")
    return EXIT_OK


def cmd_gen_data(args) -> int:
    from ..tasks import iv, rl
    from ..tasks.quad import make_quad
    from .io import write_dataset

    if args.n < 1:
        _err("config error: --n must be >= 1")
        return EXIT_CONFIG
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.task == "quad":
        batch = make_quad(args.seed).sample(args.n, make_rng(args.seed, 102))
    elif args.task == "iv":
        inst = iv.make_iv_instance(args.seed, d_t=args.d_t, kappa=args.kappa)
        batch = iv.gen_iv_data(inst, args.n, make_rng(args.seed, 203))
        inst.save(out.with_suffix(".instance.json"))
    else:
        mdp = rl.gen_mdp(make_rng(args.seed, 301))
        batch = rl.replay_collect(mdp, args.n, make_rng(args.seed, 302))
    write_dataset(out, args.task, batch)
    print(f"wrote {len(batch)} {args.task} samples to {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    from ..acceptance import run_suite

    results = run_suite(args.suite)
    n_pass = sum(r.passed for r in results)
    print(f"{n_pass}/{len(results)} criteria passed")
    return EXIT_OK if n_pass == len(results) else EXIT_ACCEPT


def cmd_sweep(args) -> int:
    from .runner import run_sweep, sweep_configs

    try:
        runs = sweep_configs(args.config, args.grid, args.out)
    except ConfigError as exc:
        _err(f"config error: {exc}")
        return EXIT_CONFIG
    results = run_sweep(runs, args.workers)
    failed = [(d, e) for d, e in results if e is not None]
    for d, e in failed:
        _err(f"run failed in {d}: {e}")
    print(f"{len(results) - len(failed)}/{len(results)} runs completed under {args.out}")
    return EXIT_RUN if failed else EXIT_OK


def cmd_compare(args) -> int:
    from .compare import emit_comparison
    from .io import atomic_write_text

    table = emit_comparison(args.runs, args.metric)
    if args.out:
        atomic_write_text(args.out, table)
    else:
        sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="funcbo", description="Functional bilevel optimization experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="execute one configured run")
    r.add_argument("--config", required=True)
    r.add_argument("--seed", type=int)
    r.add_argument("--out")
    r.set_defaults(func=cmd_run)

    g = sub.add_parser("gen-data", help="write a dataset file")
    g.add_argument("--task", required=True, choices=("iv", "rl_toy", "quad"))
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--d-t", dest="d_t", type=int, default=16)
    g.add_argument("--kappa", type=float, default=8.0)
    g.set_defaults(func=cmd_gen_data)

    c = sub.add_parser("check", help="run acceptance suites")
    c.add_argument("--suite", choices=("quick", "full"), default="quick")
    c.set_defaults(func=cmd_check)

    s = sub.add_parser("sweep", help="run a grid of configurations")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", default="runs/sweep")
    s.add_argument("--workers", type=int)
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("compare", help="per-method quantiles of a final metric")
    m.add_argument("runs", nargs="+")
    m.add_argument("--metric", default="eval_metric")
    m.add_argument("--out")
    m.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
