"""Build a task from a RunConfig, run the chosen method and persist records and summary."""

from __future__ import annotations

import dataclasses
import itertools
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..baselines import AidConfig, aid_run, mle_run, penalty_run
from ..funcid import BilevelProblem, funcid_run
from ..numkit import make_rng
from ..oracle import OracleReport, QuadOracle, fd_total_grad
from ..tasks import iv, rl
from ..tasks.quad import make_quad, quad_problem
from .config import ConfigError, RunConfig, dump_sections, from_sections, read_sections
from .io import RecordWriter, build_id, read_dataset, write_summary


@dataclass
class TaskBundle:
    problem: BilevelProblem
    quad_oracle: QuadOracle | None = None
    rl_setup: object | None = None


def _load_data(path, task: str):
    found, batch = read_dataset(path)
    if found != task:
        raise ConfigError(f"{path} holds {found} data, not {task}")
    return batch


def build_task(cfg: RunConfig) -> TaskBundle:
    tp = cfg.task_params
    seed = cfg.seed
    if cfg.task == "quad":
        inst = make_quad(seed, n_atoms=tp["n_atoms"], d_t=tp["d_t"], width=tp["width"])
        if tp["n_centers"]:
            inst = inst.under_complete(tp["n_centers"])
        data = _load_data(tp["data"], "quad") if tp["data"] else inst.sample(tp["n"], make_rng(seed, 102))
        oracle = QuadOracle(inst.phi, data, ridge=cfg.optim.ridge_in)
        problem = quad_problem(inst, data, oracle_grad=oracle.grad, eval_metric=lambda w, th: oracle.F(w))
        return TaskBundle(problem, quad_oracle=oracle)
    if cfg.task == "iv":
        if tp["data"]:
            inst = iv.IvInstance.load(tp["instance"])
            data = _load_data(tp["data"], "iv")
        else:
            inst = iv.make_iv_instance(seed, d_t=tp["d_t"], kappa=tp["kappa"])
            data = iv.gen_iv_data(inst, tp["n"], make_rng(seed, 203))
        problem, _ = iv.iv_problem(inst, data, tp["n_components"], tp["degree"])
        return TaskBundle(problem)
    mdp = rl.gen_mdp(make_rng(seed, 301), tp["n_states"], tp["n_actions"], tp["gamma"])
    buffer = rl.replay_collect(mdp, tp["buffer"], make_rng(seed, 302))
    setup = rl.rl_problem(mdp, buffer, rank=tp["rank"] or None, tau=tp["tau"])
    return TaskBundle(setup.problem, rl_setup=setup)


def _aid_config(cfg: RunConfig) -> AidConfig:
    mp = cfg.method_params
    return AidConfig(linear_solver=mp["linear_solver"], solver_tol=mp["solver_tol"], solver_maxit=mp["solver_maxit"],
                     hvp_mode=mp["hvp_mode"], eps=mp["eps"] or None, ridge_in=cfg.optim.ridge_in)


def run_method(cfg: RunConfig, bundle: TaskBundle, on_record):
    """Returns (omega trajectory, records)."""
    opt = cfg.optim
    timing = cfg.timing
    if cfg.method == "funcid":
        return funcid_run(bundle.problem, opt, cfg.seed, timing, on_record)
    if cfg.method == "funcid_linear":
        lin = dataclasses.replace(opt, adjoint_mode="linear_exact")
        return funcid_run(bundle.problem, lin, cfg.seed, timing, on_record)
    if cfg.method == "aid":
        traj, records, _ = aid_run(bundle.problem, opt, _aid_config(cfg), cfg.seed, timing, on_record)
        return traj, records
    if cfg.method in ("value_penalty", "gradient_penalty"):
        kind = cfg.method.split("_")[0]
        return penalty_run(bundle.problem, opt, cfg.method_params["lam"], kind, cfg.seed, timing, on_record)
    return mle_run(bundle.rl_setup, opt, cfg.task_params["tau"], cfg.seed, timing, on_record)


def oracle_checks(cfg: RunConfig, bundle: TaskBundle, omega) -> list[dict]:
    """Closed-form checks available for the task at the final outer iterate."""
    if bundle.quad_oracle is None:
        return []
    from ..acceptance import exact_total_grad

    oracle = bundle.quad_oracle
    g, _ = exact_total_grad(bundle.problem, omega, cfg.optim.ridge_in)
    reports = [
        OracleReport.compare("total_grad_vs_fd", g, fd_total_grad(oracle.F, omega), 1e-5),
        OracleReport.compare("total_grad_vs_closed_form", g, oracle.grad(omega), 1e-8),
    ]
    return [r.to_dict() for r in reports]


def execute(cfg: RunConfig, config_sections: dict | None = None) -> dict:
    """Run one configuration; writes ``<method>_records.csv`` and ``summary.json`` into ``cfg.out_dir``.

    On failure the partial record file stays and no summary is written.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if config_sections is not None:
        (out / "config.ini").write_text(dump_sections(config_sections))
    t0 = time.perf_counter()
    bundle = build_task(cfg)
    with RecordWriter(out / f"{cfg.method}_records.csv") as writer:
        traj, records = run_method(cfg, bundle, writer)
    omega = traj[-1]
    final = {}
    if records:
        last = records[-1]
        final = {k: getattr(last, k) for k in ("outer_loss", "inner_loss", "grad_norm", "eval_metric")}
    if bundle.quad_oracle is not None:
        final["oracle_grad_norm"] = float(np.linalg.norm(bundle.quad_oracle.grad(omega)))
    summary = {
        "config": cfg.to_dict(),
        "final_metrics": final,
        "final_omega": omega,
        "n_records": len(records),
        "oracle_checks": oracle_checks(cfg, bundle, omega),
        "wall_time_s": time.perf_counter() - t0 if cfg.timing else None,
        "build_id": build_id(),
    }
    write_summary(out / "summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# sweeps


def expand_grid(base: dict[str, dict[str, str]], grid: dict[str, dict[str, str]]) -> list[dict]:
    """Cartesian product over ``[grid]`` entries ``section.key = v1, v2, ...``."""
    items = grid.get("grid")
    if not items or set(grid) != {"grid"}:
        raise ConfigError("grid file needs exactly one [grid] section")
    keys, values = [], []
    for full, raw in items.items():
        if "." not in full:
            raise ConfigError(f"grid key {full!r} must look like section.key")
        keys.append(tuple(full.split(".", 1)))
        vals = [v.strip() for v in raw.split(",") if v.strip()]
        if not vals:
            raise ConfigError(f"grid key {full!r} has no values")
        values.append(vals)
    out = []
    for combo in itertools.product(*values):
        sections = {s: dict(kv) for s, kv in base.items()}
        for (sec, key), val in zip(keys, combo):
            sections.setdefault(sec, {})[key] = val
        out.append(sections)
    return out


def sweep_configs(config_path, grid_path, out_root) -> list[tuple[RunConfig, dict]]:
    base = read_sections(config_path)
    grid = read_sections(grid_path)
    runs = []
    for i, sections in enumerate(expand_grid(base, grid)):
        tag = "_".join(f"{k}={v}" for k, v in sorted(_grid_values(grid, sections)))
        sections.setdefault("run", {})["out_dir"] = str(Path(out_root) / f"{i:03d}_{tag}")
        runs.append((from_sections(sections), sections))  # validate every point before running any
    return runs


def _grid_values(grid, sections):
    for full in grid["grid"]:
        sec, key = full.split(".", 1)
        yield key, sections[sec][key]


def max_workers() -> int:
    try:
        return max(1, int(os.environ.get("FUNCBO_THREADS", "1")))
    except ValueError:
        return 1


def run_sweep(runs: list[tuple[RunConfig, dict]], workers: int | None = None) -> list[tuple[str, str | None]]:
    """Run every point; returns (out_dir, error message or None) in grid order."""
    workers = min(max_workers(), workers or max_workers())

    def one(item):
        cfg, sections = item
        try:
            execute(cfg, sections)
            return cfg.out_dir, None
        except Exception as exc:  # each run reports its own failure
            return cfg.out_dir, f"{type(exc).__name__}: {exc}"

    if workers <= 1:
        return [one(item) for item in runs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, runs))
