"""Run configuration: flat ``key = value`` INI sections, validated before any compute.

Sections: ``[run]`` (task, method, seed, out_dir, timing), ``[optim]`` (OptimConfig
fields), ``[task]`` (generator parameters or data paths) and ``[method]``
(baseline settings). Unknown sections or keys are errors.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from ..baselines import HVP_MODES, LINEAR_SOLVERS
from ..funcid import OptimConfig

TASKS = ("iv", "rl_toy", "quad")
METHODS = ("funcid", "funcid_linear", "aid", "value_penalty", "gradient_penalty", "mle")
METHODS_BY_TASK = {
    "quad": ("funcid", "funcid_linear", "aid", "value_penalty", "gradient_penalty"),
    "iv": ("funcid", "funcid_linear", "aid", "value_penalty", "gradient_penalty"),
    "rl_toy": ("funcid", "mle"),
}

# allowed [task] keys with their types and defaults
TASK_KEYS = {
    "quad": {"n": (int, 200), "n_atoms": (int, 8), "d_t": (int, 3), "width": (float, 0.35), "n_centers": (int, 0),
             "data": (str, "")},
    "iv": {"n": (int, 5000), "d_t": (int, 16), "kappa": (float, 8.0), "n_components": (int, 4), "degree": (int, 2),
           "data": (str, ""), "instance": (str, "")},
    "rl_toy": {"n_states": (int, 8), "n_actions": (int, 2), "buffer": (int, 5000), "rank": (int, 0),
               "tau": (float, 5e-3), "gamma": (float, 0.99)},
}
METHOD_KEYS = {
    "lam": (float, 1.0),
    "linear_solver": (str, "cg"),
    "hvp_mode": (str, "exact_linear"),
    "solver_tol": (float, 1e-10),
    "solver_maxit": (int, 500),
    "eps": (float, 0.0),
}
RUN_KEYS = {"task": (str, None), "method": (str, None), "seed": (int, 0), "out_dir": (str, "runs/out"),
            "timing": (bool, False)}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    task: str
    method: str
    seed: int = 0
    out_dir: str = "runs/out"
    timing: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    task_params: dict = field(default_factory=dict)
    method_params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "run": {"task": self.task, "method": self.method, "seed": self.seed, "out_dir": self.out_dir,
                    "timing": self.timing},
            "optim": dataclasses.asdict(self.optim),
            "task": dict(self.task_params),
            "method": dict(self.method_params),
        }


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse(raw: str, typ):
    raw = raw.strip()
    if typ is bool:
        return _parse_bool(raw)
    if typ is int:
        return int(raw)
    if typ is float:
        return float(raw)
    return raw


def _optim_types() -> dict:
    types = {}
    for f in dataclasses.fields(OptimConfig):
        t = str(f.type)
        if "None" in t:
            types[f.name] = "optional_int"
        elif t == "bool":
            types[f.name] = bool
        elif t == "int":
            types[f.name] = int
        elif t == "float":
            types[f.name] = float
        else:
            types[f.name] = str
    return types


def _parse_optim(section: dict, method: str) -> OptimConfig:
    types = _optim_types()
    kw = {}
    if method == "funcid_linear":
        mode = section.get("adjoint_mode", "linear_exact").strip()
        if mode != "linear_exact":
            raise ConfigError("funcid_linear uses adjoint_mode = linear_exact")
        kw["adjoint_mode"] = "linear_exact"
    for key, raw in section.items():
        if key not in types:
            raise ConfigError(f"unknown key [optim] {key}")
        if key in kw:
            continue
        typ = types[key]
        try:
            if typ == "optional_int":
                kw[key] = None if raw.strip().lower() in ("", "none", "full") else int(raw)
            else:
                kw[key] = _parse(raw, typ)
        except ValueError as err:
            raise ConfigError(f"[optim] {key}: {err}") from err
    try:
        return OptimConfig(**kw)
    except ValueError as err:
        raise ConfigError(f"[optim] {err}") from err


def _parse_section(name: str, section: dict, spec: dict) -> dict:
    out = {}
    for key, raw in section.items():
        if key not in spec:
            raise ConfigError(f"unknown key [{name}] {key}")
        try:
            out[key] = _parse(raw, spec[key][0])
        except ValueError as err:
            raise ConfigError(f"[{name}] {key}: {err}") from err
    return out


def from_sections(sections: dict[str, dict[str, str]]) -> RunConfig:
    """Build and validate a RunConfig from raw string sections."""
    unknown = set(sections) - {"run", "optim", "task", "method"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    run = _parse_section("run", sections.get("run", {}), RUN_KEYS)
    task, method = run.get("task"), run.get("method")
    if task not in TASKS:
        raise ConfigError(f"[run] task must be one of {TASKS}, got {task!r}")
    if method not in METHODS:
        raise ConfigError(f"[run] method must be one of {METHODS}, got {method!r}")
    if method not in METHODS_BY_TASK[task]:
        raise ConfigError(f"method {method!r} is not available for task {task!r}")
    optim = _parse_optim(sections.get("optim", {}), method)
    task_params = {k: d for k, (_, d) in TASK_KEYS[task].items()}
    task_params.update(_parse_section("task", sections.get("task", {}), TASK_KEYS[task]))
    method_params = {k: d for k, (_, d) in METHOD_KEYS.items()}
    method_params.update(_parse_section("method", sections.get("method", {}), METHOD_KEYS))
    if method_params["linear_solver"] not in LINEAR_SOLVERS:
        raise ConfigError(f"[method] linear_solver must be one of {LINEAR_SOLVERS}")
    if method_params["hvp_mode"] not in HVP_MODES:
        raise ConfigError(f"[method] hvp_mode must be one of {HVP_MODES}")
    if method in ("value_penalty",) and method_params["lam"] <= 0:
        raise ConfigError("[method] lam must be positive")
    if method_params["lam"] < 0 or method_params["eps"] < 0:
        raise ConfigError("[method] lam and eps must be non-negative")
    if task == "iv" and bool(task_params["data"]) != bool(task_params["instance"]):
        raise ConfigError("[task] iv data files need both data and instance")
    if task == "rl_toy" and not 0.0 < task_params["tau"] <= 1.0:
        raise ConfigError("[task] tau must be in (0, 1]")
    for key in ("n", "buffer", "n_states", "n_actions"):
        if key in task_params and task_params[key] < 1:
            raise ConfigError(f"[task] {key} must be >= 1")
    return RunConfig(task, method, run.get("seed", 0), run.get("out_dir", "runs/out"), run.get("timing", False),
                     optim, task_params, method_params)


def read_sections(path) -> dict[str, dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read(path)
    except configparser.Error as err:
        raise ConfigError(f"cannot parse {path}: {err}") from err
    return {s: dict(parser.items(s)) for s in parser.sections()}


def load_config(path, seed: int | None = None, out_dir: str | None = None) -> RunConfig:
    sections = read_sections(path)
    run = sections.setdefault("run", {})
    if seed is not None:
        run["seed"] = str(seed)
    if out_dir is not None:
        run["out_dir"] = out_dir
    return from_sections(sections)


def dump_sections(sections: dict[str, dict[str, str]]) -> str:
    lines = []
    for name, items in sections.items():
        lines.append(f"[{name}]")
        lines.extend(f"{k} = {v}" for k, v in items.items())
        lines.append("")
    return "\n".join(lines)
