"""Per-method quantile tables over completed runs."""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from .io import read_summary

COLUMNS = ("method", "metric", "min", "q1", "median", "q3", "max", "n_seeds")


def quantiles(values) -> tuple[float, float, float, float, float]:
    """(min, q1, median, q3, max) with linear interpolation between order statistics."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    q = np.quantile(v, [0.0, 0.25, 0.5, 0.75, 1.0], method="linear")
    return tuple(float(x) for x in q)


def find_summaries(run_dirs) -> tuple[list[Path], list[Path]]:
    """Summary files under each directory (searched recursively), and directories that have none."""
    found, missing = [], []
    for d in run_dirs:
        d = Path(d)
        hits = sorted(d.rglob("summary.json")) if d.is_dir() else []
        if hits:
            found.extend(hits)
        else:
            missing.append(d)
    return found, missing


def emit_comparison(run_dirs, metric: str = "eval_metric", err=None) -> str:
    """CSV with one row per method; runs without a summary or the metric are listed and skipped."""
    err = sys.stderr if err is None else err
    found, missing = find_summaries(run_dirs)
    for d in missing:
        print(f"skipping {d}: no summary.json", file=err)
    by_method: dict[str, list[float]] = {}
    for path in found:
        try:
            s = read_summary(path)
        except (ValueError, OSError) as exc:
            print(f"skipping {path}: {exc}", file=err)
            continue
        val = s.get("final_metrics", {}).get(metric)
        if val is None:
            print(f"skipping {path}: no final {metric}", file=err)
            continue
        by_method.setdefault(s["config"]["run"]["method"], []).append(float(val))
    lines = [",".join(COLUMNS)]
    for method in sorted(by_method):
        vals = by_method[method]
        q = quantiles(vals)
        lines.append(",".join([method, metric, *(repr(x) for x in q), str(len(vals))]))
    return "\n".join(lines) + "\n"
