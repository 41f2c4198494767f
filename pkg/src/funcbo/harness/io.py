"""Versioned file formats: run records, run summaries and dataset files."""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from pathlib import Path

import numpy as np

from ..batch import Batch
from ..funcid import CSV_COLUMNS, RunRecord

SUMMARY_FORMAT = "FUNCBO-SUMMARY v1"
DATA_MAGIC = "FUNCBO-DATA"


class RecordWriter:
    """Appends RunRecords to a CSV and flushes each row, so an aborted run keeps its prefix."""

    def __init__(self, path):
        self.path = Path(path)
        self._fh = open(self.path, "w", newline="")
        self._fh.write(",".join(CSV_COLUMNS) + "\n")
        self._fh.flush()

    def __call__(self, rec: RunRecord) -> None:
        self._fh.write(rec.csv_row() + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != ",".join(CSV_COLUMNS):
        raise ValueError(f"{path}: unexpected record header")
    out = []
    for line in lines[1:]:
        vals = line.split(",")
        row = {}
        for k, v in zip(CSV_COLUMNS, vals):
            row[k] = None if v == "" else (int(v) if k in ("iter", "hvp_dim", "inner_steps", "adjoint_steps") else float(v))
        out.append(row)
    return out


def atomic_write_text(path, text: str) -> None:
    """Write to a temporary file in the same directory, then rename over ``path``."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


def write_summary(path, summary: dict) -> None:
    payload = {"format": SUMMARY_FORMAT, **summary}
    atomic_write_text(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_summary(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("format") != SUMMARY_FORMAT:
        raise ValueError(f"{path}: not a run summary")
    return data


def build_id() -> str:
    """Content hash of the package sources: identifies the code that produced a run."""
    root = Path(__file__).resolve().parents[1]
    h = hashlib.sha256()
    for f in sorted(root.rglob("*.py")):
        h.update(str(f.relative_to(root)).encode())
        h.update(f.read_bytes())
    return h.hexdigest()[:12]


# ---------------------------------------------------------------------------
# dataset files: header then one whitespace-separated record per line


def write_dataset(path, task: str, batch: Batch) -> None:
    """Columns: x block, then each y entry in sorted key order, flattened per row."""
    blocks = [("x", batch.x.reshape(len(batch), -1))]
    for key in sorted(batch.y):
        blocks.append((key, np.asarray(batch.y[key]).reshape(len(batch), -1)))
    dims = ",".join(f"{name}:{arr.shape[1]}" for name, arr in blocks)
    lines = [f"{DATA_MAGIC} v1 {task} {len(batch)} {dims}"]
    table = np.hstack([arr.astype(np.float64) for _, arr in blocks])
    lines.extend(" ".join(repr(float(v)) for v in row) for row in table)
    atomic_write_text(path, "\n".join(lines) + "\n")


INTEGER_KEYS = ("atom", "s", "a", "s_next")


def read_dataset(path) -> tuple[str, Batch]:
    path = Path(path)
    with open(path) as fh:
        header = fh.readline().split()
        if len(header) != 5 or header[0] != DATA_MAGIC or header[1] != "v1":
            raise ValueError(f"{path}: not a v1 dataset file")
        task, n = header[2], int(header[3])
        dims = [(name, int(w)) for name, w in (d.split(":") for d in header[4].split(","))]
        table = np.loadtxt(fh, ndmin=2)
    if table.shape != (n, sum(w for _, w in dims)):
        raise ValueError(f"{path}: expected {n} rows of {sum(w for _, w in dims)} values, got {table.shape}")
    cols, y, x = 0, {}, None
    for name, w in dims:
        block = np.ascontiguousarray(table[:, cols:cols + w])  # same layout as generated data
        cols += w
        if name == "x":
            x = block
        elif name in INTEGER_KEYS:
            y[name] = block[:, 0].astype(np.int64)
        elif name in ("o", "r"):
            y[name] = block[:, 0]
        else:
            y[name] = block
    if x is None:
        raise ValueError(f"{path}: no x block")
    return task, Batch(x, y)
