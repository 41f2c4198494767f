import json
from pathlib import Path

import numpy as np
import pytest

from funcbo.funcid import CSV_COLUMNS
from funcbo.harness import cli
from funcbo.harness.compare import emit_comparison, quantiles
from funcbo.harness.config import ConfigError, from_sections, load_config
from funcbo.harness.io import (
    SUMMARY_FORMAT,
    atomic_write_text,
    read_dataset,
    read_records,
    read_summary,
    write_dataset,
    write_summary,
)
from funcbo.harness.runner import execute, expand_grid
from funcbo.numkit import make_rng
from funcbo.tasks.quad import make_quad

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

QUICK = """[run]
task = quad
method = {method}
seed = {seed}
out_dir = {out}

[optim]
N = 5
M = 3
K = 3
lr_out = 0.05
lr_in = 0.2
lr_adj = 0.2
ridge_in = 1e-3
ridge_adj = 1e-3

[task]
n = 40
"""


def write_cfg(tmp_path, method="funcid", seed=0, name="cfg.ini", out=None):
    out = out or str(tmp_path / f"out_{method}_{seed}")
    path = tmp_path / name
    path.write_text(QUICK.format(method=method, seed=seed, out=out))
    return path, Path(out)


# configuration


def sections(**over):
    base = {"run": {"task": "quad", "method": "funcid"}, "optim": {"N": "5"}}
    for sec, kv in over.items():
        base.setdefault(sec, {}).update(kv)
    return base


def test_config_defaults_and_types():
    cfg = from_sections(sections(optim={"lr_out": "0.5", "batch_in": "full"}))
    assert cfg.optim.N == 5 and cfg.optim.lr_out == 0.5 and cfg.optim.batch_in is None
    assert cfg.task_params["n"] == 200 and cfg.seed == 0


@pytest.mark.parametrize("bad", [
    {"extra": {"a": "1"}},
    {"optim": {"learning_rate": "0.1"}},
    {"task": {"n_atom": "3"}},
    {"run": {"method": "mle"}},
    {"run": {"task": "images"}},
    {"optim": {"N": "ten"}},
    {"task": {"n": "0"}},
    {"method": {"linear_solver": "lu"}},
])
def test_config_errors(bad):
    with pytest.raises(ConfigError):
        from_sections(sections(**bad))


def test_funcid_linear_fixes_adjoint_mode():
    cfg = from_sections(sections(run={"method": "funcid_linear"}))
    assert cfg.optim.adjoint_mode == "linear_exact"
    with pytest.raises(ConfigError):
        from_sections(sections(run={"method": "funcid_linear"}, optim={"adjoint_mode": "sgd"}))


def test_shipped_configs_parse():
    paths = sorted(CONFIGS.glob("*.ini"))
    assert len(paths) >= 6
    for p in paths:
        load_config(p)


# files


def test_atomic_write_leaves_no_temporaries(tmp_path):
    atomic_write_text(tmp_path / "a.txt", "one")
    atomic_write_text(tmp_path / "a.txt", "two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]


def test_summary_roundtrip(tmp_path):
    write_summary(tmp_path / "s.json", {"final_omega": np.arange(3.0), "n": np.int64(2)})
    s = read_summary(tmp_path / "s.json")
    assert s["format"] == SUMMARY_FORMAT and s["final_omega"] == [0.0, 1.0, 2.0] and s["n"] == 2
    (tmp_path / "t.json").write_text("{}")
    with pytest.raises(ValueError):
        read_summary(tmp_path / "t.json")


def test_dataset_roundtrip(tmp_path):
    batch = make_quad(0).sample(25, make_rng(1))
    write_dataset(tmp_path / "d.txt", "quad", batch)
    assert (tmp_path / "d.txt").read_text().splitlines()[0] == "FUNCBO-DATA v1 quad 25 x:2,atom:1,o:1,t:3"
    task, back = read_dataset(tmp_path / "d.txt")
    assert task == "quad"
    assert np.array_equal(back.x, batch.x)
    assert all(np.array_equal(back.y[k], batch.y[k]) for k in batch.y)
    assert back.y["atom"].dtype == np.int64


def test_dataset_rejects_truncated_file(tmp_path):
    batch = make_quad(0).sample(5, make_rng(1))
    write_dataset(tmp_path / "d.txt", "quad", batch)
    lines = (tmp_path / "d.txt").read_text().splitlines()
    (tmp_path / "d.txt").write_text("\n".join(lines[:-1]) + "\n")
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "d.txt")
    (tmp_path / "e.txt").write_text("SOMETHING v1\n")
    with pytest.raises(ValueError):
        read_dataset(tmp_path / "e.txt")


# runs


def test_run_writes_records_and_summary(tmp_path):
    path, out = write_cfg(tmp_path)
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_OK
    rows = read_records(out / "funcid_records.csv")
    assert [r["iter"] for r in rows] == [0, 1, 2, 3, 4]
    assert all(r["wall_ms"] is None for r in rows)  # timing is off by default
    s = read_summary(out / "summary.json")
    assert s["n_records"] == 5 and len(s["final_omega"]) == 3
    assert s["config"]["run"]["method"] == "funcid" and s["wall_time_s"] is None
    assert "oracle_grad_norm" in s["final_metrics"]


def test_same_seed_gives_identical_records(tmp_path):
    p1, o1 = write_cfg(tmp_path, name="a.ini", out=str(tmp_path / "a"))
    p2, o2 = write_cfg(tmp_path, name="b.ini", out=str(tmp_path / "b"))
    assert cli.main(["run", "--config", str(p1)]) == 0
    assert cli.main(["run", "--config", str(p2)]) == 0
    assert (o1 / "funcid_records.csv").read_bytes() == (o2 / "funcid_records.csv").read_bytes()
    assert cli.main(["run", "--config", str(p2), "--seed", "1", "--out", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c" / "funcid_records.csv").read_bytes() != (o1 / "funcid_records.csv").read_bytes()


@pytest.mark.parametrize("method", ["aid", "value_penalty", "gradient_penalty", "funcid_linear"])
def test_every_quad_method_runs(tmp_path, method):
    path, out = write_cfg(tmp_path, method=method)
    assert cli.main(["run", "--config", str(path)]) == 0
    assert len(read_records(out / f"{method}_records.csv")) == 5


def test_missing_config_exits_2_without_output(tmp_path, capsys):
    out = tmp_path / "never"
    code = cli.main(["run", "--config", str(tmp_path / "nope.ini"), "--out", str(out)])
    assert code == cli.EXIT_CONFIG and not out.exists()
    assert "config error" in capsys.readouterr().err


def test_bad_config_value_exits_2(tmp_path):
    path, out = write_cfg(tmp_path)
    path.write_text(path.read_text().replace("N = 5", "N = -1"))
    assert cli.main(["run", "--config", str(path)]) == cli.EXIT_CONFIG
    assert not out.exists()


def test_unknown_subcommand_exits_2():
    assert cli.main(["fly"]) == cli.EXIT_CONFIG


def test_failed_run_keeps_partial_records_and_no_summary(tmp_path):
    path, out = write_cfg(tmp_path, method="value_penalty")
    text = path.read_text().replace("N = 5", "N = 2000").replace("lr_in = 0.2", "lr_in = 50").replace(
        "lr_out = 0.05", "lr_out = 50")
    path.write_text(text)
    with np.errstate(all="ignore"):
        assert cli.main(["run", "--config", str(path)]) == cli.EXIT_RUN
    assert (out / "value_penalty_records.csv").read_text().startswith(",".join(CSV_COLUMNS))
    assert not (out / "summary.json").exists()


def test_gen_data_then_run_from_file(tmp_path):
    data = tmp_path / "quad.txt"
    assert cli.main(["gen-data", "--task", "quad", "--n", "40", "--seed", "0", "--out", str(data)]) == 0
    path, out = write_cfg(tmp_path)
    path.write_text(path.read_text().replace("n = 40", f"data = {data}"))
    assert cli.main(["run", "--config", str(path)]) == 0
    direct, out2 = write_cfg(tmp_path, name="direct.ini", out=str(tmp_path / "direct"))
    assert cli.main(["run", "--config", str(direct)]) == 0
    # a file written from seed 0 holds the same samples the generator draws inline
    assert (out / "funcid_records.csv").read_bytes() == (out2 / "funcid_records.csv").read_bytes()


def test_gen_data_rejects_empty():
    assert cli.main(["gen-data", "--task", "quad", "--n", "0", "--out", "x"]) == cli.EXIT_CONFIG


# sweeps and comparison


def test_expand_grid_product():
    out = expand_grid({"run": {"seed": "0"}}, {"grid": {"run.seed": "0, 1", "optim.N": "3,4,5"}})
    assert len(out) == 6
    assert {(s["run"]["seed"], s["optim"]["N"]) for s in out} == {(a, b) for a in "01" for b in "345"}
    with pytest.raises(ConfigError):
        expand_grid({}, {"grid": {"seed": "0"}})
    with pytest.raises(ConfigError):
        expand_grid({}, {"other": {"run.seed": "0"}})


def test_sweep_and_compare(tmp_path, capsys):
    path, _ = write_cfg(tmp_path)
    grid = tmp_path / "g.grid"
    grid.write_text("[grid]\nrun.seed = 0, 1, 2\n")
    root = tmp_path / "sweep"
    assert cli.main(["sweep", "--config", str(path), "--grid", str(grid), "--out", str(root)]) == 0
    dirs = sorted(p for p in root.iterdir())
    assert len(dirs) == 3
    table = tmp_path / "table.csv"
    missing = tmp_path / "not_a_run"
    assert cli.main(["compare", str(root), str(missing), "--metric", "oracle_grad_norm", "--out", str(table)]) == 0
    assert f"skipping {missing}" in capsys.readouterr().err
    header, row = table.read_text().splitlines()
    assert header == "method,metric,min,q1,median,q3,max,n_seeds"
    vals = [read_summary(d / "summary.json")["final_metrics"]["oracle_grad_norm"] for d in dirs]
    fields = row.split(",")
    assert fields[0] == "funcid" and fields[-1] == "3"
    assert float(fields[4]) == sorted(vals)[1]


def test_quantiles():
    assert quantiles([4.0]) == (4.0, 4.0, 4.0, 4.0, 4.0)
    assert quantiles([1.0, 3.0])[2] == 2.0
    rng = make_rng(0)
    v = rng.standard_normal(20)
    s = np.sort(v)
    lo, q1, med, q3, hi = quantiles(v)
    # linear interpolation on 20 sorted values: positions 0, 4.75, 9.5, 14.25, 19
    assert (lo, hi) == (s[0], s[-1])
    assert med == pytest.approx((s[9] + s[10]) / 2)
    assert q1 == pytest.approx(s[4] + 0.75 * (s[5] - s[4]))
    assert q3 == pytest.approx(s[14] + 0.25 * (s[15] - s[14]))


def test_compare_skips_runs_without_metric(tmp_path):
    d = tmp_path / "r"
    d.mkdir()
    write_summary(d / "summary.json", {"config": {"run": {"method": "aid"}}, "final_metrics": {"eval_metric": None}})
    log = []

    class Err:
        def write(self, s):
            log.append(s)

    table = emit_comparison([d], err=Err())
    assert table == "method,metric,min,q1,median,q3,max,n_seeds\n"
    assert any("no final eval_metric" in s for s in log)


def test_execute_records_timing_when_enabled(tmp_path):
    cfg = from_sections({"run": {"task": "quad", "method": "funcid", "out_dir": str(tmp_path / "t"),
                                 "timing": "true"}, "optim": {"N": "3"}, "task": {"n": "30"}})
    summary = execute(cfg)
    assert summary["wall_time_s"] > 0
    rows = read_records(tmp_path / "t" / "funcid_records.csv")
    assert all(r["wall_ms"] is not None and r["wall_ms"] >= 0 for r in rows)
    assert json.loads((tmp_path / "t" / "summary.json").read_text())["format"] == SUMMARY_FORMAT
