"""Greedy-policy agreement on toy MDPs: functional model learning vs maximum likelihood,
with a full-rank and a rank-limited (misspecified) transition model.

    python3 scripts/rl_compare.py [n_seeds]
"""

from __future__ import annotations

import sys

from funcbo.acceptance import load_pilot
from funcbo.baselines import mle_run
from funcbo.funcid import funcid_run
from funcbo.numkit import make_rng
from funcbo.tasks import rl


def run_seed(seed: int, pilot: dict, rank: int | None) -> dict:
    mdp = rl.gen_mdp(make_rng(seed, 301))
    buffer = rl.replay_collect(mdp, pilot["buffer"], make_rng(seed, 302))
    cfg = rl.default_rl_config(N=pilot["N"], lr_out=pilot["lr_out"])
    out = {}
    setup = rl.rl_problem(mdp, buffer, rank=rank, tau=pilot["tau"])
    _, rec = funcid_run(setup.problem, cfg, seed)
    out["funcid"] = rec[-1].eval_metric
    setup = rl.rl_problem(mdp, buffer, rank=rank, tau=pilot["tau"])
    _, rec = mle_run(setup, cfg, pilot["tau"], seed)
    out["mle"] = rec[-1].eval_metric
    return out


def main(n_seeds: int = 10) -> None:
    pilot = load_pilot()["rl"]
    for rank in (None, 2):
        label = "full rank" if rank is None else f"rank {rank}"
        rows = [run_seed(seed, pilot, rank) for seed in range(n_seeds)]
        for key in ("funcid", "mle"):
            vals = [r[key] for r in rows]
            print(f"{label:9s} {key:6s} mean policy match {sum(vals) / len(vals):.3f}  "
                  f"exact on {sum(v == 1.0 for v in vals)}/{n_seeds} seeds")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
