"""Structural-function MSE on the IV desk task: functional fit vs direct regression.

    python3 scripts/iv_compare.py [n_seeds]
"""

from __future__ import annotations

import sys

from funcbo.acceptance import iv_seed_result, load_pilot
from funcbo.harness.compare import quantiles


def main(n_seeds: int = 10) -> None:
    pilot = load_pilot()["iv"]
    rows = [iv_seed_result(seed, pilot) for seed in range(n_seeds)]
    print("seed  funcid_linear  direct  ratio")
    for r in rows:
        print(f"{r['seed']:4d}  {r['funcid_linear']:13.4f}  {r['direct']:6.4f}  {r['ratio']:.3f}")
    for key in ("funcid_linear", "direct"):
        q = quantiles([r[key] for r in rows])
        print(f"{key}: median {q[2]:.4f}  iqr [{q[1]:.4f}, {q[3]:.4f}]")


if __name__ == "__main__":
    main(int(sys.argv[1]) if len(sys.argv) > 1 else 10)
