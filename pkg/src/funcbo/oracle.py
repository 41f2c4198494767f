"""Ground-truth quantities for the quadratic testbed.

Nothing here calls into :mod:`funcbo.funcid`; the closed forms are assembled
directly from the data arrays so they can be used to check the algorithm.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .batch import Batch
from .numkit import NonFiniteError, make_rng, spd_solve


@dataclass
class OracleReport:
    quantity: str
    algorithm: float
    oracle: float
    abs_error: float
    rel_error: float
    tolerance: float
    passed: bool

    @classmethod
    def compare(cls, quantity: str, algorithm, oracle, tolerance: float) -> "OracleReport":
        a = np.asarray(algorithm, dtype=np.float64)
        o = np.asarray(oracle, dtype=np.float64)
        abs_err = float(np.linalg.norm(a - o))
        o_norm = float(np.linalg.norm(o))
        rel = abs_err / max(1e-12, o_norm)
        return cls(quantity, float(np.linalg.norm(a)), o_norm, abs_err, rel, tolerance, rel <= tolerance)

    def to_dict(self) -> dict:
        return asdict(self)


class QuadOracle:
    """Closed forms for ``f_w(t) = w.t``, squared losses and a ridge-regularized linear inner class.

    Inner objective: mean (w.t_i - V phi_i)^2 + ridge/2 ||V||^2 on ``d_in``.
    Outer objective: mean (o_j - V phi_j)^2 on ``d_out``.
    """

    def __init__(self, phi_fn, d_in: Batch, d_out: Batch | None = None, ridge: float = 0.0):
        self.d_in = d_in
        self.d_out = d_in if d_out is None else d_out
        self.ridge = ridge
        self.Phi = np.asarray(phi_fn(self.d_in.x), dtype=np.float64)
        self.Psi = self.Phi if d_out is None else np.asarray(phi_fn(self.d_out.x), dtype=np.float64)
        self.T = np.asarray(self.d_in.y["t"], dtype=np.float64)
        self.o = np.asarray(self.d_out.y["o"], dtype=np.float64)
        n, d1 = self.Phi.shape
        self.gram = 2.0 * self.Phi.T @ self.Phi / n + ridge * np.eye(d1)
        # h_w on D_out is linear in w: h = S w
        self.S = self.Psi @ spd_solve(self.gram, 2.0 * self.Phi.T @ self.T / n)

    def exact_inner_solve(self, omega) -> np.ndarray:
        n = self.Phi.shape[0]
        rhs = 2.0 * self.Phi.T @ (self.T @ np.asarray(omega, dtype=np.float64)) / n
        return spd_solve(self.gram, rhs)

    def inner_residual_grad(self, omega, V) -> np.ndarray:
        n = self.Phi.shape[0]
        resid = self.Phi @ V - self.T @ omega
        return 2.0 * self.Phi.T @ resid / n + self.ridge * V

    def exact_adjoint_solve(self, omega, V=None, ridge_adj: float | None = None) -> np.ndarray:
        """Minimize the restricted adjoint quadratic by assembling it explicitly."""
        ridge_adj = self.ridge if ridge_adj is None else ridge_adj
        V = self.exact_inner_solve(omega) if V is None else V
        n, d1 = self.Phi.shape
        m = self.Psi.shape[0]
        Q = np.zeros((d1, d1))
        for i in range(n):
            Q += 2.0 * np.outer(self.Phi[i], self.Phi[i])  # per-sample Hessian is 2
        Q = Q / n + ridge_adj * np.eye(d1)
        d = 2.0 * (self.Psi @ V - self.o)
        lin = np.zeros(d1)
        for j in range(m):
            lin += self.Psi[j] * d[j]
        return spd_solve(Q, -lin / m)

    def F(self, omega) -> float:
        V = self.exact_inner_solve(omega)
        r = self.o - self.Psi @ V
        return float(np.mean(r * r))

    def grad(self, omega) -> np.ndarray:
        m = self.S.shape[0]
        return -2.0 * self.S.T @ (self.o - self.S @ np.asarray(omega)) / m

    def hessian(self) -> np.ndarray:
        m = self.S.shape[0]
        return 2.0 * self.S.T @ self.S / m

    def minimizer(self) -> np.ndarray:
        return np.linalg.lstsq(self.S, self.o, rcond=None)[0]


def fd_total_grad(F, omega, eps: float = 1e-5) -> np.ndarray:
    """Central differences of ``F`` with steps ``eps * (1 + |w_i|)``."""
    omega = np.asarray(omega, dtype=np.float64)
    g = np.empty_like(omega)
    for i in range(omega.shape[0]):
        h = eps * (1.0 + abs(omega[i]))
        e = np.zeros_like(omega)
        e[i] = h
        fp, fm = F(omega + e), F(omega - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"F is non-finite near coordinate {i}")
        g[i] = (fp - fm) / (2 * h)
    return g


def per_point_adjoint(values_H, values_d, keys) -> dict:
    """Unconstrained minimizer of sum_i 1/2 a(k_i)^T H_i a(k_i) + a(k_i)^T d_i over a function of the key.

    Solves one small system per distinct key; used as the reference for closed-form adjoints.
    """
    keys = np.asarray(keys)
    out = {}
    for k in np.unique(keys, axis=0):
        mask = np.all(keys.reshape(len(keys), -1) == np.asarray(k).reshape(1, -1), axis=1)
        H = np.sum(values_H[mask], axis=0)
        d = np.sum(values_d[mask], axis=0)
        out[tuple(np.atleast_1d(k).tolist())] = spd_solve(H, -d)
    return out


@dataclass
class BiasRow:
    budget: str
    median_bias: float
    biases: list


def bias_probe(make_case, budgets, seeds, run_case) -> list[BiasRow]:
    """Median gradient bias per budget.

    ``make_case(seed)`` builds (problem, omega, oracle_grad); ``run_case(case, budget, seed)``
    returns the algorithm's gradient estimate.
    """
    cases = {s: make_case(s) for s in seeds}
    rows = []
    for budget in budgets:
        biases = []
        for s in seeds:
            case = cases[s]
            g = run_case(case, budget, s)
            biases.append(float(np.linalg.norm(g - case["oracle_grad"])))
        rows.append(BiasRow(str(budget), float(np.median(biases)), biases))
    return rows
