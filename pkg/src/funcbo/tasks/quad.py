"""Linear-Gaussian IV testbed where every inner/adjoint problem has a closed form.

Instruments take one of ``n_atoms`` values ``x_k`` in R^2, so the empirical L2 space
over instruments is finite-dimensional. The inner model is ``h(x) = V phi(x)`` with
Gaussian bumps ``phi_j(x) = exp(-||x - c_j||^2 / (2 s^2))``. With one center per atom
the class contains every function of the instrument (linear-realizable); with fewer
centers it is under-complete.

Treatment and outcome:
    t = G[k] + e_c * c + sigma_t * noise      (c ~ U(0, 1) hidden confounder)
    o = beta . t + kappa * (c - 1/2) + sigma_o * noise
and the structural model is ``f_w(t) = w . t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..batch import Batch
from ..funcid import BilevelProblem
from ..losses import SquaredInnerToModel, SquaredOuter
from ..models import LinearModel, LinearOuter, raw_features
from ..numkit import make_rng


@dataclass
class QuadInstance:
    atoms: np.ndarray  # (K, 2)
    centers: np.ndarray  # (d1, 2)
    width: float
    G: np.ndarray  # (K, d_t) treatment mean per atom
    e_c: np.ndarray  # (d_t,) confounder loading
    beta: np.ndarray  # (d_t,) structural coefficients
    kappa: float = 1.0
    sigma_t: float = 0.3
    sigma_o: float = 0.1

    @property
    def n_atoms(self) -> int:
        return self.atoms.shape[0]

    @property
    def d_t(self) -> int:
        return self.G.shape[1]

    @property
    def d_features(self) -> int:
        return self.centers.shape[0]

    def phi(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        d2 = np.sum((xs[:, None, :] - self.centers[None, :, :]) ** 2, axis=2)
        return np.exp(-d2 / (2.0 * self.width**2))

    def inner_model(self) -> LinearModel:
        return LinearModel(self.phi, self.d_features, 1, name="quad_rbf")

    def outer_model(self) -> LinearOuter:
        return LinearOuter(raw_features, self.d_t)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        k = rng.integers(0, self.n_atoms, size=n)
        c = rng.uniform(0.0, 1.0, size=n)
        t = self.G[k] + c[:, None] * self.e_c[None, :] + self.sigma_t * rng.standard_normal((n, self.d_t))
        o = t @ self.beta + self.kappa * (c - 0.5) + self.sigma_o * rng.standard_normal(n)
        return Batch(self.atoms[k], {"t": t, "o": o, "atom": k})

    def under_complete(self, n_centers: int) -> "QuadInstance":
        """Same data law, inner class spanned by only the first ``n_centers`` bumps."""
        return QuadInstance(
            self.atoms, self.centers[:n_centers], self.width, self.G, self.e_c, self.beta,
            self.kappa, self.sigma_t, self.sigma_o,
        )


def make_quad(seed: int, n_atoms: int = 8, d_t: int = 3, width: float = 0.35, **kw) -> QuadInstance:
    rng = make_rng(seed, 101)
    atoms = rng.uniform(-1.0, 1.0, size=(n_atoms, 2))
    # spread atoms so that the bump Gram matrix stays well conditioned
    for _ in range(200):
        d = np.linalg.norm(atoms[:, None] - atoms[None], axis=2) + np.eye(n_atoms) * 10
        i, j = np.unravel_index(np.argmin(d), d.shape)
        if d[i, j] > 0.5:
            break
        atoms[i] = rng.uniform(-1.0, 1.0, size=2)
    G = rng.standard_normal((n_atoms, d_t))
    e_c = rng.standard_normal(d_t)
    beta = rng.standard_normal(d_t)
    return QuadInstance(atoms, atoms.copy(), width, G, e_c, beta, **kw)


def quad_problem(inst: QuadInstance, data: Batch, omega0=None, **kw) -> BilevelProblem:
    outer = inst.outer_model()
    omega0 = np.zeros(inst.d_t) if omega0 is None else omega0
    return BilevelProblem(
        inner_loss=SquaredInnerToModel(outer),
        outer_loss=SquaredOuter(inst.d_t),
        d_in=data,
        d_out=data,
        inner_model=inst.inner_model(),
        omega0=omega0,
        **kw,
    )
