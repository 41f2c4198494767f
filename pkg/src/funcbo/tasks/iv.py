"""Low-dimensional instrumental-variable benchmark with the dsprites generator structure.

Latents ``z ~ U(0,1)^4``: three instruments ``x = z[:3]`` and a hidden confounder
``c = z[3]``. The treatment is a fixed random linear embedding of all four latents
plus Gaussian noise, and

    o = (||A t||^2 - c0) / c1 + kappa (c - 1/2) + eps.

At full scale t is a 4096-pixel image, ``A`` is 10 x 4096 and
(c0, c1, kappa) = (5000, 1000, 32); here t has ``d_t`` entries and (c0, c1) are
set from pilot draws so that the structural function has mean 0 and std 1.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..batch import Batch
from ..numkit import make_rng, spd_solve

FULL_SCALE_CONSTANTS = {"c0": 5000.0, "c1": 1000.0, "kappa": 32.0, "sigma_t": 0.1, "sigma_o": 0.5, "a_rows": 10}
PILOT_SAMPLES = 100_000


@dataclass
class IvInstance:
    A: np.ndarray  # (a_rows, d_t), entries U(0, 1)
    emb: np.ndarray  # (4, d_t) latent -> treatment embedding
    c0: float
    c1: float
    kappa: float
    sigma_t: float = 0.1
    sigma_o: float = 0.5

    @property
    def d_t(self) -> int:
        return self.A.shape[1]

    def f_struct(self, t) -> np.ndarray:
        At = np.asarray(t, dtype=np.float64) @ self.A.T
        return (np.sum(At * At, axis=1) - self.c0) / self.c1

    def treatment(self, z, rng: np.random.Generator | None) -> np.ndarray:
        t = z @ self.emb
        if rng is not None and self.sigma_t > 0:
            t = t + self.sigma_t * rng.standard_normal(t.shape)
        return t

    def to_dict(self) -> dict:
        return {
            "A": self.A.tolist(),
            "emb": self.emb.tolist(),
            "c0": self.c0,
            "c1": self.c1,
            "kappa": self.kappa,
            "sigma_t": self.sigma_t,
            "sigma_o": self.sigma_o,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IvInstance":
        return cls(np.array(d["A"]), np.array(d["emb"]), d["c0"], d["c1"], d["kappa"], d["sigma_t"], d["sigma_o"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"format": "FUNCBO-IV-INSTANCE v1", **self.to_dict()}))

    @classmethod
    def load(cls, path) -> "IvInstance":
        d = json.loads(Path(path).read_text())
        if d.get("format") != "FUNCBO-IV-INSTANCE v1":
            raise ValueError(f"{path} is not an IV instance file")
        return cls.from_dict(d)


def make_iv_instance(seed: int, d_t: int = 16, kappa: float = 4.0, sigma_t: float = 0.1, sigma_o: float = 0.5,
                     a_rows: int = 10) -> IvInstance:
    """Random instance; (c0, c1) are the mean and std of ``||A t||^2`` over pilot draws."""
    rng = make_rng(seed, 201)
    A = rng.uniform(0.0, 1.0, size=(a_rows, d_t))
    emb = rng.standard_normal((4, d_t))
    inst = IvInstance(A, emb, 0.0, 1.0, kappa, sigma_t, sigma_o)
    pilot = make_rng(seed, 202)
    t = inst.treatment(pilot.uniform(0.0, 1.0, size=(PILOT_SAMPLES, 4)), pilot)
    q = np.sum((t @ A.T) ** 2, axis=1)
    inst.c0 = float(np.mean(q))
    inst.c1 = float(np.std(q))
    return inst


def gen_iv_data(inst: IvInstance, n: int, rng: np.random.Generator) -> Batch:
    """Samples with x = instruments (n, 3), y = {"t": (n, d_t), "o": (n,)}."""
    if n < 1:
        raise ValueError("n must be >= 1")
    z = rng.uniform(0.0, 1.0, size=(n, 4))
    t = inst.treatment(z, rng)
    o = inst.f_struct(t) + inst.kappa * (z[:, 3] - 0.5)
    if inst.sigma_o > 0:
        o = o + inst.sigma_o * rng.standard_normal(n)
    return Batch(z[:, :3], {"t": t, "o": o})


def eval_grid() -> np.ndarray:
    """Latent grid: 3 x 4 x 7 values for the instruments and 7 for the confounder (588 points).

    Values sit at the centers of ``k`` equal cells of [0, 1] so grid moments track U(0, 1).
    """
    axes = [(np.arange(k) + 0.5) / k for k in (3, 4, 7, 7)]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([m.ravel() for m in mesh])


def structural_mse(f, inst: IvInstance, n_test: int | None = None, rng=None) -> float:
    """Mean squared error of ``f(t)`` against the noise-free structural function on grid treatments.

    ``n_test`` larger than the grid tiles it; ``rng`` (optional) adds treatment noise.
    """
    z = eval_grid()
    if n_test is not None and n_test > 0:
        reps = -(-n_test // z.shape[0])
        z = np.tile(z, (reps, 1))[:n_test]
    t = inst.treatment(z, rng)
    pred = np.asarray(f(t), dtype=np.float64).reshape(-1)
    return float(np.mean((pred - inst.f_struct(t)) ** 2))


# ---------------------------------------------------------------------------
# feature maps used by the desk-scale methods


def treatment_features(t_train, n_components: int = 4):
    """Quadratic monomials of the leading principal components of the training treatments.

    Returns (feature map, dimension). The projection is estimated from data only.
    """
    from ..models import poly_features

    t_train = np.asarray(t_train, dtype=np.float64)
    mean = t_train.mean(axis=0)
    _, s, vt = np.linalg.svd(t_train - mean, full_matrices=False)
    P = vt[:n_components].T / (s[:n_components] / np.sqrt(t_train.shape[0]))
    poly = poly_features(2)

    def feats(t):
        return poly((np.asarray(t, dtype=np.float64) - mean) @ P)

    dim = poly(np.zeros((1, n_components))).shape[1]
    return feats, dim


def instrument_features(degree: int = 2):
    from ..models import poly_features

    poly = poly_features(degree)
    dim = poly(np.zeros((1, 3))).shape[1]
    return (lambda x: poly(2.0 * np.asarray(x) - 1.0)), dim


def direct_regression(psi, data: Batch, ridge: float = 1e-6) -> np.ndarray:
    """Least squares of o on psi(t), ignoring the instrument."""
    X = psi(data.y["t"])
    n = X.shape[0]
    return spd_solve(X.T @ X / n + ridge * np.eye(X.shape[1]), X.T @ data.y["o"] / n)


def iv_problem(inst: IvInstance, data: Batch, n_components: int = 4, degree: int = 2, omega0=None):
    """FuncID with linear inner/adjoint models on instrument features and a linear-in-features structural model.

    Returns (problem, psi) where ``psi`` is the treatment feature map fit on ``data``.
    """
    from ..funcid import BilevelProblem
    from ..losses import SquaredInnerToModel, SquaredOuter
    from ..models import LinearModel, LinearOuter

    psi, d_psi = treatment_features(data.y["t"], n_components)
    phi, d_phi = instrument_features(degree)
    outer = LinearOuter(psi, d_psi)

    def metric(omega, theta):
        return structural_mse(lambda t: psi(t) @ omega, inst)

    problem = BilevelProblem(
        inner_loss=SquaredInnerToModel(outer),
        outer_loss=SquaredOuter(d_psi),
        d_in=data,
        d_out=data,
        inner_model=LinearModel(phi, d_phi, 1, name=f"iv_poly{degree}"),
        omega0=np.zeros(d_psi) if omega0 is None else omega0,
        eval_metric=metric,
    )
    return problem, psi
