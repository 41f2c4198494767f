"""Functional implicit differentiation: inner fit, adjoint fit, total gradient, outer loop."""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields
from typing import Callable

import numpy as np

from .batch import Batch
from .losses import PointwiseLoss
from .models import LinearModel, Mlp, mlp_hidden_features
from .numkit import NonFiniteError, NotPositiveDefiniteError, make_rng, spd_solve

INNER_MODES = ("sgd", "exact")
ADJOINT_MODES = ("sgd", "linear_exact", "closed_form")
OPTIMIZERS = ("sgd", "adam")


class FuncIdError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration and optimizers


@dataclass
class OptimConfig:
    N: int = 100
    M: int = 20
    K: int = 20
    lr_out: float = 1e-2
    lr_in: float = 1e-2
    lr_adj: float = 1e-2
    batch_in: int | None = None  # None -> full batch
    batch_out: int | None = None
    warm_start: bool = True
    opt_out: str = "sgd"
    opt_in: str = "sgd"
    opt_adj: str = "sgd"
    ridge_in: float = 0.0
    ridge_adj: float = 0.0
    inner_mode: str = "sgd"
    adjoint_mode: str = "sgd"

    def __post_init__(self):
        if self.N < 0 or self.M < 0 or self.K < 0:
            raise ValueError("iteration counts must be non-negative")
        if self.inner_mode == "sgd" and self.N > 0 and self.M < 1:
            raise ValueError("M must be >= 1 unless the exact inner solver is selected")
        if self.adjoint_mode == "sgd" and self.N > 0 and self.K < 1:
            raise ValueError("K must be >= 1 unless a closed-form adjoint is selected")
        for name in ("lr_out", "lr_in", "lr_adj"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ("ridge_in", "ridge_adj"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("opt_out", "opt_in", "opt_adj"):
            if getattr(self, name) not in OPTIMIZERS:
                raise ValueError(f"{name} must be one of {OPTIMIZERS}")
        if self.inner_mode not in INNER_MODES:
            raise ValueError(f"inner_mode must be one of {INNER_MODES}")
        if self.adjoint_mode not in ADJOINT_MODES:
            raise ValueError(f"adjoint_mode must be one of {ADJOINT_MODES}")
        for name in ("batch_in", "batch_out"):
            b = getattr(self, name)
            if b is not None and b < 1:
                raise ValueError(f"{name} must be >= 1 or None")


class Sgd:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, params, grad):
        return params - self.lr * grad


class Adam:
    def __init__(self, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = None
        self.v = None
        self.t = 0

    def step(self, params, grad):
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1**self.t)
        vhat = self.v / (1 - self.beta2**self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def make_optimizer(kind: str, lr: float):
    return Adam(lr) if kind == "adam" else Sgd(lr)


# ---------------------------------------------------------------------------
# problem


@dataclass
class BilevelProblem:
    inner_loss: PointwiseLoss
    outer_loss: PointwiseLoss
    d_in: Batch
    d_out: Batch
    inner_model: object
    omega0: np.ndarray
    adjoint_model: object | None = None  # None: same architecture as the inner model
    eval_metric: Callable[[np.ndarray, np.ndarray], float] | None = None
    oracle_grad: Callable[[np.ndarray], np.ndarray] | None = None
    after_outer_step: Callable[[np.ndarray, np.ndarray, int], None] | None = None

    def __post_init__(self):
        if len(self.d_in) == 0 or len(self.d_out) == 0:
            raise ValueError("D_in and D_out must be nonempty")
        if self.adjoint_model is None:
            self.adjoint_model = self.inner_model
        self.omega0 = np.asarray(self.omega0, dtype=np.float64)

    @property
    def d_v(self) -> int:
        return self.inner_model.d_out


def sample_pair(problem: BilevelProblem, cfg: OptimConfig, rng) -> tuple[Batch, Batch]:
    """Draw (B_in, B_out); when both sides share a dataset and batch size, they share the draw."""
    if problem.d_in is problem.d_out and cfg.batch_in == cfg.batch_out:
        b = problem.d_in.sample(rng, cfg.batch_in)
        return b, b
    return problem.d_in.sample(rng, cfg.batch_in), problem.d_out.sample(rng, cfg.batch_out)


# ---------------------------------------------------------------------------
# empirical objectives


def empirical_inner_loss(problem: BilevelProblem, omega, theta, batch: Batch, ridge: float = 0.0):
    """Mean inner loss of ``tau(theta)`` on ``batch`` plus ``ridge/2 ||theta||^2``, and its gradient."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    model = problem.inner_model
    v = model.forward(theta, batch.x)
    n = len(batch)
    value = float(np.mean(problem.inner_loss.value(omega, v, batch.x, batch.y))) + 0.5 * ridge * float(theta @ theta)
    gv = problem.inner_loss.grad_v(omega, v, batch.x, batch.y)
    grad = model.vjp_params(theta, batch.x, gv / n) + ridge * theta
    return value, grad


@dataclass
class AdjointProblem:
    """Quadratic adjoint objective data at a fixed inner estimate.

    The curvature term is applied as per-sample Hessian-vector products in output space.
    """

    omega: np.ndarray
    inner_loss: PointwiseLoss
    b_in: Batch
    b_out: Batch
    v_in: np.ndarray  # h(x) on B_in
    d_out: np.ndarray  # d_v l_out on B_out

    def hvp(self, a_in: np.ndarray) -> np.ndarray:
        return self.inner_loss.hvp_v(self.omega, self.v_in, self.b_in.x, self.b_in.y, a_in)

    def hessians(self) -> np.ndarray:
        return self.inner_loss.hess_v(self.omega, self.v_in, self.b_in.x, self.b_in.y)

    def value(self, a_in, a_out) -> float:
        a_in = np.asarray(a_in).reshape(self.v_in.shape)
        a_out = np.asarray(a_out).reshape(self.d_out.shape)
        return 0.5 * float(np.mean(np.sum(a_in * self.hvp(a_in), axis=1))) + float(
            np.mean(np.sum(a_out * self.d_out, axis=1))
        )


def adjoint_problem(problem: BilevelProblem, omega, theta, b_in: Batch, b_out: Batch) -> AdjointProblem:
    h = problem.inner_model
    v_in = h.forward(theta, b_in.x)
    v_out = v_in if b_out is b_in else h.forward(theta, b_out.x)
    d = problem.outer_loss.grad_v(omega, v_out, b_out.x, b_out.y)
    return AdjointProblem(np.asarray(omega), problem.inner_loss, b_in, b_out, v_in, d)


def empirical_adjoint_loss(ap: AdjointProblem, model, xi, ridge: float = 0.0):
    """Adjoint objective of ``nu(xi)`` plus ``ridge/2 ||xi||^2``, and its gradient in ``xi``."""
    a_in = model.forward(xi, ap.b_in.x)
    a_out = a_in if ap.b_out is ap.b_in else model.forward(xi, ap.b_out.x)
    Ha = ap.hvp(a_in)
    n_in, n_out = len(ap.b_in), len(ap.b_out)
    value = (
        0.5 * float(np.sum(a_in * Ha)) / n_in
        + float(np.sum(a_out * ap.d_out)) / n_out
        + 0.5 * ridge * float(xi @ xi)
    )
    if ap.b_out is ap.b_in:
        grad = model.vjp_params(xi, ap.b_in.x, Ha / n_in + ap.d_out / n_out)
    else:
        grad = model.vjp_params(xi, ap.b_in.x, Ha / n_in) + model.vjp_params(xi, ap.b_out.x, ap.d_out / n_out)
    return value, grad + ridge * xi


# ---------------------------------------------------------------------------
# closed-form paths


def _isotropic_curvature(loss: PointwiseLoss, omega, v, batch: Batch) -> np.ndarray:
    """Per-sample scalar ``c_i`` with ``hess_v = c_i I``; raises if the Hessian is not isotropic."""
    H = loss.hess_v(omega, v, batch.x, batch.y)
    d = H.shape[1]
    c = H[:, 0, 0]
    if not np.allclose(H, c[:, None, None] * np.eye(d)[None], atol=1e-12):
        raise FuncIdError("closed-form solves need an isotropic output-space Hessian")
    return c


def linear_inner_solve(problem: BilevelProblem, omega, batch: Batch, ridge: float) -> np.ndarray:
    """Exact minimizer of the empirical inner loss over a LinearModel (loss quadratic in v)."""
    model = problem.inner_model
    if not isinstance(model, LinearModel):
        raise FuncIdError("exact inner solves need a LinearModel")
    phi = model.phi(batch.x)
    n, d1 = phi.shape
    v0 = np.zeros((n, model.d_out))
    c = _isotropic_curvature(problem.inner_loss, omega, v0, batch)
    g0 = problem.inner_loss.grad_v(omega, v0, batch.x, batch.y)  # = -c T
    A = (phi * c[:, None]).T @ phi / n + ridge * np.eye(d1)
    try:
        W_t = spd_solve(A, -phi.T @ g0 / n)
    except NotPositiveDefiniteError as err:
        raise FuncIdError(f"inner normal equations are singular ({err}); use ridge_in > 0") from err
    return W_t.T.ravel()


def linear_adjoint_solve(phi_in, phi_out, d_out, ridge: float = 1e-6, curvature=2.0) -> np.ndarray:
    """Weights ``W`` (d_v x d1) of the adjoint restricted to ``a(x) = W phi(x)``.

    Solves ``(Phi^T diag(c) Phi / n + ridge I) W^T = -Psi^T d / m`` where ``c`` is the
    per-sample isotropic curvature of the inner loss.
    """
    phi_in = np.asarray(phi_in, dtype=np.float64)
    phi_out = np.asarray(phi_out, dtype=np.float64)
    d_out = np.asarray(d_out, dtype=np.float64)
    if d_out.ndim == 1:
        d_out = d_out[:, None]
    n, d1 = phi_in.shape
    m = phi_out.shape[0]
    c = np.broadcast_to(np.asarray(curvature, dtype=np.float64), (n,))
    A = (phi_in * c[:, None]).T @ phi_in / n + ridge * np.eye(d1)
    try:
        W_t = spd_solve(A, -phi_out.T @ d_out / m)
    except NotPositiveDefiniteError as err:
        raise FuncIdError(f"adjoint normal equations are singular ({err}); use ridge_adj > 0") from err
    return W_t.T


def adjoint_features(problem: BilevelProblem, theta):
    """Feature map inherited from the inner model for the linear adjoint."""
    h = problem.inner_model
    if isinstance(h, LinearModel):
        return h.phi
    if isinstance(h, Mlp):
        return mlp_hidden_features(h, theta)
    raise FuncIdError(f"cannot derive adjoint features from {type(h).__name__}")


def closed_form_adjoint(ap: AdjointProblem, ridge: float = 0.0) -> np.ndarray:
    """Unconstrained per-sample adjoint values ``a_i = -H_i^{-1} d_i`` when B_in = B_out."""
    if ap.b_out is not ap.b_in and not (
        len(ap.b_in) == len(ap.b_out) and np.array_equal(ap.b_in.x, ap.b_out.x)
    ):
        raise FuncIdError("closed-form adjoint needs B_in and B_out to be the same batch")
    if ridge != 0.0:
        raise FuncIdError("closed-form adjoint needs an unregularized adjoint objective")
    H = ap.hessians()
    return -np.linalg.solve(H, ap.d_out[:, :, None])[:, :, 0]


def closed_form_adjoint_rl(problem: BilevelProblem, omega, theta, batch: Batch, ridge: float = 0.0) -> np.ndarray:
    """Adjoint values ``-(h(x_i) - T_i)`` on a shared batch (Bellman losses have unit curvature)."""
    return closed_form_adjoint(adjoint_problem(problem, omega, theta, batch, batch), ridge)


# ---------------------------------------------------------------------------
# InnerOpt / AdjointOpt / TotalGrad


def inner_opt(problem: BilevelProblem, omega, theta0, cfg: OptimConfig, rng):
    """Returns (theta, trace of per-step inner losses)."""
    if cfg.inner_mode == "exact":
        theta = linear_inner_solve(problem, omega, problem.d_in, cfg.ridge_in)
        value, _ = empirical_inner_loss(problem, omega, theta, problem.d_in, cfg.ridge_in)
        return theta, [value]
    theta = np.array(theta0, dtype=np.float64, copy=True)
    opt = make_optimizer(cfg.opt_in, cfg.lr_in)
    trace = []
    for m in range(cfg.M):
        batch = problem.d_in.sample(rng, cfg.batch_in)
        value, grad = empirical_inner_loss(problem, omega, theta, batch, cfg.ridge_in)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"inner optimization produced a non-finite loss at step {m}")
        trace.append(value)
        theta = opt.step(theta, grad)
    return theta, trace


def adjoint_opt(problem: BilevelProblem, omega, xi0, theta, cfg: OptimConfig, rng):
    """K optimizer steps on the empirical adjoint objective; returns (xi, trace)."""
    xi = np.array(xi0, dtype=np.float64, copy=True)
    opt = make_optimizer(cfg.opt_adj, cfg.lr_adj)
    trace = []
    for k in range(cfg.K):
        b_in, b_out = sample_pair(problem, cfg, rng)
        ap = adjoint_problem(problem, omega, theta, b_in, b_out)
        value, grad = empirical_adjoint_loss(ap, problem.adjoint_model, xi, cfg.ridge_adj)
        if not (np.isfinite(value) and np.all(np.isfinite(grad))):
            raise NonFiniteError(f"adjoint optimization produced a non-finite loss at step {k}")
        trace.append(value)
        xi = opt.step(xi, grad)
    return xi, trace


@dataclass
class GradInfo:
    g_exp: np.ndarray
    g_imp: np.ndarray
    hvp_dim: int


def total_grad(problem: BilevelProblem, omega, theta, a_in, b_in: Batch, b_out: Batch):
    """Explicit plus implicit gradient; ``a_in`` holds adjoint values on B_in inputs."""
    h = problem.inner_model
    v_out = h.forward(theta, b_out.x)
    v_in = v_out if b_in is b_out else h.forward(theta, b_in.x)
    g_exp = problem.outer_loss.grad_omega(omega, v_out, b_out.x, b_out.y)
    g_imp = problem.inner_loss.cross_apply(omega, v_in, b_in.x, b_in.y, a_in)
    return g_exp + g_imp, GradInfo(g_exp, g_imp, problem.d_v)


# ---------------------------------------------------------------------------
# outer loop

CSV_COLUMNS = (
    "iter",
    "outer_loss",
    "inner_loss",
    "adjoint_loss",
    "grad_norm",
    "grad_bias",
    "hvp_dim",
    "inner_steps",
    "adjoint_steps",
    "wall_ms",
    "eval_metric",
)


@dataclass
class RunRecord:
    iter: int
    outer_loss: float
    inner_loss: float
    adjoint_loss: float | None  # None for methods without an adjoint
    grad_norm: float
    grad_bias: float | None
    hvp_dim: int
    inner_steps: int
    adjoint_steps: int
    wall_ms: float | None
    eval_metric: float | None

    def csv_row(self) -> str:
        out = []
        for f in fields(self):
            val = getattr(self, f.name)
            if val is None:
                out.append("")
            elif isinstance(val, float):
                out.append(repr(val))
            else:
                out.append(str(val))
        return ",".join(out)


@dataclass
class RunState:
    omega: np.ndarray
    theta: np.ndarray
    xi: np.ndarray | None
    trajectory: list = field(default_factory=list)
    records: list = field(default_factory=list)


def adjoint_values(problem: BilevelProblem, cfg: OptimConfig, omega, theta, xi, b_in, b_out, rng):
    """Run the configured adjoint route; returns (xi, a values on B_in, adjoint loss, steps)."""
    if cfg.adjoint_mode == "closed_form":
        ap = adjoint_problem(problem, omega, theta, b_in, b_out)
        a_in = closed_form_adjoint(ap, cfg.ridge_adj)
        return xi, a_in, ap.value(a_in, a_in), 0
    if cfg.adjoint_mode == "linear_exact":
        feats = adjoint_features(problem, theta)
        ap = adjoint_problem(problem, omega, theta, b_in, b_out)
        phi_in = feats(b_in.x)
        phi_out = phi_in if b_out is b_in else feats(b_out.x)
        c = _isotropic_curvature(problem.inner_loss, omega, ap.v_in, b_in)
        W = linear_adjoint_solve(phi_in, phi_out, ap.d_out, cfg.ridge_adj, c)
        a_in = phi_in @ W.T
        a_out = phi_out @ W.T
        return W.ravel(), a_in, ap.value(a_in, a_out) + 0.5 * cfg.ridge_adj * float(np.sum(W * W)), 0
    xi, trace = adjoint_opt(problem, omega, xi, theta, cfg, rng)
    model = problem.adjoint_model
    a_in = model.forward(xi, b_in.x)
    return xi, a_in, trace[-1] if trace else float("nan"), cfg.K


def funcid_run(
    problem: BilevelProblem,
    cfg: OptimConfig,
    seed: int = 0,
    record_timing: bool = False,
    on_record: Callable[[RunRecord], None] | None = None,
):
    """Outer loop; returns (omega trajectory [omega_0..omega_N], list of RunRecords)."""
    init_rng = make_rng(seed, 1)
    batch_rng = make_rng(seed, 2)
    omega = problem.omega0.copy()
    theta = problem.inner_model.init(init_rng)
    xi = problem.adjoint_model.init(init_rng) if cfg.adjoint_mode == "sgd" else None
    outer_opt = make_optimizer(cfg.opt_out, cfg.lr_out)
    trajectory = [omega.copy()]
    records: list[RunRecord] = []
    for n in range(cfg.N):
        t0 = time.perf_counter()
        if not cfg.warm_start:
            theta = problem.inner_model.init(init_rng)
            if xi is not None:
                xi = problem.adjoint_model.init(init_rng)
        theta, inner_trace = inner_opt(problem, omega, theta, cfg, batch_rng)
        b_in, b_out = sample_pair(problem, cfg, batch_rng)
        xi, a_in, adj_loss, adj_steps = adjoint_values(problem, cfg, omega, theta, xi, b_in, b_out, batch_rng)
        g, info = total_grad(problem, omega, theta, a_in, b_in, b_out)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"total gradient is non-finite at outer step {n}")
        v_out = problem.inner_model.forward(theta, b_out.x)
        outer_loss = float(np.mean(problem.outer_loss.value(omega, v_out, b_out.x, b_out.y)))
        bias = None
        if problem.oracle_grad is not None:
            bias = float(np.linalg.norm(g - problem.oracle_grad(omega)))
        metric = problem.eval_metric(omega, theta) if problem.eval_metric is not None else None
        omega = outer_opt.step(omega, g)
        if problem.after_outer_step is not None:
            problem.after_outer_step(omega, theta, n)
        wall = (time.perf_counter() - t0) * 1e3 if record_timing else None
        rec = RunRecord(
            iter=n,
            outer_loss=outer_loss,
            inner_loss=float(inner_trace[-1]) if inner_trace else float("nan"),
            adjoint_loss=float(adj_loss),
            grad_norm=float(np.linalg.norm(g)),
            grad_bias=bias,
            hvp_dim=info.hvp_dim,
            inner_steps=0 if cfg.inner_mode == "exact" else cfg.M,
            adjoint_steps=adj_steps,
            wall_ms=wall,
            eval_metric=None if metric is None else float(metric),
        )
        records.append(rec)
        trajectory.append(omega.copy())
        if on_record is not None:
            on_record(rec)
    return trajectory, records
