"""Comparison methods: parametric implicit differentiation, penalty methods and MLE model learning."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .batch import Batch
from .funcid import (
    BilevelProblem,
    OptimConfig,
    RunRecord,
    empirical_inner_loss,
    inner_opt,
    make_optimizer,
    sample_pair,
)
from .models import LinearModel
from .numkit import NonFiniteError, add_flops, conjugate_gradient, count_flops, fd_directional, make_rng

LINEAR_SOLVERS = ("cg", "identity_heuristic", "gd")
HVP_MODES = ("exact_linear", "finite_difference")


@dataclass
class AidConfig:
    linear_solver: str = "cg"
    solver_tol: float = 1e-10
    solver_maxit: int = 500
    hvp_mode: str = "exact_linear"
    eps: float | None = None  # None: 1e-4 (1 + ||theta||_inf)
    solver_lr: float | None = None  # gd step; None: 1 / (power-iteration estimate of the top eigenvalue)
    ridge_in: float = 0.0

    def __post_init__(self):
        if self.linear_solver not in LINEAR_SOLVERS:
            raise ValueError(f"linear_solver must be one of {LINEAR_SOLVERS}")
        if self.hvp_mode not in HVP_MODES:
            raise ValueError(f"hvp_mode must be one of {HVP_MODES}")
        if self.eps is not None and self.eps <= 0:
            raise ValueError("eps must be positive")
        if self.solver_tol <= 0 or self.solver_maxit < 1:
            raise ValueError("solver_tol must be positive and solver_maxit >= 1")


@dataclass
class AidInfo:
    hvp_dim: int
    iters: int
    residual: float
    residual_flag: bool
    u: np.ndarray = field(repr=False)


def _fd_eps(theta, eps) -> float:
    return eps if eps is not None else 1e-4 * (1.0 + float(np.max(np.abs(theta), initial=0.0)))


def inner_param_grad(problem: BilevelProblem, omega, batch: Batch, ridge: float = 0.0):
    """``theta -> d_theta G_in(omega, theta)`` on ``batch``."""
    return lambda th: empirical_inner_loss(problem, omega, th, batch, ridge)[1]


def inner_omega_grad(problem: BilevelProblem, omega, theta, batch: Batch) -> np.ndarray:
    """``d_omega G_in`` (the ridge term does not depend on omega)."""
    v = problem.inner_model.forward(theta, batch.x)
    return problem.inner_loss.grad_omega(omega, v, batch.x, batch.y)


def param_hvp(problem: BilevelProblem, omega, theta, batch: Batch, cfg: AidConfig):
    """Parameter-space Hessian-vector product of G_in; flops are booked under "hvp"."""
    model = problem.inner_model
    if cfg.hvp_mode == "exact_linear":
        if not isinstance(model, LinearModel):
            raise ValueError("exact_linear HVPs need a LinearModel inner model")
        phi = model.phi(batch.x)
        v = model.forward(theta, batch.x, phi)
        n = len(batch)

        def hvp(u):
            with count_flops() as fl:
                du = model.forward(u, batch.x, phi)  # the model is linear in its parameters
                Hdu = problem.inner_loss.hvp_v(omega, v, batch.x, batch.y, du)
                out = model.vjp_params(u, batch.x, Hdu / n, phi) + cfg.ridge_in * u
            add_flops("hvp", sum(fl.values()))
            return out

        return hvp
    grad_fn = inner_param_grad(problem, omega, batch, cfg.ridge_in)
    eps = _fd_eps(theta, cfg.eps)

    def hvp(u):
        with count_flops() as fl:
            out = fd_directional(grad_fn, theta, u, eps)
        add_flops("hvp", sum(fl.values()))
        return out

    return hvp


def _gd_solve(hvp, b, cfg: AidConfig, p: int):
    """Gradient descent on ``1/2 u^T H u - b^T u``."""
    lr = cfg.solver_lr
    if lr is None:
        rng = np.random.default_rng(0)
        z = rng.standard_normal(p)
        lam = 1.0
        for _ in range(30):
            hz = hvp(z)
            lam = float(np.linalg.norm(hz))
            if lam == 0:
                break
            z = hz / lam
        lr = 1.0 / max(lam, 1e-12)
    u = np.zeros(p)
    bnorm = max(float(np.linalg.norm(b)), 1e-300)
    rel = 1.0
    for it in range(1, cfg.solver_maxit + 1):
        r = b - hvp(u)
        rel = float(np.linalg.norm(r)) / bnorm
        if rel <= cfg.solver_tol:
            return u, it, rel
        u = u + lr * r
    return u, cfg.solver_maxit, rel


def aid_total_grad(problem: BilevelProblem, omega, theta, b_in: Batch, b_out: Batch, cfg: AidConfig):
    """Total gradient through the parametric implicit function theorem.

    Solves ``H u = -d_theta G_out`` with ``H`` the parameter Hessian of G_in and returns
    ``d_omega G_out + d_theta(d_omega G_in) u`` together with an :class:`AidInfo`.
    """
    model = problem.inner_model
    omega = np.asarray(omega, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.shape[0]
    v_out = model.forward(theta, b_out.x)
    m = len(b_out)
    d = problem.outer_loss.grad_v(omega, v_out, b_out.x, b_out.y)
    g_theta = model.vjp_params(theta, b_out.x, d / m)
    g_exp = problem.outer_loss.grad_omega(omega, v_out, b_out.x, b_out.y)
    if not np.any(g_theta):
        return g_exp, AidInfo(p, 0, 0.0, False, np.zeros(p))
    hvp = param_hvp(problem, omega, theta, b_in, cfg)
    b = -g_theta
    if cfg.linear_solver == "cg":
        res = conjugate_gradient(hvp, b, tol=cfg.solver_tol, maxit=cfg.solver_maxit)
        u, iters, rel = res.x, res.iters, res.residual
    elif cfg.linear_solver == "identity_heuristic":
        u, iters = b.copy(), 0
        rel = float(np.linalg.norm(b - hvp(u))) / max(float(np.linalg.norm(b)), 1e-300)
    else:
        u, iters, rel = _gd_solve(hvp, b, cfg, p)
    flag = not (np.isfinite(rel) and rel <= cfg.solver_tol)
    u = np.nan_to_num(u)
    # cross term: derivative of d_omega G_in along u, by central differences
    eps = _fd_eps(theta, cfg.eps)
    cross = fd_directional(lambda th: inner_omega_grad(problem, omega, th, b_in), theta, u, eps)
    return g_exp + cross, AidInfo(p, iters, float(rel), flag, u)


def _record(n, outer_loss, inner_loss, adjoint_loss, g, bias_fn, omega, hvp_dim, inner_steps, adjoint_steps,
            t0, timing, metric):
    return RunRecord(
        iter=n,
        outer_loss=float(outer_loss),
        inner_loss=float(inner_loss),
        adjoint_loss=None if adjoint_loss is None else float(adjoint_loss),
        grad_norm=float(np.linalg.norm(g)),
        grad_bias=None if bias_fn is None else float(np.linalg.norm(g - bias_fn(omega))),
        hvp_dim=int(hvp_dim),
        inner_steps=int(inner_steps),
        adjoint_steps=int(adjoint_steps),
        wall_ms=(time.perf_counter() - t0) * 1e3 if timing else None,
        eval_metric=None if metric is None else float(metric),
    )


def _mean_outer(problem: BilevelProblem, omega, theta, batch: Batch) -> float:
    v = problem.inner_model.forward(theta, batch.x)
    return float(np.mean(problem.outer_loss.value(omega, v, batch.x, batch.y)))


def aid_run(problem: BilevelProblem, cfg: OptimConfig, aid_cfg: AidConfig, seed: int = 0,
            record_timing: bool = False, on_record=None):
    """Outer loop with AID gradients and the same inner fit as FuncID.

    Returns (trajectory, RunRecords, AidInfos).
    """
    init_rng = make_rng(seed, 1)
    batch_rng = make_rng(seed, 2)
    omega = problem.omega0.copy()
    theta = problem.inner_model.init(init_rng)
    opt = make_optimizer(cfg.opt_out, cfg.lr_out)
    traj, records, infos = [omega.copy()], [], []
    for n in range(cfg.N):
        t0 = time.perf_counter()
        if not cfg.warm_start:
            theta = problem.inner_model.init(init_rng)
        theta, trace = inner_opt(problem, omega, theta, cfg, batch_rng)
        b_in, b_out = sample_pair(problem, cfg, batch_rng)
        g, info = aid_total_grad(problem, omega, theta, b_in, b_out, aid_cfg)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"AID gradient is non-finite at outer step {n}")
        outer = _mean_outer(problem, omega, theta, b_out)
        metric = problem.eval_metric(omega, theta) if problem.eval_metric is not None else None
        rec = _record(n, outer, trace[-1] if trace else float("nan"), None, g, problem.oracle_grad, omega,
                      info.hvp_dim, 0 if cfg.inner_mode == "exact" else cfg.M, info.iters, t0, record_timing, metric)
        omega = opt.step(omega, g)
        traj.append(omega.copy())
        infos.append(info)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return traj, records, infos


# ---------------------------------------------------------------------------
# distortion of the parametric Hessian


def per_sample_jacobian(model, theta, xs) -> np.ndarray:
    """``J`` with shape (p, n * d_v): column ``i * d_v + k`` is ``d_theta h_theta(x_i)_k``."""
    xs = np.asarray(xs, dtype=np.float64)
    n = xs.shape[0]
    d_v = model.d_out
    cols = []
    for i in range(n):
        for k in range(d_v):
            cot = np.zeros((1, d_v))
            cot[0, k] = 1.0
            cols.append(model.vjp_params(theta, xs[i:i + 1], cot))
    return np.stack(cols, axis=1)


def parametric_hessian_check(problem: BilevelProblem, omega, theta, batch: Batch | None = None,
                             ridge: float = 0.0, eps: float = 1e-5):
    """Finite-difference Hessian of G_in versus its Gauss-Newton part ``J C J^T``.

    Returns (H_fd, H_struct, ||H_fd - H_struct||_F). Meant for p <= 30.
    """
    batch = problem.d_in if batch is None else batch
    model = problem.inner_model
    theta = np.asarray(theta, dtype=np.float64)
    p = theta.shape[0]
    grad_fn = inner_param_grad(problem, omega, batch, ridge)
    H_fd = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = 1.0
        H_fd[:, j] = fd_directional(grad_fn, theta, e, eps)
    H_fd = 0.5 * (H_fd + H_fd.T)
    J = per_sample_jacobian(model, theta, batch.x)
    v = model.forward(theta, batch.x)
    n, d_v = v.shape
    Hv = problem.inner_loss.hess_v(omega, v, batch.x, batch.y)  # (n, d_v, d_v)
    C = np.zeros((n * d_v, n * d_v))
    for i in range(n):
        C[i * d_v:(i + 1) * d_v, i * d_v:(i + 1) * d_v] = Hv[i] / n
    H_struct = J @ C @ J.T + ridge * np.eye(p)
    return H_fd, H_struct, float(np.linalg.norm(H_fd - H_struct))


# ---------------------------------------------------------------------------
# penalty methods


@dataclass
class PenaltyState:
    omega: np.ndarray
    theta: np.ndarray
    theta_aux: np.ndarray | None = None
    penalty: float = 0.0


def _outer_parts(problem: BilevelProblem, omega, theta, batch: Batch):
    model = problem.inner_model
    v = model.forward(theta, batch.x)
    n = len(batch)
    d = problem.outer_loss.grad_v(omega, v, batch.x, batch.y)
    value = float(np.mean(problem.outer_loss.value(omega, v, batch.x, batch.y)))
    g_theta = model.vjp_params(theta, batch.x, d / n)
    g_omega = problem.outer_loss.grad_omega(omega, v, batch.x, batch.y)
    return value, g_omega, g_theta


def _check(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("penalty step produced a non-finite value")


def value_penalty_step(problem: BilevelProblem, state: PenaltyState, lam: float, cfg: OptimConfig) -> PenaltyState:
    """One joint step on ``L_out + lam (L_in(w, theta) - L_in(w, theta_aux))``.

    ``theta_aux`` tracks the inner value function ``v(w)`` and is advanced ``cfg.M`` steps first.
    """
    if lam <= 0:
        raise ValueError("lam must be positive")
    omega, theta = state.omega, state.theta
    aux = theta.copy() if state.theta_aux is None else state.theta_aux.copy()
    for _ in range(cfg.M):
        _, g = empirical_inner_loss(problem, omega, aux, problem.d_in, cfg.ridge_in)
        aux = aux - cfg.lr_in * g
    val_in, g_in_theta = empirical_inner_loss(problem, omega, theta, problem.d_in, cfg.ridge_in)
    val_aux, _ = empirical_inner_loss(problem, omega, aux, problem.d_in, cfg.ridge_in)
    _, g_out_omega, g_out_theta = _outer_parts(problem, omega, theta, problem.d_out)
    g_in_omega = inner_omega_grad(problem, omega, theta, problem.d_in)
    g_aux_omega = inner_omega_grad(problem, omega, aux, problem.d_in)
    g_omega = g_out_omega + lam * (g_in_omega - g_aux_omega)
    g_theta = g_out_theta + lam * g_in_theta
    new = PenaltyState(omega - cfg.lr_out * g_omega, theta - cfg.lr_in * g_theta, aux, lam * (val_in - val_aux))
    _check(g_omega, g_theta, aux, new.omega, new.theta, [new.penalty])
    return new


def gradient_penalty_value(problem: BilevelProblem, omega, theta, ridge: float = 0.0) -> float:
    g = inner_param_grad(problem, omega, problem.d_in, ridge)(theta)
    return float(g @ g)


def gradient_penalty_step(problem: BilevelProblem, state: PenaltyState, lam: float, cfg: OptimConfig,
                          eps: float | None = None) -> PenaltyState:
    """One joint step on ``L_out + lam ||d_theta L_in||^2`` with finite-difference second derivatives."""
    if lam < 0:
        raise ValueError("lam must be non-negative")
    omega, theta = state.omega, state.theta
    grad_fn = inner_param_grad(problem, omega, problem.d_in, cfg.ridge_in)
    g_in = grad_fn(theta)
    _, g_out_omega, g_out_theta = _outer_parts(problem, omega, theta, problem.d_out)
    if lam > 0 and np.any(g_in):
        h = _fd_eps(theta, eps)
        pen_theta = 2.0 * fd_directional(grad_fn, theta, g_in, h)
        pen_omega = 2.0 * fd_directional(lambda th: inner_omega_grad(problem, omega, th, problem.d_in), theta, g_in, h)
    else:
        pen_theta = np.zeros_like(theta)
        pen_omega = np.zeros_like(omega)
    g_omega = g_out_omega + lam * pen_omega
    g_theta = g_out_theta + lam * pen_theta
    new = PenaltyState(omega - cfg.lr_out * g_omega, theta - cfg.lr_in * g_theta, None, lam * float(g_in @ g_in))
    _check(g_omega, g_theta, new.omega, new.theta, [new.penalty])
    return new


def penalty_run(problem: BilevelProblem, cfg: OptimConfig, lam: float, kind: str = "value", seed: int = 0,
                record_timing: bool = False, on_record=None):
    """N joint penalty steps (``kind`` is "value" or "gradient"); returns (trajectory, RunRecords)."""
    if kind not in ("value", "gradient"):
        raise ValueError("kind must be 'value' or 'gradient'")
    rng = make_rng(seed, 1)
    theta = problem.inner_model.init(rng)
    state = PenaltyState(problem.omega0.copy(), theta)
    traj, records = [state.omega.copy()], []
    p = theta.shape[0]
    for n in range(cfg.N):
        t0 = time.perf_counter()
        omega_prev, theta_prev = state.omega, state.theta
        if kind == "value":
            state = value_penalty_step(problem, state, lam, cfg)
        else:
            state = gradient_penalty_step(problem, state, lam, cfg)
        g = (omega_prev - state.omega) / cfg.lr_out
        inner, _ = empirical_inner_loss(problem, omega_prev, theta_prev, problem.d_in, cfg.ridge_in)
        outer = _mean_outer(problem, omega_prev, theta_prev, problem.d_out)
        metric = problem.eval_metric(omega_prev, theta_prev) if problem.eval_metric is not None else None
        rec = _record(n, outer, inner, None, g, problem.oracle_grad, omega_prev, 0 if kind == "value" else p,
                      cfg.M if kind == "value" else 0, 0, t0, record_timing, metric)
        traj.append(state.omega.copy())
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return traj, records


# ---------------------------------------------------------------------------
# maximum-likelihood model learning for the RL task


def mle_model_loss(model, omega, buffer: Batch):
    """Mean ``||(r_w(x), p_w(x)) - (r', onehot(s'))||^2`` and its gradient."""
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    r, p = model.predict(omega, buffer.x)
    n = len(buffer)
    target_p = np.zeros_like(p)
    target_p[np.arange(n), np.asarray(buffer.y["s_next"], dtype=np.int64)] = 1.0
    er = r - buffer.y["r"]
    ep = p - target_p
    value = float(np.mean(er * er + np.sum(ep * ep, axis=1)))
    grad = model.vjp(omega, buffer.x, 2.0 * er / n, 2.0 * ep / n)
    return value, grad


def mle_model_step(model, omega, buffer: Batch, cfg: OptimConfig) -> np.ndarray:
    """One gradient step of the model on the prediction error; step size ``cfg.lr_out``."""
    _, grad = mle_model_loss(model, omega, buffer)
    _check(grad)
    return np.asarray(omega) - cfg.lr_out * grad


def mle_run(setup, cfg: OptimConfig, tau: float = 5e-3, seed: int = 0, record_timing: bool = False, on_record=None):
    """Alternate one model step and one Q update against the learned model.

    ``setup`` is an :class:`~funcbo.tasks.rl.RlSetup`. Returns (trajectory, RunRecords).
    """
    from .tasks.rl import q_table

    problem = setup.problem
    S, A = setup.mdp.n_states, setup.mdp.n_actions
    rng = make_rng(seed, 2)
    omega = problem.omega0.copy()
    theta = problem.inner_model.init()
    target_q = np.zeros((S, A))
    setup.lagged.set_q(target_q)
    traj, records = [omega.copy()], []
    for n in range(cfg.N):
        t0 = time.perf_counter()
        batch = problem.d_out.sample(rng, cfg.batch_out)
        mle_loss, g = mle_model_loss(setup.model, omega, batch)
        _check(g)
        omega = omega - cfg.lr_out * g
        theta, trace = inner_opt(problem, omega, theta, cfg, rng)
        target_q = (1.0 - tau) * target_q + tau * q_table(theta, S, A)
        setup.lagged.set_q(target_q)
        metric = problem.eval_metric(omega, theta) if problem.eval_metric is not None else None
        rec = _record(n, _mean_outer(problem, omega, theta, batch), trace[-1] if trace else float("nan"), None, g,
                      None, omega, 0, 0 if cfg.inner_mode == "exact" else cfg.M, 0, t0, record_timing, metric)
        traj.append(omega.copy())
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    return traj, records
