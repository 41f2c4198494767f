import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcbo.batch import Batch
from funcbo.funcid import (
    CSV_COLUMNS,
    BilevelProblem,
    FuncIdError,
    OptimConfig,
    adjoint_opt,
    adjoint_problem,
    closed_form_adjoint,
    closed_form_adjoint_rl,
    empirical_adjoint_loss,
    empirical_inner_loss,
    funcid_run,
    inner_opt,
    linear_adjoint_solve,
    linear_inner_solve,
    total_grad,
)
from funcbo.losses import SquaredInnerToModel, SquaredOuter
from funcbo.models import LinearModel, LinearOuter, raw_features
from funcbo.numkit import NonFiniteError, make_rng
from funcbo.oracle import QuadOracle, fd_total_grad
from funcbo.tasks import iv, rl
from funcbo.tasks.quad import make_quad, quad_problem

RIDGE = 1e-3


def quad_case(seed=0, n=200, ridge=RIDGE, **kw):
    inst = make_quad(seed)
    data = inst.sample(n, make_rng(seed, 102))
    oracle = QuadOracle(inst.phi, data, ridge=ridge)
    problem = quad_problem(inst, data, oracle_grad=oracle.grad, **kw)
    return inst, data, oracle, problem


def exact_cfg(**kw):
    base = dict(N=10, M=1, K=0, inner_mode="exact", adjoint_mode="linear_exact", ridge_in=RIDGE, ridge_adj=RIDGE)
    base.update(kw)
    return OptimConfig(**base)


def identity_problem(n=5, seed=0):
    """Inner target f_w(t) = w.t with t = x, so theta = w fits the inner problem exactly."""
    rng = make_rng(seed)
    x = rng.standard_normal((n, 3))
    data = Batch(x, {"t": x, "o": rng.standard_normal(n)})
    outer = LinearOuter(raw_features, 3)
    return BilevelProblem(SquaredInnerToModel(outer), SquaredOuter(3), data, data, LinearModel(raw_features, 3),
                          np.zeros(3))


# config


def test_config_validation():
    with pytest.raises(ValueError):
        OptimConfig(K=0)
    with pytest.raises(ValueError):
        OptimConfig(M=0)
    with pytest.raises(ValueError):
        OptimConfig(lr_out=0.0)
    with pytest.raises(ValueError):
        OptimConfig(ridge_adj=-1.0)
    with pytest.raises(ValueError):
        OptimConfig(opt_in="rmsprop")
    with pytest.raises(ValueError):
        OptimConfig(batch_in=0)
    OptimConfig(K=0, adjoint_mode="closed_form")
    OptimConfig(M=0, inner_mode="exact")


def test_problem_rejects_empty_data():
    empty = Batch(np.zeros((0, 2)))
    with pytest.raises(ValueError):
        BilevelProblem(SquaredOuter(), SquaredOuter(), empty, empty, LinearModel(raw_features, 2), np.zeros(1))


# empirical inner loss


def test_inner_loss_at_exact_fit_is_ridge_only():
    problem = identity_problem()
    w = np.array([0.5, -1.0, 2.0])
    value, _ = empirical_inner_loss(problem, w, w, problem.d_in, ridge=0.3)
    assert value == pytest.approx(0.3 * (w @ w) / 2, rel=1e-14)


def test_inner_loss_single_sample_by_hand():
    x = np.array([[1.0, 2.0]])
    data = Batch(x, {"t": np.array([[3.0]]), "o": np.zeros(1)})
    problem = BilevelProblem(SquaredInnerToModel(LinearOuter(raw_features, 1)), SquaredOuter(1), data, data,
                             LinearModel(raw_features, 2), np.zeros(1))
    # f_w(t) = 2 * 3 = 6, h(x) = 1 + 4 = 5: loss 1, gradient 2 (5 - 6) x
    value, grad = empirical_inner_loss(problem, np.array([2.0]), np.array([1.0, 2.0]), data)
    assert value == 1.0
    assert grad.tolist() == [-2.0, -4.0]


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=20)
def test_inner_loss_gradient_matches_finite_differences(seed):
    _, data, _, problem = quad_case(seed % 50, n=40)
    rng = np.random.default_rng(seed)
    omega = rng.standard_normal(3)
    theta = rng.standard_normal(problem.inner_model.n_params)
    _, g = empirical_inner_loss(problem, omega, theta, data, 0.1)
    fd = fd_total_grad(lambda th: empirical_inner_loss(problem, omega, th, data, 0.1)[0], theta)
    assert np.linalg.norm(g - fd) <= 1e-5 * np.linalg.norm(fd)


def test_inner_loss_empty_batch():
    problem = identity_problem()
    with pytest.raises(ValueError):
        empirical_inner_loss(problem, np.zeros(3), np.zeros(3), problem.d_in.take([]))


# empirical adjoint loss


def test_adjoint_loss_zero_adjoint():
    _, data, _, problem = quad_case(n=30)
    ap = adjoint_problem(problem, np.ones(3), np.ones(8), data, data)
    xi = np.zeros(8)
    assert empirical_adjoint_loss(ap, problem.adjoint_model, xi)[0] == 0.0
    xi = np.ones(8)
    model = LinearModel(lambda xs: np.zeros((xs.shape[0], 8)), 8)  # a == 0 with nonzero params
    assert empirical_adjoint_loss(ap, model, xi, ridge=0.5)[0] == pytest.approx(0.5 * 8 / 2)


def test_adjoint_loss_constant_adjoint():
    _, data, _, problem = quad_case(n=30)
    ap = adjoint_problem(problem, np.ones(3), np.ones(8), data, data)
    c = 0.7
    const = LinearModel(lambda xs: np.ones((xs.shape[0], 1)), 1)
    value, _ = empirical_adjoint_loss(ap, const, np.array([c]))
    assert value == pytest.approx(c**2 + c * float(np.mean(ap.d_out)), rel=1e-13)


def test_adjoint_loss_gradient_matches_finite_differences():
    _, data, _, problem = quad_case(n=40)
    rng = make_rng(1)
    half = data.take(np.arange(20))
    ap = adjoint_problem(problem, rng.standard_normal(3), rng.standard_normal(8), data, half)
    xi = rng.standard_normal(8)
    _, g = empirical_adjoint_loss(ap, problem.adjoint_model, xi, 0.2)
    fd = fd_total_grad(lambda z: empirical_adjoint_loss(ap, problem.adjoint_model, z, 0.2)[0], xi)
    assert np.linalg.norm(g - fd) <= 1e-6 * np.linalg.norm(fd)


def test_unconstrained_adjoint_minimizer_is_minus_hinv_d():
    _, data, _, problem = quad_case(n=30)
    rng = make_rng(2)
    ap = adjoint_problem(problem, rng.standard_normal(3), rng.standard_normal(8), data, data)
    a_star = closed_form_adjoint(ap)
    assert np.allclose(a_star, -ap.d_out / 2.0, rtol=1e-14)
    base = ap.value(a_star, a_star)
    for _ in range(5):
        a = a_star + 1e-3 * rng.standard_normal(a_star.shape)
        assert ap.value(a, a) > base


def test_adjoint_optimality_gap_is_strongly_convex():
    inst, data, oracle, problem = quad_case(n=60)
    rng = make_rng(3)
    omega = rng.standard_normal(3)
    theta = oracle.exact_inner_solve(omega)
    ap = adjoint_problem(problem, omega, theta, data, data)
    xi_star = oracle.exact_adjoint_solve(omega, theta, ridge_adj=0.0)
    model = problem.adjoint_model
    base = empirical_adjoint_loss(ap, model, xi_star)[0]
    mu = 2.0  # min eigenvalue of the per-sample Hessians 2I, no ridge
    for _ in range(10):
        xi = xi_star + rng.standard_normal(8)
        gap = empirical_adjoint_loss(ap, model, xi)[0] - base
        a_gap = model.forward(xi, data.x) - model.forward(xi_star, data.x)
        assert gap >= 0
        assert gap >= mu / 2 * float(np.mean(np.sum(a_gap**2, axis=1))) * (1 - 1e-9)


# inner_opt


def test_inner_opt_zero_steps_returns_start():
    _, _, _, problem = quad_case()
    theta0 = np.arange(8.0)
    theta, trace = inner_opt(problem, np.ones(3), theta0, OptimConfig(M=0, N=0), make_rng(0))
    assert np.array_equal(theta, theta0) and trace == []


def test_inner_opt_exact_matches_oracle():
    _, data, oracle, problem = quad_case()
    omega = np.array([0.3, -1.2, 0.8])
    theta, trace = inner_opt(problem, omega, None, exact_cfg(), make_rng(0))
    V = oracle.exact_inner_solve(omega)
    assert np.allclose(theta, V, rtol=1e-10, atol=1e-12)
    opt_value = empirical_inner_loss(problem, omega, V, data, RIDGE)[0]
    assert abs(trace[-1] - opt_value) <= 1e-10
    assert np.max(np.abs(oracle.inner_residual_grad(omega, theta))) <= 1e-10


def test_inner_opt_full_batch_trace_monotone():
    _, _, oracle, problem = quad_case()
    L = float(np.linalg.eigvalsh(oracle.gram)[-1])
    cfg = OptimConfig(N=1, M=200, lr_in=0.9 / L, ridge_in=RIDGE)
    _, trace = inner_opt(problem, np.array([1.0, 2.0, -1.0]), np.zeros(8), cfg, make_rng(0))
    assert np.all(np.diff(trace) <= 1e-15)


def test_inner_opt_nonfinite_names_step():
    _, _, _, problem = quad_case()
    cfg = OptimConfig(N=1, M=500, lr_in=1e3)
    with pytest.raises(NonFiniteError, match="step"):
        with np.errstate(all="ignore"):
            inner_opt(problem, np.ones(3), np.zeros(8), cfg, make_rng(0))


def test_exact_inner_needs_linear_model():
    problem = identity_problem()
    problem.inner_model = object()
    with pytest.raises(FuncIdError):
        linear_inner_solve(problem, np.zeros(3), problem.d_in, 0.0)


# adjoint_opt


def test_adjoint_opt_zero_steps():
    _, _, _, problem = quad_case()
    xi0 = np.arange(8.0)
    cfg = OptimConfig(N=0, K=0)
    xi, trace = adjoint_opt(problem, np.ones(3), xi0, np.zeros(8), cfg, make_rng(0))
    assert np.array_equal(xi, xi0) and trace == []


def test_adjoint_opt_converges_to_oracle_and_trace_monotone():
    _, data, oracle, problem = quad_case()
    omega = np.array([0.5, 0.5, -0.5])
    theta = oracle.exact_inner_solve(omega)
    C = 2 * oracle.Phi.T @ oracle.Phi / len(data) + RIDGE * np.eye(8)
    lam = np.linalg.eigvalsh(C)
    cfg = OptimConfig(N=1, K=4000, lr_adj=1.0 / lam[-1], ridge_adj=RIDGE)
    xi, trace = adjoint_opt(problem, omega, np.zeros(8), theta, cfg, make_rng(0))
    assert np.all(np.diff(trace) <= 1e-14)
    a_star = oracle.exact_adjoint_solve(omega, theta)
    assert np.linalg.norm(xi - a_star) <= 1e-8 * np.linalg.norm(a_star) or lam[0] / lam[-1] < 1e-4


# linear adjoint solve


def test_linear_adjoint_zero_targets():
    phi = make_rng(0).standard_normal((10, 3))
    assert not np.any(linear_adjoint_solve(phi, phi, np.zeros(10), ridge=0.0))


def test_linear_adjoint_identity_features():
    d = np.array([1.0, -2.0, 4.0])
    W = linear_adjoint_solve(np.eye(3), np.eye(3), d, ridge=0.0)
    # a = -C^{-1} d with C = 2 I: the 1/n and 1/m normalizations cancel
    assert np.allclose(W[0], -d / 2)


def test_linear_adjoint_first_order_optimality():
    rng = make_rng(1)
    phi_in = rng.standard_normal((30, 4))
    phi_out = rng.standard_normal((20, 4))
    d = rng.standard_normal(20)
    W = linear_adjoint_solve(phi_in, phi_out, d, ridge=1e-3)
    grad = 2 * phi_in.T @ (phi_in @ W[0]) / 30 + phi_out.T @ d / 20 + 1e-3 * W[0]
    assert np.max(np.abs(grad)) <= 1e-8


def test_linear_adjoint_singular_recommends_ridge():
    phi = np.ones((5, 2))
    with pytest.raises(FuncIdError, match="ridge_adj"):
        linear_adjoint_solve(phi, phi, np.ones(5), ridge=0.0)


def test_linear_adjoint_agrees_with_oracle_assembly():
    _, data, oracle, problem = quad_case()
    omega = np.array([1.0, -0.5, 0.2])
    V = oracle.exact_inner_solve(omega)
    d = 2 * (oracle.Phi @ V - oracle.o)
    W = linear_adjoint_solve(oracle.Phi, oracle.Phi, d, RIDGE)
    assert np.linalg.norm(W[0] - oracle.exact_adjoint_solve(omega, V)) <= 1e-8 * np.linalg.norm(W[0])


# total gradient


def test_total_grad_zero_for_zero_adjoint_in_iv():
    inst = iv.make_iv_instance(0, d_t=4)
    data = iv.gen_iv_data(inst, 50, make_rng(0))
    problem, _ = iv.iv_problem(inst, data)
    rng = make_rng(1)
    omega = rng.standard_normal(problem.omega0.shape[0])
    theta = rng.standard_normal(problem.inner_model.n_params)
    g, info = total_grad(problem, omega, theta, np.zeros((50, 1)), data, data)
    assert not np.any(g)
    assert info.hvp_dim == 1


def test_total_grad_exact_matches_finite_differences_of_F():
    _, data, oracle, problem = quad_case(seed=3)
    cfg = exact_cfg()
    from funcbo.funcid import adjoint_values

    for omega in make_rng(4).standard_normal((3, 3)):
        theta, _ = inner_opt(problem, omega, None, cfg, None)
        _, a_in, _, _ = adjoint_values(problem, cfg, omega, theta, None, data, data, None)
        g, _ = total_grad(problem, omega, theta, a_in, data, data)
        ref = fd_total_grad(oracle.F, omega)
        assert np.linalg.norm(g - ref) <= 1e-5 * np.linalg.norm(ref)


# closed-form adjoint for the Bellman losses


def rl_case(seed=0, n=64):
    mdp = rl.gen_mdp(make_rng(seed, 301), n_states=5)
    buf = rl.replay_collect(mdp, n, make_rng(seed, 302))
    return rl.rl_problem(mdp, buf)


def test_closed_form_rl_zero_at_target():
    setup = rl_case()
    p, buf = setup.problem, setup.buffer
    setup.lagged.set_q(make_rng(0).standard_normal((5, 2)))
    T = p.outer_loss.target(p.omega0, buf.x, buf.y)
    # a tabular Q can match T only when each pair has one target: use a single sample
    one = buf.take([0])
    theta = np.zeros(10)
    s, a = int(one.y["s"][0]), int(one.y["a"][0])
    theta[s * 2 + a] = T[0, 0]
    assert np.allclose(closed_form_adjoint_rl(p, p.omega0, theta, one), 0.0)


def test_closed_form_rl_single_sample_unit_residual():
    setup = rl_case()
    p = setup.problem
    one = Batch(rl.encode([0], [0], 5, 2), {"r": np.zeros(1), "s_next": np.array([0]), "s": np.zeros(1, int),
                                           "a": np.zeros(1, int)})
    setup.lagged.values = np.zeros(5)
    theta = np.zeros(10)
    theta[0] = 1.0
    assert closed_form_adjoint_rl(p, p.omega0, theta, one).tolist() == [[-1.0]]


def test_closed_form_rl_preconditions():
    setup = rl_case()
    p, buf = setup.problem, setup.buffer
    ap = adjoint_problem(p, p.omega0, np.zeros(10), buf.take([0, 1]), buf.take([2, 3]))
    with pytest.raises(FuncIdError):
        closed_form_adjoint(ap)
    with pytest.raises(FuncIdError):
        closed_form_adjoint_rl(p, p.omega0, np.zeros(10), buf, ridge=1e-3)


# outer loop


def test_run_zero_steps():
    _, _, _, problem = quad_case()
    traj, records = funcid_run(problem, exact_cfg(N=0))
    assert len(traj) == 1 and np.array_equal(traj[0], problem.omega0) and records == []


def test_run_is_deterministic():
    _, _, _, problem = quad_case()
    cfg = OptimConfig(N=15, M=5, K=5, lr_in=0.1, lr_adj=0.1, lr_out=0.05, batch_in=32, batch_out=32, ridge_in=RIDGE)
    rows = [[r.csv_row() for r in funcid_run(problem, cfg, seed=7)[1]] for _ in range(2)]
    assert rows[0] == rows[1]
    assert rows[0] != [r.csv_row() for r in funcid_run(problem, cfg, seed=8)[1]]


def test_run_reaches_stationarity():
    _, _, oracle, problem = quad_case(seed=1)
    L = float(np.linalg.eigvalsh(oracle.hessian())[-1])
    traj, _ = funcid_run(problem, exact_cfg(N=500, lr_out=1.0 / L))
    assert min(np.linalg.norm(oracle.grad(w)) for w in traj) <= 1e-6


def test_warm_start_neutral_at_exactness():
    _, _, _, problem = quad_case(seed=2)
    a, _ = funcid_run(problem, exact_cfg(N=20, lr_out=0.1, warm_start=True))
    b, _ = funcid_run(problem, exact_cfg(N=20, lr_out=0.1, warm_start=False))
    assert np.array_equal(np.array(a), np.array(b))


def test_records_carry_hvp_dim_and_bias():
    _, _, _, problem = quad_case()
    cfg = OptimConfig(N=5, M=3, K=3, lr_in=0.1, lr_adj=0.1, ridge_in=RIDGE)
    _, records = funcid_run(problem, cfg)
    assert all(r.hvp_dim == 1 for r in records)
    assert all(r.grad_bias is not None and r.wall_ms is None for r in records)
    assert [r.inner_steps for r in records] == [3] * 5
    assert records[0].csv_row().count(",") == len(CSV_COLUMNS) - 1


def test_run_records_stream_to_callback():
    _, _, _, problem = quad_case()
    seen = []
    _, records = funcid_run(problem, exact_cfg(N=3), on_record=seen.append, record_timing=True)
    assert seen == records
    assert all(r.wall_ms is not None and r.wall_ms >= 0 for r in records)


def test_separate_batch_sizes_normalize_independently():
    _, data, _, problem = quad_case()
    cfg = dataclasses.replace(exact_cfg(), batch_in=None, batch_out=17)
    traj, records = funcid_run(problem, dataclasses.replace(cfg, N=2))
    assert len(records) == 2 and np.all(np.isfinite(traj[-1]))
