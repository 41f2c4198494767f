"""Acceptance checks shared by ``funcbo check`` and the test suite.

Each check returns a :class:`CriterionResult`; thresholds are the contract values,
and desk-scale constants come from ``pilot.json`` (written by ``scripts/pilot.py``).
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .baselines import AidConfig, aid_run, aid_total_grad, parametric_hessian_check
from .batch import Batch
from .funcid import (
    BilevelProblem,
    OptimConfig,
    adjoint_opt,
    adjoint_problem,
    adjoint_values,
    closed_form_adjoint_rl,
    funcid_run,
    inner_opt,
    linear_inner_solve,
    total_grad,
)
from .losses import (
    BellmanInner,
    BellmanOuter,
    LaggedValues,
    SquaredInnerToModel,
    SquaredOuter,
    lse,
)
from .models import LinearModel, LinearOuter, Mlp, MlpOuter, MlpSpec, poly_features, raw_features
from .numkit import central_gradient, count_flops, make_rng
from .oracle import QuadOracle, bias_probe, fd_total_grad, per_point_adjoint
from .tasks import iv, rl
from .tasks.quad import make_quad, quad_problem

QUAD_N = 200
QUAD_RIDGE = 1e-3


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    limit_s: float | None = None

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        limit = f" (limit {self.limit_s:g}s)" if self.limit_s else ""
        return f"[{status}] {self.number:2d} {self.name}: {self.detail} [{self.seconds:.2f}s{limit}]"


def load_pilot() -> dict:
    return json.loads(resources.files("funcbo").joinpath("pilot.json").read_text())


def _quad_case(seed: int, ridge: float = QUAD_RIDGE, n_centers: int | None = None):
    inst = make_quad(seed)
    if n_centers is not None:
        inst = inst.under_complete(n_centers)
    data = inst.sample(QUAD_N, make_rng(seed, 102))
    problem = quad_problem(inst, data)
    oracle = QuadOracle(inst.phi, data, ridge=ridge)
    return inst, data, problem, oracle


def _rel(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)) / max(1e-12, float(np.linalg.norm(b))))


def exact_total_grad(problem: BilevelProblem, omega, ridge: float = QUAD_RIDGE):
    """FuncID gradient with exact inner solve and exact linear adjoint on the full dataset."""
    cfg = OptimConfig(N=0, inner_mode="exact", adjoint_mode="linear_exact", ridge_in=ridge, ridge_adj=ridge)
    theta, _ = inner_opt(problem, omega, None, cfg, None)
    d = problem.d_in
    _, a_in, _, _ = adjoint_values(problem, cfg, omega, theta, None, d, d, None)
    return total_grad(problem, omega, theta, a_in, d, d)


# ---------------------------------------------------------------------------
# criteria


def check_gradient_identity() -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        _, _, problem, oracle = _quad_case(seed)
        rng = make_rng(seed, 103)
        for _ in range(10):
            omega = rng.standard_normal(problem.omega0.shape[0])
            g, _ = exact_total_grad(problem, omega)
            worst = max(worst, _rel(g, fd_total_grad(oracle.F, omega)))
    return CriterionResult(1, "gradient identity", worst <= 1e-5, f"max rel err {worst:.2e} <= 1e-5",
                           time.perf_counter() - t0, 5.0)


def check_adjoint_convergence() -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        _, data, problem, oracle = _quad_case(seed)
        omega = make_rng(seed, 104).standard_normal(problem.omega0.shape[0])
        theta = oracle.exact_inner_solve(omega)
        a_star = oracle.exact_adjoint_solve(omega, theta)
        # step below the spectral bound 2 / L of the adjoint objective
        L = float(np.linalg.eigvalsh(oracle.gram)[-1])
        cfg = OptimConfig(N=1, K=2000, lr_adj=1.0 / L, ridge_adj=QUAD_RIDGE, batch_in=None, batch_out=None)
        xi, _ = adjoint_opt(problem, omega, np.zeros_like(a_star), theta, cfg, make_rng(seed, 2))
        worst = max(worst, _rel(xi, a_star))
    return CriterionResult(2, "adjoint convergence", worst <= 1e-4, f"max rel err {worst:.2e} <= 1e-4 at K=2000",
                           time.perf_counter() - t0, 5.0)


def check_projection_identity() -> CriterionResult:
    t0 = time.perf_counter()
    worst_full, min_gap = 0.0, np.inf
    for seed in range(5):
        inst, data, _, functional = _quad_case(seed, ridge=0.0)
        omega = make_rng(seed, 105).standard_normal(inst.d_t)
        g_fun = functional.grad(omega)
        for k, store in ((inst.n_atoms, "full"), (inst.n_atoms // 2, "sub")):
            problem = quad_problem(inst.under_complete(k), data)
            theta = linear_inner_solve(problem, omega, data, 0.0)
            g_aid, _ = aid_total_grad(problem, omega, theta, data, data, AidConfig())
            r = _rel(g_aid, g_fun)
            if store == "full":
                worst_full = max(worst_full, r)
            else:
                min_gap = min(min_gap, r)
    ok = worst_full <= 1e-6 and min_gap > 1e-3
    return CriterionResult(3, "AID vs functional gradient", ok,
                           f"complete rel err {worst_full:.2e} <= 1e-6; under-complete min gap {min_gap:.2e} > 1e-3",
                           time.perf_counter() - t0, 5.0)


def _teacher_problem(seed: int, model):
    rng = make_rng(seed, 106)
    teacher = Mlp(MlpSpec((2, 1, 1), ("tanh",)))
    theta_star = rng.standard_normal(teacher.n_params)
    x = rng.uniform(-1.0, 1.0, size=(50, 2))
    t = teacher.forward(theta_star, x)
    data = Batch(x, {"t": t, "o": t[:, 0]})
    problem = BilevelProblem(SquaredInnerToModel(LinearOuter(raw_features, 1)), SquaredOuter(1), data, data,
                             model if model is not None else teacher, np.ones(1))
    return problem, theta_star


def check_distortion() -> CriterionResult:
    t0 = time.perf_counter()
    pilot = load_pilot()["distortion"]
    tol = 1e-4
    at_star, linear, off = 0.0, 0.0, np.inf
    for seed in range(3):
        problem, theta_star = _teacher_problem(seed, None)
        at_star = max(at_star, parametric_hessian_check(problem, np.ones(1), theta_star)[2])
        theta_off = make_rng(pilot["seed"] + seed, 107).standard_normal(theta_star.shape[0])
        off = min(off, parametric_hessian_check(problem, np.ones(1), theta_off)[2])
        lin_problem, _ = _teacher_problem(seed, LinearModel(poly_features(2), 6, 1))
        theta_lin = make_rng(seed, 108).standard_normal(6)
        linear = max(linear, parametric_hessian_check(lin_problem, np.ones(1), theta_lin)[2])
    ok = at_star <= tol and linear <= 1e-6 and off > 10 * tol
    return CriterionResult(4, "parametric Hessian distortion", ok,
                           f"at optimum {at_star:.2e} <= 1e-4; linear {linear:.2e} <= 1e-6; off-optimum {off:.2e} > 1e-3",
                           time.perf_counter() - t0, 10.0)


BUDGETS = ((1, 1), (5, 5), (20, 20), ("exact", "exact"))


def bias_case(seed: int):
    _, data, problem, oracle = _quad_case(seed)
    omega = make_rng(seed, 109).standard_normal(problem.omega0.shape[0])
    L = float(np.linalg.eigvalsh(oracle.gram)[-1])
    return {"problem": problem, "omega": omega, "oracle_grad": oracle.grad(omega), "lr": 1.0 / L}


def bias_run_case(case, budget, seed):
    problem, omega = case["problem"], case["omega"]
    M, K = budget
    if M == "exact":
        g, _ = exact_total_grad(problem, omega)
        return g
    cfg = OptimConfig(N=1, M=M, K=K, lr_in=case["lr"], lr_adj=case["lr"], ridge_in=QUAD_RIDGE, ridge_adj=QUAD_RIDGE)
    rng = make_rng(seed, 2)
    theta0 = problem.inner_model.init()
    theta, _ = inner_opt(problem, omega, theta0, cfg, rng)
    xi, _ = adjoint_opt(problem, omega, problem.adjoint_model.init(), theta, cfg, rng)
    d = problem.d_in
    g, _ = total_grad(problem, omega, theta, problem.adjoint_model.forward(xi, d.x), d, d)
    return g


def check_bias_trend() -> CriterionResult:
    t0 = time.perf_counter()
    rows = bias_probe(bias_case, BUDGETS, range(10), bias_run_case)
    med = [r.median_bias for r in rows]
    ok = all(b <= a for a, b in zip(med, med[1:])) and med[-1] <= 1e-5
    detail = "median bias " + ", ".join(f"{r.budget}:{r.median_bias:.2e}" for r in rows)
    return CriterionResult(5, "bias decreases with budget", ok, detail + "; final <= 1e-5",
                           time.perf_counter() - t0, 60.0)


def check_stationarity() -> CriterionResult:
    t0 = time.perf_counter()
    _, _, problem, oracle = _quad_case(0)
    lr = 1.0 / float(np.linalg.eigvalsh(oracle.hessian())[-1])
    cfg = OptimConfig(N=500, lr_out=lr, inner_mode="exact", adjoint_mode="linear_exact",
                      ridge_in=QUAD_RIDGE, ridge_adj=QUAD_RIDGE)
    traj, _ = funcid_run(problem, cfg, 0)
    best = min(float(np.linalg.norm(oracle.grad(w))) for w in traj)
    return CriterionResult(6, "stationarity", best <= 1e-6, f"min oracle grad norm {best:.2e} <= 1e-6",
                           time.perf_counter() - t0, 30.0)


def iv_seed_result(seed: int, pilot: dict) -> dict:
    inst = iv.make_iv_instance(seed, kappa=pilot["kappa"], d_t=pilot["d_t"])
    data = iv.gen_iv_data(inst, pilot["n"], make_rng(seed, 203))
    problem, psi = iv.iv_problem(inst, data, pilot["n_components"], pilot["degree"])
    cfg = OptimConfig(N=pilot["N"], M=1, K=0, lr_out=pilot["lr_out"], opt_out="adam", inner_mode="exact",
                      adjoint_mode="linear_exact", ridge_in=pilot["ridge"], ridge_adj=pilot["ridge"])
    traj, _ = funcid_run(problem, cfg, seed)
    w_iv = traj[-1]
    w_direct = iv.direct_regression(psi, data)
    mse_iv = iv.structural_mse(lambda t: psi(t) @ w_iv, inst)
    mse_direct = iv.structural_mse(lambda t: psi(t) @ w_direct, inst)
    return {"seed": seed, "funcid_linear": mse_iv, "direct": mse_direct, "ratio": mse_iv / mse_direct}


def check_iv() -> CriterionResult:
    t0 = time.perf_counter()
    pilot = load_pilot()["iv"]
    rows = [iv_seed_result(s, pilot) for s in range(10)]
    wins = sum(r["ratio"] <= pilot["ratio_threshold"] for r in rows)
    ok = wins >= pilot["min_wins"]
    ratios = ", ".join(f"{r['ratio']:.3f}" for r in rows)
    return CriterionResult(7, "IV FuncID-linear vs direct regression", ok,
                           f"{wins}/10 seeds with ratio <= {pilot['ratio_threshold']} (need {pilot['min_wins']}); ratios {ratios}",
                           time.perf_counter() - t0, 300.0)


def rl_random_batch(seed: int, n: int = 256):
    """A toy-MDP problem at random (model, Q, target) values and a random buffer batch."""
    rng = make_rng(seed, 304)
    mdp = rl.gen_mdp(make_rng(seed, 301))
    buffer = rl.replay_collect(mdp, 2000, make_rng(seed, 302))
    setup = rl.rl_problem(mdp, buffer)
    setup.lagged.set_q(rng.standard_normal((mdp.n_states, mdp.n_actions)))
    omega = rng.standard_normal(setup.model.n_params)
    theta = rng.standard_normal(mdp.n_states * mdp.n_actions)
    batch = buffer.sample(rng, n)
    return setup, omega, theta, batch


def check_rl_closed_form() -> CriterionResult:
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(5):
        setup, omega, theta, batch = rl_random_batch(seed)
        problem = setup.problem
        a_cf = closed_form_adjoint_rl(problem, omega, theta, batch)
        g_cf, _ = total_grad(problem, omega, theta, a_cf, batch, batch)
        ap = adjoint_problem(problem, omega, theta, batch, batch)
        H, d = ap.hessians(), ap.d_out
        for keys in (np.arange(len(batch)), batch.x):
            sol = per_point_adjoint(H, d, keys)
            k_rows = keys.reshape(len(batch), -1)
            a_ref = np.stack([sol[tuple(np.atleast_1d(k).tolist())] for k in k_rows])
            g_ref, _ = total_grad(problem, omega, theta, a_ref, batch, batch)
            worst = max(worst, _rel(g_cf, g_ref))
    return CriterionResult(8, "RL closed-form adjoint", worst <= 1e-10, f"max rel err {worst:.2e} <= 1e-10",
                           time.perf_counter() - t0, 5.0)


def rl_seed_result(seed: int, pilot: dict) -> dict:
    mdp = rl.gen_mdp(make_rng(seed, 301))
    buffer = rl.replay_collect(mdp, pilot["buffer"], make_rng(seed, 302))
    setup = rl.rl_problem(mdp, buffer, tau=pilot["tau"])
    cfg = rl.default_rl_config(N=pilot["N"], lr_out=pilot["lr_out"])
    _, records = funcid_run(setup.problem, cfg, seed)
    return {"seed": seed, "policy_match": records[-1].eval_metric}


def check_rl_fixed_point() -> CriterionResult:
    t0 = time.perf_counter()
    pilot = load_pilot()["rl"]
    worst = 0.0
    for seed in range(3):
        mdp = rl.gen_mdp(make_rng(seed, 301))
        buffer = rl.replay_collect(mdp, 2000, make_rng(seed, 302))
        q = rl.inner_fixed_point(mdp, buffer, tol=1e-8)
        worst = max(worst, float(np.max(np.abs(q - rl.soft_value_iteration(mdp)))))
    rows = [rl_seed_result(s, pilot) for s in range(10)]
    wins = sum(r["policy_match"] == 1.0 for r in rows)
    ok = worst <= 1e-3 and wins >= 8
    return CriterionResult(9, "RL fixed point and greedy policy", ok,
                           f"true-model inner fixed point sup err {worst:.2e} <= 1e-3; oracle policy on {wins}/10 seeds (need 8)",
                           time.perf_counter() - t0, 300.0)


def cost_problem():
    inst = make_quad(0)
    data = inst.sample(QUAD_N, make_rng(0, 102))
    problem = quad_problem(inst, data)
    problem.inner_model = Mlp(MlpSpec((2, 32, 1), ("tanh",)))
    problem.adjoint_model = problem.inner_model
    return problem


def check_cost() -> CriterionResult:
    t0 = time.perf_counter()
    problem = cost_problem()
    p_in, d_v = problem.inner_model.n_params, problem.d_v
    cfg = OptimConfig(N=3, M=5, K=5, lr_in=0.05, lr_adj=0.05, lr_out=1e-3)
    with count_flops() as fl_f:
        _, records = funcid_run(problem, cfg, 0)
    with count_flops() as fl_a:
        _, _, infos = aid_run(problem, cfg, AidConfig(hvp_mode="finite_difference", solver_maxit=5), 0)
    f_hvp = fl_f.get("hvp", 0) / cfg.N
    a_hvp = fl_a.get("hvp", 0) / cfg.N
    dims_ok = all(r.hvp_dim == d_v for r in records) and all(i.hvp_dim == p_in for i in infos)
    ok = dims_ok and p_in >= 100 * d_v and a_hvp >= 10 * f_hvp
    return CriterionResult(10, "HVP cost accounting", ok,
                           f"hvp_dim FuncID={d_v} AID={p_in} ({'ok' if dims_ok else 'mismatch'}); "
                           f"per-step HVP flops FuncID={f_hvp:.0f} AID={a_hvp:.0f} (ratio {a_hvp / max(f_hvp, 1):.0f} >= 10)",
                           time.perf_counter() - t0, None)


# ---------------------------------------------------------------------------
# derivative micro-suite


def _fd_rel(analytic, numeric) -> float:
    a, b = np.ravel(analytic), np.ravel(numeric)
    return float(np.linalg.norm(a - b) / max(1.0, float(np.linalg.norm(b))))


def loss_cases(seed: int = 0):
    """(name, loss, omega, v, x, y) for every loss kind, with the models they depend on."""
    rng = make_rng(seed, 110)
    n = 6
    t = rng.standard_normal((n, 3))
    x = rng.standard_normal((n, 2))
    cases = []
    cases.append(("squared_outer", SquaredOuter(3), rng.standard_normal(3), rng.standard_normal((n, 1)), x,
                  {"o": rng.standard_normal(n)}))
    cases.append(("squared_inner_to_model/linear", SquaredInnerToModel(LinearOuter(raw_features, 3)),
                  rng.standard_normal(3), rng.standard_normal((n, 1)), x, {"t": t}))
    mlp_outer = MlpOuter(MlpSpec((3, 4, 2), ("tanh",)))
    cases.append(("squared_inner_to_model/mlp", SquaredInnerToModel(mlp_outer), mlp_outer.init(rng),
                  rng.standard_normal((n, 2)), x, {"t": t}))
    S, A = 4, 2
    s = rng.integers(0, S, n)
    a = rng.integers(0, A, n)
    xs = rl.encode(s, a, S, A)
    lagged = LaggedValues.from_q(rng.standard_normal((S, A)))
    y = {"r": rng.uniform(size=n), "s_next": rng.integers(0, S, n)}
    cases.append(("bellman_outer", BellmanOuter(lagged, 0.9, n_omega=5), rng.standard_normal(5),
                  rng.standard_normal((n, 1)), xs, y))
    for rank in (None, 2):
        model = rl.TabularMdpModel(S, A, rank)
        cases.append((f"bellman_inner/rank={rank}", BellmanInner(model, lagged, 0.9), rng.standard_normal(model.n_params),
                      rng.standard_normal((n, 1)), xs, y))
    return cases


def loss_derivative_errors(seed: int = 0) -> dict:
    errs = {}
    for name, loss, omega, v, x, y in loss_cases(seed):
        shape = v.shape
        val = lambda vv: float(np.sum(loss.value(omega, vv.reshape(shape), x, y)))
        errs[f"{name}:grad_v"] = _fd_rel(loss.grad_v(omega, v, x, y), central_gradient(val, v.ravel()))
        gv = lambda vv: loss.grad_v(omega, vv.reshape(shape), x, y).ravel()
        H = loss.hess_v(omega, v, x, y)
        H_fd = np.stack([central_gradient(lambda vv, j=j: gv(vv)[j], v.ravel()) for j in range(v.size)])
        H_full = np.zeros((v.size, v.size))
        d = shape[1]
        for i in range(shape[0]):
            H_full[i * d:(i + 1) * d, i * d:(i + 1) * d] = H[i]
        errs[f"{name}:hess_v"] = _fd_rel(H_full, H_fd)
        mean_val = lambda w: float(np.mean(loss.value(w, v, x, y)))
        errs[f"{name}:grad_omega"] = _fd_rel(loss.grad_omega(omega, v, x, y), central_gradient(mean_val, omega))
        a = make_rng(seed, 111).standard_normal(shape)
        pair = lambda w: float(np.mean(np.sum(a * loss.grad_v(w, v, x, y), axis=1)))
        errs[f"{name}:cross_apply"] = _fd_rel(loss.cross_apply(omega, v, x, y, a), central_gradient(pair, omega))
    return errs


def model_vjp_errors(seed: int = 0) -> dict:
    rng = make_rng(seed, 112)
    errs = {}
    xs = rng.standard_normal((5, 3))
    for acts in (("tanh",), ("relu", "tanh"), ("identity",)):
        widths = (3, 4, 2) if len(acts) == 1 else (3, 4, 3, 2)
        net = Mlp(MlpSpec(widths, acts))
        params = net.init(rng) + 0.1 * rng.standard_normal(net.n_params)
        cot = rng.standard_normal((5, 2))
        f = lambda p: float(np.sum(cot * net.forward(p, xs)))
        errs[f"mlp{widths}{acts}:params"] = _fd_rel(net.vjp_params(params, xs, cot), central_gradient(f, params))
        g = lambda z: float(np.sum(cot * net.forward(params, z.reshape(xs.shape))))
        errs[f"mlp{widths}{acts}:inputs"] = _fd_rel(net.vjp_inputs(params, xs, cot), central_gradient(g, xs.ravel()))
    lin = LinearModel(poly_features(2), 10, 2)
    p = rng.standard_normal(lin.n_params)
    cot = rng.standard_normal((5, 2))
    errs["linear_model"] = _fd_rel(lin.vjp_params(p, xs, cot),
                                   central_gradient(lambda q: float(np.sum(cot * lin.forward(q, xs))), p))
    for rank in (None, 2):
        model = rl.TabularMdpModel(3, 2, rank)
        w = rng.standard_normal(model.n_params)
        x = rl.encode(rng.integers(0, 3, 7), rng.integers(0, 2, 7), 3, 2)
        cr, cp = rng.standard_normal(7), rng.standard_normal((7, 3))

        def h(q):
            r, pr = model.predict(q, x)
            return float(cr @ r + np.sum(cp * pr))

        errs[f"tabular_mdp/rank={rank}"] = _fd_rel(model.vjp(w, x, cr, cp), central_gradient(h, w))
    return errs


def lse_shift_errors(seed: int = 0) -> dict:
    rng = make_rng(seed, 113)
    errs = {}
    for scale in (1.0, 1e3):
        v = scale * rng.standard_normal((4, 5))
        c = scale * rng.standard_normal()
        errs[f"lse_shift/scale={scale:g}"] = float(np.max(np.abs(lse(v + c, axis=1) - (lse(v, axis=1) + c)))) / max(1.0, abs(c))
    return errs


def check_derivatives() -> CriterionResult:
    t0 = time.perf_counter()
    errs = {**loss_derivative_errors(), **model_vjp_errors()}
    shift = lse_shift_errors()
    worst_key = max(errs, key=errs.get)
    ok = all(e <= 1e-5 for e in errs.values()) and all(e <= 1e-12 for e in shift.values())
    return CriterionResult(11, "derivative micro-suite", ok,
                           f"{len(errs)} FD checks, worst {worst_key} {errs[worst_key]:.2e} <= 1e-5; "
                           f"lse shift max {max(shift.values()):.1e}",
                           time.perf_counter() - t0, 10.0)


CHECKS = {
    1: check_gradient_identity,
    2: check_adjoint_convergence,
    3: check_projection_identity,
    4: check_distortion,
    5: check_bias_trend,
    6: check_stationarity,
    7: check_iv,
    8: check_rl_closed_form,
    9: check_rl_fixed_point,
    10: check_cost,
    11: check_derivatives,
}
SUITES = {"quick": (11, 1, 2, 3), "full": tuple(sorted(CHECKS))}


def run_suite(name: str = "quick", emit=print) -> list[CriterionResult]:
    if name not in SUITES:
        raise ValueError(f"unknown suite {name!r}; choose from {sorted(SUITES)}")
    results = []
    for k in SUITES[name]:
        res = CHECKS[k]()
        if emit is not None:
            emit(res.line())
        results.append(res)
    return results
