import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from funcbo.numkit import (
    DimensionError,
    NonFiniteError,
    NotPositiveDefiniteError,
    add_flops,
    central_gradient,
    conjugate_gradient,
    count_flops,
    fd_directional,
    make_rng,
    matvec,
    spd_solve,
    splitmix64,
)


def random_spd(rng, n):
    M = rng.standard_normal((n, n))
    return M.T @ M + np.eye(n)


# matvec


def test_matvec_identity():
    assert np.array_equal(matvec(np.eye(2), [3.0, 4.0]), [3.0, 4.0])


def test_matvec_zero_matrix():
    assert np.array_equal(matvec(np.zeros((3, 2)), [1.0, -2.0]), np.zeros(3))


def test_matvec_hand_2x2():
    assert np.array_equal(matvec([[1, 2], [3, 4]], [1, 1]), [3.0, 7.0])


def test_matvec_dimension_mismatch():
    with pytest.raises(DimensionError):
        matvec(np.eye(2), np.ones(3))


def test_matvec_rejects_nonfinite_result():
    with pytest.raises(NonFiniteError):
        matvec([[np.inf]], [1.0])


# spd_solve


def test_spd_solve_identity():
    b = np.array([1.5, -2.0, 0.25])
    assert np.allclose(spd_solve(np.eye(3), b), b, rtol=0, atol=1e-15)


def test_spd_solve_scalar():
    assert spd_solve([[2.0]], [4.0]) == pytest.approx([2.0])


@given(st.integers(0, 2**32 - 1), st.integers(1, 10))
@settings(max_examples=40, deadline=None)
def test_spd_solve_residual(seed, n):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, n)
    b = rng.standard_normal(n)
    x = spd_solve(A, b)
    assert np.max(np.abs(A @ x - b)) <= 1e-8 * (1 + np.max(np.abs(b)))


def test_spd_solve_names_failing_pivot():
    A = np.diag([1.0, 2.0, -1.0, 4.0])
    with pytest.raises(NotPositiveDefiniteError) as err:
        spd_solve(A, np.ones(4))
    assert err.value.pivot == 2
    assert "pivot 2" in str(err.value)


def test_spd_solve_rejects_asymmetric():
    with pytest.raises(ValueError):
        spd_solve([[2.0, 1.0], [0.0, 2.0]], [1.0, 1.0])


def test_spd_solve_matrix_rhs():
    rng = make_rng(3)
    A = random_spd(rng, 4)
    B = rng.standard_normal((4, 2))
    assert np.allclose(A @ spd_solve(A, B), B, atol=1e-10)


# conjugate gradient


def test_cg_identity_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    res = conjugate_gradient(lambda v: v, b)
    assert res.converged and res.iters == 1
    assert np.allclose(res.x, b)


def test_cg_diagonal_inverse():
    d = np.arange(1.0, 6.0)
    res = conjugate_gradient(lambda v: d * v, np.ones(5), tol=1e-12)
    assert np.allclose(res.x, 1.0 / d, atol=1e-12)


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_cg_agrees_with_spd_solve(seed):
    rng = np.random.default_rng(seed)
    A = random_spd(rng, 10)
    b = rng.standard_normal(10)
    res = conjugate_gradient(lambda v: A @ v, b, tol=1e-12, maxit=200)
    ref = spd_solve(A, b)
    assert np.linalg.norm(res.x - ref) <= 1e-6 * np.linalg.norm(ref)


def test_cg_reports_nonconvergence():
    A = random_spd(make_rng(0), 20) + 1e6 * np.diag(np.arange(20.0))
    res = conjugate_gradient(lambda v: A @ v, np.ones(20), tol=1e-14, maxit=2)
    assert not res.converged
    assert res.iters == 2
    assert np.all(np.isfinite(res.x))


def test_cg_rejects_nonpositive_tol():
    with pytest.raises(ValueError):
        conjugate_gradient(lambda v: v, np.ones(2), tol=0.0)


def test_cg_zero_rhs():
    res = conjugate_gradient(lambda v: 2 * v, np.zeros(3))
    assert res.converged and res.iters == 0 and not np.any(res.x)


# finite differences


@given(st.integers(0, 2**32 - 1))
@settings(max_examples=30, deadline=None)
def test_fd_directional_exact_on_quadratics(seed):
    rng = np.random.default_rng(seed)
    H = random_spd(rng, 6)
    p, v = rng.standard_normal(6), rng.standard_normal(6)
    hv = fd_directional(lambda q: H @ q, p, v, eps=1e-3)
    assert np.linalg.norm(hv - H @ v) <= 1e-9 * np.linalg.norm(H @ v)


def test_fd_directional_zero_direction():
    out = fd_directional(lambda q: np.sin(q), np.ones(3), np.zeros(3))
    assert np.array_equal(out, np.zeros(3))


def test_fd_directional_quartic():
    # f(p) = ||p||^4: Hessian 8 p p^T + 4 ||p||^2 I, at p = e1 applied to e1 gives 12 e1
    def grad(p):
        return 4.0 * (p @ p) * p

    p = np.array([1.0, 0.0, 0.0])
    out = fd_directional(grad, p, p, eps=1e-5)
    assert np.allclose(out, [12.0, 0.0, 0.0], rtol=1e-8, atol=1e-8)


def test_fd_directional_rejects_nonfinite():
    with pytest.raises(NonFiniteError), np.errstate(over="ignore"):
        fd_directional(lambda q: 1.0 / q, np.zeros(1), np.ones(1), eps=1e-300)
    with pytest.raises(NonFiniteError):
        fd_directional(lambda q: q, np.zeros(1), np.array([np.nan]))
    with pytest.raises(ValueError):
        fd_directional(lambda q: q, np.zeros(1), np.ones(1), eps=0.0)


def test_central_gradient_polynomial():
    f = lambda p: p[0] ** 3 + 2 * p[0] * p[1]
    g = central_gradient(f, np.array([1.0, 2.0]))
    assert np.allclose(g, [3.0 + 4.0, 2.0], rtol=1e-8)


# random streams


def test_rng_reproducible_first_10k_draws():
    a = make_rng(42).standard_normal(10_000)
    b = make_rng(42).standard_normal(10_000)
    assert np.array_equal(a, b)


def test_rng_streams_differ():
    assert not np.array_equal(make_rng(1, 0).random(8), make_rng(1, 1).random(8))
    assert not np.array_equal(make_rng(1).random(8), make_rng(2).random(8))


def test_splitmix64_reference_values():
    # reference outputs of splitmix64 seeded with 0 (first three draws)
    state, out = 0, []
    for _ in range(3):
        state, z = splitmix64(state)
        out.append(z)
    assert out == [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]


def test_rng_frozen_draws():
    # frozen so that any change to the seeding scheme is caught
    assert make_rng(0).integers(0, 1000, size=5).tolist() == [189, 311, 264, 618, 707]


# flop counters


def test_flop_counter_scoping():
    add_flops("x", 5)  # outside any counter: ignored
    with count_flops() as outer:
        add_flops("a", 3)
        with count_flops() as inner:
            add_flops("a", 7)
        add_flops("b", 1)
    assert outer == {"a": 3, "b": 1}
    assert inner == {"a": 7}


def test_matvec_books_flops():
    with count_flops() as fl:
        matvec(np.ones((3, 4)), np.ones(4))
    assert fl["matvec"] == 24
