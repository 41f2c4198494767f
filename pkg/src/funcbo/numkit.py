"""Dense linear algebra, seeded random streams and finite differences.

Vectors and matrices are plain float64 numpy arrays; the helpers here only add
the shape/finiteness checks and error reporting the rest of the package relies on.
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy.linalg import lapack

MASK64 = (1 << 64) - 1


class NumkitError(ValueError):
    """Base class for structured numerical errors."""


class DimensionError(NumkitError):
    pass


class NonFiniteError(NumkitError):
    pass


class NotPositiveDefiniteError(NumkitError):
    def __init__(self, pivot: int):
        self.pivot = pivot
        super().__init__(f"matrix is not positive definite: Cholesky pivot {pivot} failed")


# ---------------------------------------------------------------------------
# flop accounting

_flops: contextvars.ContextVar[dict | None] = contextvars.ContextVar("funcbo_flops", default=None)


def add_flops(category: str, n: int) -> None:
    counts = _flops.get()
    if counts is not None:
        counts[category] = counts.get(category, 0) + int(n)


@contextlib.contextmanager
def count_flops() -> Iterator[dict]:
    """Collect floating-point operation counts reported via :func:`add_flops`."""
    counts: dict[str, int] = {}
    token = _flops.set(counts)
    try:
        yield counts
    finally:
        _flops.reset(token)


# ---------------------------------------------------------------------------
# random streams


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step; returns (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """PCG64 generator whose 128-bit state and increment come from splitmix64.

    ``stream`` selects an independent sub-stream for the same seed.
    """
    s = (int(seed) ^ ((int(stream) * 0xD1B54A32D192ED03) & MASK64)) & MASK64
    words = []
    for _ in range(4):
        s, out = splitmix64(s)
        words.append(out)
    bitgen = np.random.PCG64()
    bitgen.state = {
        "bit_generator": "PCG64",
        "state": {
            "state": (words[0] << 64) | words[1],
            "inc": ((words[2] << 64) | words[3]) | 1,
        },
        "has_uint32": 0,
        "uinteger": 0,
    }
    return np.random.Generator(bitgen)


# ---------------------------------------------------------------------------
# checks


def check_finite(a: np.ndarray, what: str = "array") -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite entries")
    return a


def as_vec(x, what: str = "vector") -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1:
        raise DimensionError(f"{what} must be 1-D, got shape {v.shape}")
    return v


def as_mat(a, what: str = "matrix") -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"{what} must be 2-D, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# dense kernels


def matvec(A, x) -> np.ndarray:
    A = as_mat(A)
    x = as_vec(x)
    if A.shape[1] != x.shape[0]:
        raise DimensionError(f"matvec: A has {A.shape[1]} columns, x has length {x.shape[0]}")
    add_flops("matvec", 2 * A.shape[0] * A.shape[1])
    return check_finite(A @ x, "matvec result")


def spd_solve(A, b, sym_tol: float = 1e-10) -> np.ndarray:
    """Solve ``A x = b`` for symmetric positive definite ``A`` by Cholesky.

    ``b`` may be a vector or a matrix of right-hand sides.
    """
    A = as_mat(A)
    b = np.asarray(b, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n) or b.shape[0] != n:
        raise DimensionError(f"spd_solve: A {A.shape} incompatible with b {b.shape}")
    check_finite(A, "spd_solve matrix")
    check_finite(b, "spd_solve rhs")
    scale = max(1.0, float(np.max(np.abs(A))) if n else 1.0)
    if np.max(np.abs(A - A.T), initial=0.0) > sym_tol * scale:
        raise NumkitError("spd_solve: matrix is not symmetric")
    c, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise NotPositiveDefiniteError(info - 1)
    if info < 0:  # pragma: no cover - lapack argument error
        raise NumkitError(f"dpotrf failed with info={info}")
    # pivots at round-off level mean the matrix is singular in floating point
    small = np.flatnonzero(np.diag(c) ** 2 <= n * np.finfo(np.float64).eps * scale)
    if small.size:
        raise NotPositiveDefiniteError(int(small[0]))
    x, info = lapack.dpotrs(c, b, lower=1)
    if info != 0:  # pragma: no cover
        raise NumkitError(f"dpotrs failed with info={info}")
    return check_finite(x, "spd_solve result")


@dataclass
class CGResult:
    x: np.ndarray
    iters: int
    residual: float
    converged: bool


def conjugate_gradient(
    apply: Callable[[np.ndarray], np.ndarray],
    b,
    tol: float = 1e-8,
    maxit: int | None = None,
    x0=None,
) -> CGResult:
    """Conjugate gradient for a symmetric PSD operator.

    Stops once ``||b - apply(x)|| <= tol * ||b||``; non-convergence is reported
    through ``converged`` rather than raised.
    """
    b = as_vec(b)
    if tol <= 0:
        raise ValueError("tol must be positive")
    if maxit is None:
        maxit = 10 * b.shape[0]
    x = np.zeros_like(b) if x0 is None else as_vec(x0).copy()
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = float(np.linalg.norm(b))
    target = tol * bnorm
    rnorm = float(np.linalg.norm(r))
    if rnorm <= target:
        return CGResult(x, 0, rnorm / max(bnorm, 1e-300), True)
    p = r.copy()
    rs = rnorm**2
    it = 0
    while it < maxit:
        Ap = apply(p)
        pAp = float(p @ Ap)
        it += 1
        if not np.isfinite(pAp) or pAp <= 0:
            # direction of zero or negative curvature: stop and report
            break
        alpha = rs / pAp
        x = x + alpha * p
        r = r - alpha * Ap
        rs_new = float(r @ r)
        rnorm = rs_new**0.5
        if rnorm <= target:
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    rel = rnorm / max(bnorm, 1e-300)
    return CGResult(x, it, rel, rnorm <= target)


def fd_directional(grad_fn: Callable[[np.ndarray], np.ndarray], p, v, eps: float = 1e-5) -> np.ndarray:
    """Central difference of ``grad_fn`` along ``v``: a Hessian-vector product estimate."""
    if eps <= 0:
        raise ValueError("eps must be positive")
    p = as_vec(p)
    v = check_finite(as_vec(v), "direction")
    if not np.any(v):
        return np.zeros_like(np.asarray(grad_fn(p), dtype=np.float64))
    gp = np.asarray(grad_fn(p + eps * v), dtype=np.float64)
    gm = np.asarray(grad_fn(p - eps * v), dtype=np.float64)
    out = (gp - gm) / (2.0 * eps)
    return check_finite(out, "fd_directional intermediate")


def central_gradient(f: Callable[[np.ndarray], float], p, eps: float = 1e-5, relative: bool = True) -> np.ndarray:
    """Coordinate-wise central differences, step ``eps * (1 + |p_i|)`` when ``relative``."""
    p = as_vec(p)
    g = np.empty_like(p)
    for i in range(p.shape[0]):
        h = eps * (1.0 + abs(p[i])) if relative else eps
        e = np.zeros_like(p)
        e[i] = h
        fp = f(p + e)
        fm = f(p - e)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NonFiniteError(f"non-finite function value probing coordinate {i}")
        g[i] = (fp - fm) / (2.0 * h)
    return g
