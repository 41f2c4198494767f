"""Point-wise losses with the derivative quantities needed by the adjoint method.

Every loss here has the form ``l(w, v, x, y) = (c/2) ||v - T(w, x, y)||^2``:

* ``squared_outer``            T = o,                         c = 2
* ``squared_inner_to_model``   T = f_w(t),                    c = 2
* ``bellman_outer``            T = r' + g * lse(qbar(s', .)),  c = 1
* ``bellman_inner``            T = r_w(x) + g * E_{s'~p_w(.|x)} lse(qbar(s', .)),  c = 1

so ``hess_v = c I`` exactly and the strong-convexity modulus in ``v`` is ``c``.
Batch methods return per-sample arrays for v-derivatives and batch means for
w-derivatives.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkit import DimensionError, NonFiniteError, add_flops


def lse(values, axis=None):
    """Stable log-sum-exp."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("lse of an empty array")
    m = np.max(values, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(values - m), axis=axis, keepdims=True))
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def softmax(values, axis=-1):
    values = np.asarray(values, dtype=np.float64)
    z = np.exp(values - np.max(values, axis=axis, keepdims=True))
    return z / np.sum(z, axis=axis, keepdims=True)


@dataclass
class LossBundle:
    value: float
    grad_v: np.ndarray
    hess_v: np.ndarray


class PointwiseLoss:
    kind = "abstract"
    curvature = 1.0
    depends_on_omega = False

    @property
    def mu(self) -> float:
        return self.curvature

    def target(self, omega, x, y) -> np.ndarray:
        raise NotImplementedError

    def target_vjp(self, omega, x, y, cot) -> np.ndarray:
        """sum_i <cot_i, d_w T(w, x_i, y_i)>."""
        raise NotImplementedError

    def n_omega(self, omega) -> int:
        return np.asarray(omega).shape[0]

    def _check_v(self, v, T):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.shape != T.shape:
            raise DimensionError(f"v has shape {v.shape}, loss target has shape {T.shape}")
        if not np.all(np.isfinite(T)):
            raise NonFiniteError(f"{self.kind}: non-finite target")
        return v

    def value(self, omega, v, x, y) -> np.ndarray:
        T = self.target(omega, x, y)
        r = self._check_v(v, T) - T
        return 0.5 * self.curvature * np.sum(r * r, axis=1)

    def grad_v(self, omega, v, x, y) -> np.ndarray:
        T = self.target(omega, x, y)
        return self.curvature * (self._check_v(v, T) - T)

    def hess_v(self, omega, v, x, y) -> np.ndarray:
        T = self.target(omega, x, y)
        n, d = self._check_v(v, T).shape
        return np.broadcast_to(self.curvature * np.eye(d), (n, d, d)).copy()

    def hvp_v(self, omega, v, x, y, a) -> np.ndarray:
        """Per-sample output-space Hessian-vector products ``hess_v(x_i) a_i``."""
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        add_flops("hvp", a.size)
        return self.curvature * a

    def grad_omega(self, omega, v, x, y) -> np.ndarray:
        if not self.depends_on_omega:
            return np.zeros(self.n_omega(omega))
        T = self.target(omega, x, y)
        r = self._check_v(v, T) - T
        return self.target_vjp(omega, x, y, -self.curvature * r) / T.shape[0]

    def cross_apply(self, omega, v, x, y, a) -> np.ndarray:
        """Batch mean of ``d_w (a_i . d_v l(w, v_i, x_i, y_i))`` with ``a`` held fixed."""
        if not self.depends_on_omega:
            return np.zeros(self.n_omega(omega))
        a = np.asarray(a, dtype=np.float64)
        if a.ndim == 1:
            a = a[:, None]
        n = np.asarray(x).shape[0]
        if a.shape[0] != n:
            raise DimensionError(f"adjoint values have {a.shape[0]} rows for a batch of {n}")
        return -self.curvature * self.target_vjp(omega, x, y, a) / n

    def eval_bundle(self, omega, v, x, y) -> LossBundle:
        """Derivatives for a single sample; ``x`` is 1-D and ``y`` holds scalars/rows."""
        xb = np.asarray(x, dtype=np.float64)[None, :]
        yb = {k: np.asarray(val)[None, ...] for k, val in y.items()}
        vb = np.atleast_1d(np.asarray(v, dtype=np.float64))[None, :]
        return LossBundle(
            float(self.value(omega, vb, xb, yb)[0]),
            self.grad_v(omega, vb, xb, yb)[0],
            self.hess_v(omega, vb, xb, yb)[0],
        )


def _col(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


class SquaredOuter(PointwiseLoss):
    """``||o - v||^2``; no dependence on the outer parameter."""

    kind = "squared_outer"
    curvature = 2.0

    def __init__(self, n_omega: int | None = None):
        self._n_omega = n_omega

    def n_omega(self, omega):
        return self._n_omega if self._n_omega is not None else np.asarray(omega).shape[0]

    def target(self, omega, x, y):
        return _col(y["o"])


class SquaredInnerToModel(PointwiseLoss):
    """``||f_w(t) - v||^2`` where ``f_w`` is the outer (structural) model."""

    kind = "squared_inner_to_model"
    curvature = 2.0
    depends_on_omega = True

    def __init__(self, outer_model):
        self.model = outer_model

    def target(self, omega, x, y):
        return _col(self.model.value(omega, y["t"]))

    def target_vjp(self, omega, x, y, cot):
        return self.model.vjp(omega, y["t"], _col(cot))


class LaggedValues:
    """Per-state soft values ``lse_a qbar(s, a)`` of the lagged action-value network."""

    def __init__(self, n_states: int, values=None):
        self.n_states = n_states
        self.values = np.zeros(n_states) if values is None else np.asarray(values, dtype=np.float64)

    @classmethod
    def from_q(cls, q_table) -> "LaggedValues":
        q_table = np.asarray(q_table, dtype=np.float64)
        return cls(q_table.shape[0], lse(q_table, axis=1))

    def set_q(self, q_table) -> None:
        self.values = lse(np.asarray(q_table, dtype=np.float64), axis=1)


class BellmanOuter(PointwiseLoss):
    """``1/2 (v - r' - g lse(qbar(s', .)))^2`` on observed transitions."""

    kind = "bellman_outer"
    curvature = 1.0

    def __init__(self, lagged: LaggedValues, gamma: float = 0.99, n_omega: int | None = None):
        self.lagged = lagged
        self.gamma = gamma
        self._n_omega = n_omega

    def n_omega(self, omega):
        return self._n_omega if self._n_omega is not None else np.asarray(omega).shape[0]

    def target(self, omega, x, y):
        r = np.asarray(y["r"], dtype=np.float64)
        s_next = np.asarray(y["s_next"], dtype=np.int64)
        return (r + self.gamma * self.lagged.values[s_next])[:, None]


class BellmanInner(PointwiseLoss):
    """Bellman error against the model's predicted reward and next-state distribution.

    ``mdp_model`` provides ``predict(w, x) -> (r (n,), p (n, S))`` and
    ``vjp(w, x, cot_r, cot_p) -> d_w``. The lagged values are constants.
    """

    kind = "bellman_inner"
    curvature = 1.0
    depends_on_omega = True

    def __init__(self, mdp_model, lagged: LaggedValues, gamma: float = 0.99):
        self.model = mdp_model
        self.lagged = lagged
        self.gamma = gamma

    def target(self, omega, x, y=None):
        r, p = self.model.predict(omega, x)
        return (r + self.gamma * p @ self.lagged.values)[:, None]

    def target_vjp(self, omega, x, y, cot):
        c = _col(cot)[:, 0]
        cot_p = self.gamma * c[:, None] * self.lagged.values[None, :]
        return self.model.vjp(omega, x, c, cot_p)


LOSS_KINDS = {
    cls.kind: cls for cls in (SquaredOuter, SquaredInnerToModel, BellmanOuter, BellmanInner)
}
