"""Toy tabular MDP for model-based soft Q-learning as a bilevel problem.

Outer variable: parameters of an MDP model (reward table plus next-state logits).
Inner variable: a tabular action-value function fit to Bellman targets computed
with the model. The outer loss is the Bellman error on observed transitions, and
both sides bootstrap from the per-state soft values of a lagged copy of the
inner function.

State-action pairs are encoded as ``x = [onehot(s), onehot(a)]``.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..batch import Batch
from ..funcid import BilevelProblem, OptimConfig, linear_inner_solve
from ..losses import BellmanInner, BellmanOuter, LaggedValues, lse, softmax
from ..models import LinearModel
from ..numkit import add_flops


@dataclass
class ToyMdp:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A), entries in [0, 1]
    gamma: float = 0.99

    def __post_init__(self):
        if self.P.ndim != 3 or self.P.shape[0] != self.P.shape[2] or self.P.shape[:2] != self.R.shape:
            raise ValueError("P must be (S, A, S) and R (S, A)")
        if not np.allclose(self.P.sum(axis=2), 1.0, atol=1e-12, rtol=0):
            raise ValueError("transition rows must sum to 1")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]


def gen_mdp(rng: np.random.Generator, n_states: int = 8, n_actions: int = 2, gamma: float = 0.99) -> ToyMdp:
    """Dirichlet(1, ..., 1) transition rows and U(0, 1) rewards."""
    if n_states < 2 or n_actions < 2:
        raise ValueError("need at least 2 states and 2 actions")
    P = rng.dirichlet(np.ones(n_states), size=(n_states, n_actions))
    P /= P.sum(axis=2, keepdims=True)
    R = rng.uniform(0.0, 1.0, size=(n_states, n_actions))
    return ToyMdp(P, R, gamma)


def encode(s, a, n_states: int, n_actions: int) -> np.ndarray:
    s = np.asarray(s, dtype=np.int64)
    a = np.asarray(a, dtype=np.int64)
    x = np.zeros((s.shape[0], n_states + n_actions))
    x[np.arange(s.shape[0]), s] = 1.0
    x[np.arange(s.shape[0]), n_states + a] = 1.0
    return x


def decode(x, n_states: int) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x)
    return np.argmax(x[:, :n_states], axis=1), np.argmax(x[:, n_states:], axis=1)


class _PairIndex:
    """``s * n_actions + a`` per row, memoized for the last input array (buffers are reused every step)."""

    def __init__(self, n_states: int, n_actions: int):
        self.n_states = n_states
        self.n_actions = n_actions
        self._key = None
        self._val = None

    def __call__(self, x) -> np.ndarray:
        if self._key is not None and self._key is x:
            return self._val
        s, a = decode(x, self.n_states)
        self._key, self._val = x, s * self.n_actions + a
        return self._val


def replay_collect(mdp: ToyMdp, steps: int, rng: np.random.Generator, behavior_policy=None, s0: int | None = None) -> Batch:
    """Roll out a behavior policy (uniform by default) and store transitions.

    ``behavior_policy`` is an (S, A) matrix of action probabilities.
    Returns x = encoded (s, a) and y = {"s", "a", "r", "s_next"}.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    S, A = mdp.n_states, mdp.n_actions
    pi = np.full((S, A), 1.0 / A) if behavior_policy is None else np.asarray(behavior_policy, dtype=np.float64)
    s_arr = np.empty(steps, dtype=np.int64)
    a_arr = np.empty(steps, dtype=np.int64)
    sn_arr = np.empty(steps, dtype=np.int64)
    s = int(rng.integers(S)) if s0 is None else int(s0)
    cum_pi = np.cumsum(pi, axis=1)
    cum_P = np.cumsum(mdp.P, axis=2)
    u = rng.uniform(size=(steps, 2))
    for i in range(steps):
        a = min(int(np.searchsorted(cum_pi[s], u[i, 0], side="right")), A - 1)
        sn = min(int(np.searchsorted(cum_P[s, a], u[i, 1], side="right")), S - 1)
        s_arr[i], a_arr[i], sn_arr[i] = s, a, sn
        s = sn
    r = mdp.R[s_arr, a_arr]
    return Batch(encode(s_arr, a_arr, S, A), {"s": s_arr, "a": a_arr, "r": r, "s_next": sn_arr})


def soft_value_iteration(mdp: ToyMdp, gamma: float | None = None, alpha: float = 1.0, tol: float = 1e-10,
                         max_iter: int = 100_000) -> np.ndarray:
    """Fixed point of ``Q = R + g P V(Q)`` with ``V = alpha lse(Q / alpha)`` (hard max when alpha = 0)."""
    gamma = mdp.gamma if gamma is None else gamma
    if not 0.0 <= gamma < 1.0:
        raise ValueError("gamma must be in [0, 1)")
    Q = np.zeros_like(mdp.R)
    for _ in range(max_iter):
        V = Q.max(axis=1) if alpha == 0 else alpha * lse(Q / alpha, axis=1)
        Q_new = mdp.R + gamma * mdp.P @ V
        if np.max(np.abs(Q_new - Q)) <= tol:
            return Q_new
        Q = Q_new
    raise RuntimeError("value iteration did not converge")


def greedy_policy(Q) -> np.ndarray:
    """Per-state argmax; ``np.argmax`` breaks ties to the lowest index."""
    return np.argmax(np.asarray(Q), axis=1)


def policy_values(mdp: ToyMdp, policy, gamma: float | None = None) -> np.ndarray:
    gamma = mdp.gamma if gamma is None else gamma
    S = mdp.n_states
    idx = np.arange(S)
    P_pi = mdp.P[idx, policy]
    return np.linalg.solve(np.eye(S) - gamma * P_pi, mdp.R[idx, policy])


def brute_force_policy(mdp: ToyMdp, gamma: float | None = None) -> np.ndarray:
    """Best deterministic policy by exhaustive enumeration (largest value in every state)."""
    best, best_v = None, None
    for pol in itertools.product(range(mdp.n_actions), repeat=mdp.n_states):
        pol = np.array(pol)
        v = policy_values(mdp, pol, gamma)
        if best_v is None or np.all(v >= best_v - 1e-12) and np.any(v > best_v + 1e-12):
            best, best_v = pol, v
    return best


# ---------------------------------------------------------------------------
# models


class TabularMdpModel:
    """Reward table plus softmax next-state logits per (s, a).

    With ``rank`` set, logits are ``U[s, a] @ Vm`` with ``U`` (S*A, rank) and ``Vm``
    (rank, S): a deliberately limited model class.
    Parameter layout: reward table (S*A), then logits (S*A*S) or U then Vm.
    """

    def __init__(self, n_states: int, n_actions: int, rank: int | None = None):
        self.n_states = n_states
        self.n_actions = n_actions
        self.rank = rank
        sa = n_states * n_actions
        self.n_params = sa + (sa * n_states if rank is None else rank * (sa + n_states))
        self._index = _PairIndex(n_states, n_actions)

    def _split(self, omega):
        omega = np.asarray(omega, dtype=np.float64)
        if omega.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} model parameters, got {omega.shape}")
        S, A = self.n_states, self.n_actions
        r = omega[: S * A]
        rest = omega[S * A:]
        if self.rank is None:
            return r, rest.reshape(S * A, S), None
        k = self.rank
        return r, rest[: S * A * k].reshape(S * A, k), rest[S * A * k:].reshape(k, S)

    def logits(self, omega) -> np.ndarray:
        _, L, Vm = self._split(omega)
        return L if Vm is None else L @ Vm

    def init(self, rng: np.random.Generator | None = None, scale: float = 0.0) -> np.ndarray:
        if rng is None or scale == 0:
            return np.zeros(self.n_params)
        return scale * rng.standard_normal(self.n_params)

    def from_mdp(self, mdp: ToyMdp) -> np.ndarray:
        """Parameters that reproduce ``mdp`` exactly (full-rank model only)."""
        if self.rank is not None:
            raise ValueError("a rank-limited model cannot represent an arbitrary MDP")
        return np.concatenate([mdp.R.ravel(), np.log(mdp.P).ravel()])

    def predict(self, omega, x) -> tuple[np.ndarray, np.ndarray]:
        r, _, _ = self._split(omega)
        idx = self._index(x)
        p = softmax(self.logits(omega), axis=1)[idx]
        add_flops("forward", 4 * p.size)
        return r[idx], p

    def transition_table(self, omega) -> np.ndarray:
        S, A = self.n_states, self.n_actions
        return softmax(self.logits(omega), axis=1).reshape(S, A, S)

    def reward_table(self, omega) -> np.ndarray:
        return self._split(omega)[0].reshape(self.n_states, self.n_actions)

    def vjp(self, omega, x, cot_r, cot_p) -> np.ndarray:
        r, L, Vm = self._split(omega)
        idx = self._index(x)
        S, A = self.n_states, self.n_actions
        cot_p = np.asarray(cot_p, dtype=np.float64)
        # the softmax vjp is linear in the cotangent, so sum cotangents per (s, a) row first
        c_rows = np.zeros((S * A, S))
        np.add.at(c_rows, idx, cot_p)
        p = softmax(self.logits(omega), axis=1)
        g_rows = p * (c_rows - np.sum(p * c_rows, axis=1, keepdims=True))
        add_flops("backward", cot_p.size + 6 * p.size)
        g_r = np.bincount(idx, weights=np.asarray(cot_r, dtype=np.float64), minlength=S * A)
        if Vm is None:
            return np.concatenate([g_r, g_rows.ravel()])
        return np.concatenate([g_r, (g_rows @ Vm.T).ravel(), (L.T @ g_rows).ravel()])


def q_features(n_states: int, n_actions: int):
    """One-hot of the (s, a) pair: a tabular action-value function as a LinearModel."""

    index = _PairIndex(n_states, n_actions)

    def feats(x):
        idx = index(x)
        out = np.zeros((idx.shape[0], n_states * n_actions))
        out[np.arange(idx.shape[0]), idx] = 1.0
        return out

    return feats


def q_model(n_states: int, n_actions: int) -> LinearModel:
    return LinearModel(q_features(n_states, n_actions), n_states * n_actions, 1, name="tabular_q")


def q_table(theta, n_states: int, n_actions: int) -> np.ndarray:
    return np.asarray(theta).reshape(n_states, n_actions)


# ---------------------------------------------------------------------------
# bilevel problem


@dataclass
class RlSetup:
    mdp: ToyMdp
    buffer: Batch
    model: TabularMdpModel
    lagged: LaggedValues
    problem: BilevelProblem
    q_star: np.ndarray
    oracle_policy: np.ndarray


def rl_problem(mdp: ToyMdp, buffer: Batch, rank: int | None = None, tau: float = 5e-3,
               omega0=None) -> RlSetup:
    """Bilevel soft Q-learning problem on a replay buffer with an EMA target network."""
    if len(buffer) == 0:
        raise ValueError("empty replay buffer")
    S, A = mdp.n_states, mdp.n_actions
    model = TabularMdpModel(S, A, rank)
    lagged = LaggedValues(S)
    q_star = soft_value_iteration(mdp)
    oracle = greedy_policy(q_star)
    target_q = np.zeros((S, A))

    def after_outer_step(omega, theta, n):
        target_q[:] = (1.0 - tau) * target_q + tau * q_table(theta, S, A)
        lagged.set_q(target_q)

    def eval_metric(omega, theta):
        # fraction of states whose greedy action matches the oracle policy
        return float(np.mean(greedy_policy(q_table(theta, S, A)) == oracle))

    problem = BilevelProblem(
        inner_loss=BellmanInner(model, lagged, mdp.gamma),
        outer_loss=BellmanOuter(lagged, mdp.gamma, n_omega=model.n_params),
        d_in=buffer,
        d_out=buffer,
        inner_model=q_model(S, A),
        omega0=model.init() if omega0 is None else omega0,
        eval_metric=eval_metric,
        after_outer_step=after_outer_step,
    )
    return RlSetup(mdp, buffer, model, lagged, problem, q_star, oracle)


def inner_fixed_point(mdp: ToyMdp, buffer: Batch, omega=None, tol: float = 1e-10, max_iter: int = 100_000) -> np.ndarray:
    """Iterate exact inner solves against a model with hard target updates until the Q table stops moving.

    With the true model (the default) the fixed point is the soft value-iteration solution.
    """
    setup = rl_problem(mdp, buffer)
    omega = setup.model.from_mdp(mdp) if omega is None else omega
    S, A = mdp.n_states, mdp.n_actions
    Q = np.zeros((S, A))
    for _ in range(max_iter):
        setup.lagged.set_q(Q)
        theta = linear_inner_solve(setup.problem, omega, buffer, 0.0)
        Q_new = q_table(theta, S, A)
        if np.max(np.abs(Q_new - Q)) <= tol:
            return Q_new
        Q = Q_new
    raise RuntimeError("inner fixed point iteration did not converge")


def default_rl_config(**kw) -> OptimConfig:
    base = dict(N=800, M=1, K=0, lr_out=0.5, opt_out="sgd", inner_mode="exact", adjoint_mode="closed_form",
                batch_in=None, batch_out=None)
    base.update(kw)
    return OptimConfig(**base)
