"""Parametric function approximators used for the inner and adjoint functions.

Parameters are always a flat float64 vector. For an MLP the layout is, layer by
layer, the weight matrix (row-major, ``out x in``) followed by its bias.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .numkit import DimensionError, add_flops, check_finite

ACTIVATIONS = ("relu", "tanh", "identity")


def _act(name: str, z: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(z, 0.0)
    if name == "tanh":
        return np.tanh(z)
    return z


def _act_grad(name: str, z: np.ndarray, a: np.ndarray) -> np.ndarray:
    if name == "relu":
        # derivative at the kink is taken to be 0
        return (z > 0).astype(np.float64)
    if name == "tanh":
        return 1.0 - a * a
    return np.ones_like(z)


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple[int, ...]
    activations: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        acts = tuple(self.activations)
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be >= 1")
        n_hidden = len(self.widths) - 2
        if len(acts) == 1 and n_hidden > 1:
            acts = acts * n_hidden
        if len(acts) != n_hidden:
            raise ValueError(f"expected {n_hidden} hidden activations, got {len(acts)}")
        for a in acts:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in zip(self.widths[:-1], self.widths[1:]))

    @property
    def d_in(self) -> int:
        return self.widths[0]

    @property
    def d_out(self) -> int:
        return self.widths[-1]


class Mlp:
    """Fully connected network with a linear output layer."""

    kind = "mlp"

    def __init__(self, spec: MlpSpec):
        self.spec = spec
        self.n_params = spec.n_params
        self.d_in = spec.d_in
        self.d_out = spec.d_out

    def unpack(self, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {params.shape}")
        layers = []
        k = 0
        for i, o in zip(self.spec.widths[:-1], self.spec.widths[1:]):
            W = params[k : k + i * o].reshape(o, i)
            k += i * o
            b = params[k : k + o]
            k += o
            layers.append((W, b))
        return layers

    def init(self, rng: np.random.Generator) -> np.ndarray:
        """Glorot-uniform weights, zero biases."""
        chunks = []
        for i, o in zip(self.spec.widths[:-1], self.spec.widths[1:]):
            bound = np.sqrt(6.0 / (i + o))
            chunks.append(rng.uniform(-bound, bound, size=i * o))
            chunks.append(np.zeros(o))
        return np.concatenate(chunks)

    def _check_inputs(self, xs) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.d_in:
            raise DimensionError(f"expected inputs of shape (n, {self.d_in}), got {xs.shape}")
        return xs

    def _forward_cache(self, params, xs):
        layers = self.unpack(params)
        xs = self._check_inputs(xs)
        n = xs.shape[0]
        cache = []
        a = xs
        for li, (W, b) in enumerate(layers):
            z = a @ W.T + b
            add_flops("forward", 2 * n * W.size)
            if li < len(layers) - 1:
                act = self.spec.activations[li]
                a_next = _act(act, z)
            else:
                act = "identity"
                a_next = z
            cache.append((a, z, a_next, act))
            a = a_next
        return layers, cache, a

    def forward(self, params, xs) -> np.ndarray:
        return check_finite(self._forward_cache(params, xs)[2], "mlp output")

    def hidden(self, params, xs) -> np.ndarray:
        """Activations feeding the output layer (the last hidden layer)."""
        _, cache, _ = self._forward_cache(params, xs)
        return cache[-1][0]

    def backward(self, params, xs, cot) -> tuple[np.ndarray, np.ndarray]:
        """Return (parameter gradient, input gradient) of ``sum_i <cot_i, f(x_i)>``."""
        layers, cache, out = self._forward_cache(params, xs)
        cot = np.asarray(cot, dtype=np.float64)
        if cot.shape != out.shape:
            raise DimensionError(f"cotangent shape {cot.shape} does not match output {out.shape}")
        n = out.shape[0]
        grads = []
        g = cot
        for (W, _b), (a_in, z, a_out, act) in zip(reversed(layers), reversed(cache)):
            gz = g * _act_grad(act, z, a_out)
            grads.append((gz.T @ a_in, gz.sum(axis=0)))
            g = gz @ W
            add_flops("backward", 4 * n * W.size)
        flat = []
        for gW, gb in reversed(grads):
            flat.append(gW.ravel())
            flat.append(gb)
        return np.concatenate(flat), g

    def vjp_params(self, params, xs, cot) -> np.ndarray:
        return self.backward(params, xs, cot)[0]

    def vjp_inputs(self, params, xs, cot) -> np.ndarray:
        return self.backward(params, xs, cot)[1]

    def header(self) -> str:
        widths = ",".join(str(w) for w in self.spec.widths)
        acts = ",".join(self.spec.activations) or "-"
        return f"FUNCBO-CKPT v1 mlp {widths} {acts}"


# ---------------------------------------------------------------------------
# feature maps for LinearModel

FeatureMap = Callable[[np.ndarray], np.ndarray]


def raw_features(xs: np.ndarray) -> np.ndarray:
    return np.asarray(xs, dtype=np.float64)


def with_bias(fmap: FeatureMap) -> FeatureMap:
    def feats(xs):
        phi = fmap(xs)
        return np.hstack([phi, np.ones((phi.shape[0], 1))])

    return feats


def poly_features(degree: int) -> FeatureMap:
    """All monomials of total degree <= ``degree``, constant first."""
    from itertools import combinations_with_replacement

    def feats(xs):
        xs = np.asarray(xs, dtype=np.float64)
        n, d = xs.shape
        cols = [np.ones(n)]
        for deg in range(1, degree + 1):
            for idx in combinations_with_replacement(range(d), deg):
                cols.append(np.prod(xs[:, idx], axis=1))
        return np.column_stack(cols)

    return feats


def mlp_hidden_features(net: Mlp, params: np.ndarray) -> FeatureMap:
    """Frozen last hidden layer of an MLP, with a constant column for the bias."""
    frozen = np.array(params, dtype=np.float64, copy=True)
    return with_bias(lambda xs: net.hidden(frozen, xs))


FEATURES: dict[str, Callable[..., FeatureMap]] = {
    "raw": lambda: raw_features,
    "raw_bias": lambda: with_bias(raw_features),
    "poly": poly_features,
}


@dataclass
class LinearModel:
    """``h(x) = W phi(x)`` with a fixed feature map ``phi``; parameters are ``W.ravel()``."""

    features: FeatureMap
    d_features: int
    d_out: int = 1
    name: str = "custom"
    kind: str = field(default="linear", init=False)

    @property
    def n_params(self) -> int:
        return self.d_out * self.d_features

    def init(self, rng: np.random.Generator | None = None) -> np.ndarray:
        return np.zeros(self.n_params)

    def phi(self, xs) -> np.ndarray:
        phi = np.asarray(self.features(xs), dtype=np.float64)
        if phi.ndim != 2 or phi.shape[1] != self.d_features:
            raise DimensionError(f"feature map returned shape {phi.shape}, expected (n, {self.d_features})")
        return phi

    def weights(self, params) -> np.ndarray:
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (self.n_params,):
            raise DimensionError(f"expected {self.n_params} parameters, got shape {params.shape}")
        return params.reshape(self.d_out, self.d_features)

    def forward(self, params, xs, phi=None) -> np.ndarray:
        phi = self.phi(xs) if phi is None else phi
        add_flops("forward", 2 * phi.shape[0] * self.n_params)
        return phi @ self.weights(params).T

    def vjp_params(self, params, xs, cot, phi=None) -> np.ndarray:
        phi = self.phi(xs) if phi is None else phi
        cot = np.asarray(cot, dtype=np.float64)
        if cot.shape != (phi.shape[0], self.d_out):
            raise DimensionError(f"cotangent shape {cot.shape} does not match output ({phi.shape[0]}, {self.d_out})")
        add_flops("backward", 2 * phi.shape[0] * self.n_params)
        return (cot.T @ phi).ravel()

    def header(self) -> str:
        return f"FUNCBO-CKPT v1 linear {self.d_features},{self.d_out} {self.name}"


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model, params) -> None:
    params = check_finite(np.asarray(params, dtype=np.float64), "checkpoint params")
    lines = [model.header()] + [repr(float(p)) for p in params]
    Path(path).write_text("\n".join(lines) + "\n")


def load_checkpoint(path) -> tuple[dict, np.ndarray]:
    """Read a checkpoint; returns (header fields, params)."""
    text = Path(path).read_text().splitlines()
    head = text[0].split()
    if head[:2] != ["FUNCBO-CKPT", "v1"] or len(head) != 5:
        raise ValueError(f"not a FUNCBO-CKPT v1 file: {text[0]!r}")
    info = {
        "kind": head[2],
        "widths": tuple(int(w) for w in head[3].split(",")),
        "activations": () if head[4] == "-" else tuple(head[4].split(",")),
    }
    params = np.array([float(s) for s in text[1:] if s.strip()])
    return info, params


def mlp_from_checkpoint(path) -> tuple[Mlp, np.ndarray]:
    info, params = load_checkpoint(path)
    if info["kind"] != "mlp":
        raise ValueError(f"checkpoint holds a {info['kind']} model")
    net = Mlp(MlpSpec(info["widths"], info["activations"]))
    if params.shape[0] != net.n_params:
        raise DimensionError("checkpoint parameter count does not match header")
    return net, params


def flatten(layers: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in layers])


# ---------------------------------------------------------------------------
# outer (structural) models f_w(t); the outer parameter w is their flat parameter vector


class LinearOuter:
    """``f_w(t) = w . psi(t)`` for a fixed treatment feature map ``psi`` (scalar output)."""

    def __init__(self, features: FeatureMap, d_features: int):
        self.features = features
        self.n_params = d_features
        self.d_out = 1
        self._cache_key = None
        self._cache_val = None

    def psi(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        # feature maps can be costly; reuse the last evaluation for the same array object
        if self._cache_key is not None and self._cache_key[0] is t and self._cache_key[1] == t.shape:
            return self._cache_val
        val = np.asarray(self.features(t), dtype=np.float64)
        self._cache_key = (t, t.shape)
        self._cache_val = val
        return val

    def init(self, rng=None) -> np.ndarray:
        return np.zeros(self.n_params)

    def value(self, omega, t) -> np.ndarray:
        psi = self.psi(t)
        add_flops("forward", 2 * psi.size)
        return (psi @ np.asarray(omega, dtype=np.float64))[:, None]

    def vjp(self, omega, t, cot) -> np.ndarray:
        psi = self.psi(t)
        add_flops("backward", 2 * psi.size)
        return psi.T @ np.asarray(cot, dtype=np.float64)[:, 0]


class MlpOuter:
    """``f_w(t) = MLP_w(t)``."""

    def __init__(self, spec: MlpSpec):
        self.net = Mlp(spec)
        self.n_params = self.net.n_params
        self.d_out = spec.d_out

    def init(self, rng) -> np.ndarray:
        return self.net.init(rng)

    def value(self, omega, t) -> np.ndarray:
        return self.net.forward(omega, t)

    def vjp(self, omega, t, cot) -> np.ndarray:
        return self.net.vjp_params(omega, t, cot)
