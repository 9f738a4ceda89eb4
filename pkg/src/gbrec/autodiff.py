"""Numerical kernel with hand-written reverse-mode gradients.

The model graph is fixed, so there is no tape: every primitive comes as a
forward function plus a ``*_backward`` function that maps the upstream
gradient to gradients of the inputs. Composite models call the backward
functions in reverse order themselves.

Everything runs in float64.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping

import numpy as np

from gbrec.graph import NormalizedAdjacency

#: Fusion denominators below this magnitude fall back to equal weights.
FUSE_GUARD = 1e-12
#: Ground-truth probabilities are clamped here before taking the log.
PROB_FLOOR = 1e-12


def _check_same(a: np.ndarray, b: np.ndarray, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# sparse propagation


def sparse_propagate(adj: NormalizedAdjacency, X: np.ndarray) -> np.ndarray:
    """One message-passing layer ``Y = A X``."""
    if adj.n_nodes != X.shape[0]:
        raise ValueError(f"sparse_propagate: adjacency has {adj.n_nodes} nodes, X has {X.shape[0]} rows")
    return adj.matrix @ X


def sparse_propagate_backward(adj: NormalizedAdjacency, grad: np.ndarray) -> np.ndarray:
    # A is symmetric, but transpose anyway so the contract holds for any A.
    return adj.matrix.T @ grad


def light_conv(adj: NormalizedAdjacency, X: np.ndarray, n_layers: int) -> np.ndarray:
    """Layer sum ``sum_{k=0..K} A^k X`` (layer 0 included, no averaging)."""
    if n_layers < 0:
        raise ValueError("n_layers must be >= 0")
    out = X.copy()
    h = X
    for _ in range(n_layers):
        h = sparse_propagate(adj, h)
        out += h
    return out


def light_conv_backward(adj: NormalizedAdjacency, grad: np.ndarray, n_layers: int) -> np.ndarray:
    # The map is linear in X, so the backward pass never needs forward values.
    out = grad.copy()
    g = grad
    for _ in range(n_layers):
        g = sparse_propagate_backward(adj, g)
        out += g
    return out


# ---------------------------------------------------------------------------
# dense ops


def matmul(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    if A.shape[-1] != B.shape[0]:
        raise ValueError(f"matmul: inner dimensions differ {A.shape} @ {B.shape}")
    return A @ B


def matmul_backward(A: np.ndarray, B: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad @ B.T, A.T @ grad


def concat(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Concatenate along the last axis (``[a || b]``)."""
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(f"concat: leading shapes differ {a.shape} vs {b.shape}")
    return np.concatenate([a, b], axis=-1)


def concat_backward(split: int, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad[..., :split], grad[..., split:]


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Takes the forward *output* ``y``."""
    return grad * y * (1.0 - y)


def dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise dot product over the last axis."""
    _check_same(a, b, "dot")
    return np.einsum("...d,...d->...", a, b)


def dot_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(grad)[..., None]
    return g * b, g * a


def scale(x: np.ndarray, c: float) -> np.ndarray:
    return c * x


def scale_backward(c: float, grad: np.ndarray) -> np.ndarray:
    return c * grad


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    _check_same(a, b, "add")
    return a + b


def add_backward(grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return grad, grad


def scatter_rows(n_rows: int, index: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Backward of ``X[index]``: accumulate ``grad`` rows into an ``n_rows`` buffer."""
    out = np.zeros((n_rows, grad.shape[-1]))
    np.add.at(out, index.reshape(-1), grad.reshape(-1, grad.shape[-1]))
    return out


# ---------------------------------------------------------------------------
# view fusion


@dataclass
class FuseCache:
    w: np.ndarray
    e1: np.ndarray
    e2: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    denom: np.ndarray
    guarded: np.ndarray
    a1: np.ndarray
    a2: np.ndarray


def fuse_rows(w: np.ndarray, e1: np.ndarray, e2: np.ndarray) -> tuple[np.ndarray, FuseCache]:
    """Adaptive two-view fusion ``a1 e1 + a2 e2`` with ``a_k = w.e_k / (w.e1 + w.e2)``.

    Works on single vectors or row-stacked matrices. Rows whose denominator
    is smaller than :data:`FUSE_GUARD` in magnitude use ``a1 = a2 = 0.5``.
    """
    _check_same(e1, e2, "fuse")
    s1 = e1 @ w
    s2 = e2 @ w
    denom = s1 + s2
    guarded = np.abs(denom) < FUSE_GUARD
    safe = np.where(guarded, 1.0, denom)
    a1 = np.where(guarded, 0.5, s1 / safe)
    a2 = np.where(guarded, 0.5, 1.0 - a1)
    out = a1[..., None] * e1 + a2[..., None] * e2
    return out, FuseCache(w, e1, e2, s1, s2, safe, guarded, a1, a2)


def fuse_rows_backward(cache: FuseCache, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = cache
    g_e1 = c.a1[..., None] * grad
    g_e2 = c.a2[..., None] * grad
    g_a1 = dot(grad, c.e1)
    g_a2 = dot(grad, c.e2)
    d2 = c.denom * c.denom
    live = ~c.guarded
    g_s1 = np.where(live, c.s2 * (g_a1 - g_a2) / d2, 0.0)
    g_s2 = np.where(live, c.s1 * (g_a2 - g_a1) / d2, 0.0)
    g_e1 = g_e1 + g_s1[..., None] * c.w
    g_e2 = g_e2 + g_s2[..., None] * c.w
    g_w = np.tensordot(g_s1, c.e1, axes=g_s1.ndim) + np.tensordot(g_s2, c.e2, axes=g_s2.ndim)
    return g_w, g_e1, g_e2


# ---------------------------------------------------------------------------
# masked softmax and cosine


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to ``mask`` (padding gets probability 0)."""
    z = np.where(mask, logits, -np.inf)
    zmax = z.max(axis=-1, keepdims=True)
    zmax = np.where(np.isfinite(zmax), zmax, 0.0)
    ex = np.where(mask, np.exp(z - zmax), 0.0)
    tot = ex.sum(axis=-1, keepdims=True)
    return ex / np.where(tot > 0, tot, 1.0)


def masked_softmax_backward(p: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Takes the forward *output* ``p``; masked entries have ``p == 0`` and get no gradient."""
    return p * (grad - (p * grad).sum(axis=-1, keepdims=True))


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise cosine similarity and a validity mask (False where a norm is zero)."""
    _check_same(a, b, "cosine")
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    valid = (na > 0) & (nb > 0)
    denom = np.where(valid, na * nb, 1.0)
    return np.where(valid, dot(a, b) / denom, 0.0), valid


def cosine_rows_backward(a: np.ndarray, b: np.ndarray, grad: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    valid = (na > 0) & (nb > 0)
    na = np.where(valid, na, 1.0)[..., None]
    nb = np.where(valid, nb, 1.0)[..., None]
    cos = (dot(a, b)[..., None]) / (na * nb)
    g = np.where(valid, grad, 0.0)[..., None]
    ga = g * (b / (na * nb) - cos * a / (na * na))
    gb = g * (a / (na * nb) - cos * b / (nb * nb))
    return ga, gb


# ---------------------------------------------------------------------------
# parameters and optimizer


class ParamStore:
    """Named float64 parameter arrays with paired gradient buffers."""

    def __init__(self, params: Mapping[str, np.ndarray] | None = None):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            self.add(name, value)

    def add(self, name: str, value: np.ndarray) -> None:
        value = np.array(value, dtype=np.float64)
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name!r} has non-finite entries")
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def accumulate(self, grads: Mapping[str, np.ndarray]) -> None:
        for name, g in grads.items():
            if g.shape != self.params[name].shape:
                raise ValueError(f"gradient for {name!r} has shape {g.shape}, expected {self.params[name].shape}")
            self.grads[name] += g

    def squared_norm(self) -> float:
        return float(sum(np.sum(p * p) for p in self.params.values()))

    def copy(self) -> "ParamStore":
        return ParamStore({k: v.copy() for k, v in self.params.items()})

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params.items()}


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr: float, weight_decay: float = 0.0) -> None:
    """One Adam update with coupled L2: ``2 * weight_decay * theta`` is added to each gradient.

    Gradients are zeroed afterwards. A non-finite gradient aborts the step
    before any parameter is touched.
    """
    for name, g in store.grads.items():
        if not np.all(np.isfinite(g)):
            bad = np.argwhere(~np.isfinite(g))[0]
            raise FloatingPointError(f"non-finite gradient for {name!r} at index {tuple(bad)}")
    state.step += 1
    bc1 = 1.0 - state.beta1**state.step
    bc2 = 1.0 - state.beta2**state.step
    for name, theta in store.params.items():
        g = store.grads[name]
        if weight_decay:
            g = g + 2.0 * weight_decay * theta
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    store.zero_grad()


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    param: str
    checked: int
    max_error: float
    worst_index: tuple[int, ...]
    worst_analytic: float
    worst_numeric: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{self.param}: {status} max_err={self.max_error:.3e} over {self.checked} coords "
            f"(worst {self.worst_index}: analytic={self.worst_analytic:.6e} numeric={self.worst_numeric:.6e})"
        )


def finite_difference_check(
    f: Callable[[ParamStore], tuple[float, Mapping[str, np.ndarray]]],
    store: ParamStore,
    param: str,
    tolerance: float = 1e-4,
    step: float = 1e-6,
    n_samples: int | None = 30,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients from ``f`` against central differences.

    ``f(store)`` must return ``(value, grads)``. The error on a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``. With ``n_samples=None``
    every coordinate is checked.
    """
    value, grads = f(store)
    if not math.isfinite(value):
        raise FloatingPointError(f"objective is non-finite ({value})")
    analytic = np.asarray(grads[param], dtype=np.float64)
    theta = store.params[param]
    size = theta.size
    if n_samples is None or n_samples >= size:
        coords = np.arange(size)
    else:
        rng = rng or np.random.default_rng(0)
        coords = np.sort(rng.choice(size, size=n_samples, replace=False))
    flat = theta.reshape(-1)
    worst = (-1.0, 0, 0.0, 0.0)
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        fp = f(store)[0]
        flat[c] = orig - step
        fm = f(store)[0]
        flat[c] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise FloatingPointError(f"objective became non-finite perturbing {param}[{c}]")
        numeric = (fp - fm) / (2.0 * step)
        a = float(analytic.reshape(-1)[c])
        err = abs(a - numeric) / max(1.0, abs(numeric))
        if err > worst[0]:
            worst = (err, int(c), a, numeric)
    idx = tuple(int(i) for i in np.unravel_index(worst[1], theta.shape))
    return GradCheckReport(param, len(coords), max(worst[0], 0.0), idx, worst[2], worst[3], tolerance)
