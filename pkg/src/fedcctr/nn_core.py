"""Dense float64 layers with hand-derived backward passes.

Every layer follows the same small protocol:

* ``params`` / ``grads`` are dicts of arrays with identical shapes.  They may
  be views into a larger flat buffer (see :mod:`fedcctr.idst_cl`), so layers
  only ever update them in place.
* ``forward(x, ...)`` returns ``(out, cache)`` and never mutates state.
* ``backward(cache, dout)`` *accumulates* parameter gradients into ``grads``
  and returns the gradient w.r.t. the layer input(s).

Arrays may carry arbitrary leading batch dimensions; the last axis is the
feature axis and (for sequence layers) the second-to-last is the position axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, Optional, Tuple

import numpy as np

Array = np.ndarray

LN_EPS = 1e-5
DEGENERATE_NORM = 1e-12


class DimensionError(ValueError):
    """Operand shapes do not chain."""


class ConfigError(ValueError):
    """Invalid layer or model configuration."""


class EmptySequenceError(ValueError):
    """A pooled sequence has no valid positions."""


class DegenerateVectorError(ValueError):
    """Cosine similarity requested for a (near) zero vector."""


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> Array:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape or (fan_in, fan_out))


# ---------------------------------------------------------------------------
# Functional forms
# ---------------------------------------------------------------------------

def softmax(scores: Array, axis: int = -1) -> Array:
    shifted = scores - np.max(scores, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _masked_scores(scores: Array, key_mask: Optional[Array]) -> Array:
    if key_mask is None:
        return scores
    # key_mask: (..., Lk) -> broadcast over the query axis
    return np.where(key_mask[..., None, :], scores, -np.inf)


def attention(Q: Array, K: Array, V: Array, key_mask: Optional[Array] = None) -> Array:
    """Scaled dot-product attention ``softmax(Q K^T / sqrt(d_k)) V``.

    ``key_mask`` (optional, boolean, shape ``(..., Lk)``) marks valid keys;
    invalid keys receive zero attention weight.
    """
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.shape[-1] != K.shape[-1]:
        raise DimensionError(f"Q and K need the same width, got {Q.shape[-1]} and {K.shape[-1]}")
    if K.shape[-2] != V.shape[-2]:
        raise DimensionError(f"K and V need the same row count, got {K.shape[-2]} and {V.shape[-2]}")
    d_k = Q.shape[-1]
    scores = Q @ np.swapaxes(K, -1, -2) / math.sqrt(d_k)
    weights = softmax(_masked_scores(scores, key_mask))
    return weights @ V


def ffn(S: Array, W1: Array, b1: Array, W2: Array, b2: Array) -> Array:
    """Position-wise ``ReLU(S W1 + b1) W2 + b2``."""
    if S.shape[-1] != W1.shape[0] or W1.shape[1] != W2.shape[0]:
        raise DimensionError(f"ffn shapes do not chain: {S.shape}, {W1.shape}, {W2.shape}")
    return np.maximum(S @ W1 + b1, 0.0) @ W2 + b2


def residual_layer_norm(x: Array, sublayer_out: Array, gain: Array, bias: Array,
                        eps: float = LN_EPS) -> Array:
    """Per-row layer normalization of ``x + sublayer_out`` followed by gain/bias."""
    if x.shape != sublayer_out.shape:
        raise DimensionError(f"residual shapes differ: {x.shape} vs {sublayer_out.shape}")
    z = x + sublayer_out
    mu = z.mean(axis=-1, keepdims=True)
    var = z.var(axis=-1, keepdims=True)
    return (z - mu) / np.sqrt(var + eps) * gain + bias


def mean_pool(F: Array, mask: Optional[Array] = None) -> Array:
    """Column-wise mean over valid rows (all rows when ``mask`` is None)."""
    F = np.asarray(F, dtype=np.float64)
    if mask is None:
        mask = np.ones(F.shape[:-1], dtype=bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise EmptySequenceError("cannot pool a sequence with no valid positions")
    return (F * mask[..., None]).sum(axis=-2) / counts[..., None]


def cosine_sim(a: Array, b: Array) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na < DEGENERATE_NORM or nb < DEGENERATE_NORM:
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    return float(a @ b / (na * nb))


def cosine_sim_rows(a: Array, b: Array) -> Tuple[Array, Tuple[Array, ...]]:
    """Row-wise cosine similarity for ``(N, d)`` inputs, plus a backward cache."""
    na = np.linalg.norm(a, axis=-1)
    nb = np.linalg.norm(b, axis=-1)
    if np.any(na < DEGENERATE_NORM) or np.any(nb < DEGENERATE_NORM):
        raise DegenerateVectorError("cosine similarity of a near-zero vector")
    sim = np.sum(a * b, axis=-1) / (na * nb)
    return sim, (a, b, na, nb, sim)


def cosine_sim_rows_backward(cache, dsim: Array) -> Tuple[Array, Array]:
    a, b, na, nb, sim = cache
    d = dsim[..., None]
    da = d * (b / (na * nb)[..., None] - sim[..., None] * a / (na ** 2)[..., None])
    db = d * (a / (na * nb)[..., None] - sim[..., None] * b / (nb ** 2)[..., None])
    return da, db


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Layer:
    """Base class: owns named parameter arrays and same-shaped gradient arrays."""

    def __init__(self) -> None:
        self.params: Dict[str, Array] = {}
        self.grads: Dict[str, Array] = {}

    def param_shapes(self) -> Dict[str, Tuple[int, ...]]:
        return {k: v.shape for k, v in self.params.items()}

    def bind(self, params: Dict[str, Array], grads: Dict[str, Array]) -> None:
        """Point the layer at externally owned storage (e.g. flat-buffer views)."""
        for name, shape in self.param_shapes().items():
            if params[name].shape != shape or grads[name].shape != shape:
                raise DimensionError(f"bound array for {name!r} has wrong shape")
        self.params = params
        self.grads = grads

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def _alloc(self, **arrays: Array) -> None:
        for name, value in arrays.items():
            self.params[name] = np.asarray(value, dtype=np.float64)
            self.grads[name] = np.zeros_like(self.params[name])


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.in_dim, self.out_dim, self.has_bias = in_dim, out_dim, bias
        self._alloc(W=xavier_uniform(rng, in_dim, out_dim))
        if bias:
            self._alloc(b=np.zeros(out_dim))

    def forward(self, x: Array):
        if x.shape[-1] != self.in_dim:
            raise DimensionError(f"Linear expects width {self.in_dim}, got {x.shape[-1]}")
        out = x @ self.params["W"]
        if self.has_bias:
            out = out + self.params["b"]
        return out, x

    def backward(self, cache: Array, dout: Array) -> Array:
        x = cache
        x2 = x.reshape(-1, self.in_dim)
        d2 = dout.reshape(-1, self.out_dim)
        self.grads["W"] += x2.T @ d2
        if self.has_bias:
            self.grads["b"] += d2.sum(axis=0)
        return dout @ self.params["W"].T


class ReLU(Layer):
    def forward(self, x: Array):
        return np.maximum(x, 0.0), x > 0

    def backward(self, cache: Array, dout: Array) -> Array:
        return dout * cache


class Dropout(Layer):
    """Inverted dropout; identity when ``rate == 0`` or no generator is given."""

    def __init__(self, rate: float = 0.0) -> None:
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x: Array, rng: Optional[np.random.Generator] = None):
        if self.rate == 0.0 or rng is None:
            return x, None
        keep = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * keep, keep

    def backward(self, cache, dout: Array) -> Array:
        return dout if cache is None else dout * cache


class MultiHeadAttention(Layer):
    """Self-attention over head-split projections, concatenated and mixed by ``W_O``."""

    def __init__(self, dim: int, heads: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        if heads < 1 or dim % heads != 0:
            raise ConfigError(f"model dim {dim} is not divisible by {heads} heads")
        rng = rng or np.random.default_rng(0)
        self.dim, self.heads, self.head_dim = dim, heads, dim // heads
        self._alloc(
            W_Q=xavier_uniform(rng, dim, dim),
            W_K=xavier_uniform(rng, dim, dim),
            W_V=xavier_uniform(rng, dim, dim),
            W_O=xavier_uniform(rng, dim, dim),
        )

    def _split(self, x: Array) -> Array:
        # (..., L, d) -> (..., H, L, dh)
        lead = x.shape[:-2]
        L = x.shape[-2]
        x = x.reshape(*lead, L, self.heads, self.head_dim)
        return np.swapaxes(x, -2, -3)

    def _merge(self, x: Array) -> Array:
        x = np.swapaxes(x, -2, -3)
        return x.reshape(*x.shape[:-2], self.dim)

    def forward(self, E: Array, mask: Optional[Array] = None):
        if E.shape[-1] != self.dim:
            raise DimensionError(f"attention expects width {self.dim}, got {E.shape[-1]}")
        p = self.params
        q = self._split(E @ p["W_Q"])
        k = self._split(E @ p["W_K"])
        v = self._split(E @ p["W_V"])
        scale = 1.0 / math.sqrt(self.head_dim)
        scores = q @ np.swapaxes(k, -1, -2) * scale
        key_mask = None if mask is None else mask[..., None, :]  # broadcast over heads
        P = softmax(_masked_scores(scores, key_mask))
        concat = self._merge(P @ v)
        out = concat @ p["W_O"]
        return out, (E, q, k, v, P, concat)

    def backward(self, cache, dout: Array) -> Array:
        E, q, k, v, P, concat = cache
        p, g = self.params, self.grads
        d = self.dim
        g["W_O"] += concat.reshape(-1, d).T @ dout.reshape(-1, d)
        dconcat = self._split(dout @ p["W_O"].T)
        dP = dconcat @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(P, -1, -2) @ dconcat
        dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True))
        scale = 1.0 / math.sqrt(self.head_dim)
        dq = dS @ k * scale
        dk = np.swapaxes(dS, -1, -2) @ q * scale
        dq, dk, dv = self._merge(dq), self._merge(dk), self._merge(dv)
        E2 = E.reshape(-1, d)
        g["W_Q"] += E2.T @ dq.reshape(-1, d)
        g["W_K"] += E2.T @ dk.reshape(-1, d)
        g["W_V"] += E2.T @ dv.reshape(-1, d)
        return dq @ p["W_Q"].T + dk @ p["W_K"].T + dv @ p["W_V"].T


def multi_head_attention(E: Array, heads: int, W_Q: Array, W_K: Array, W_V: Array,
                         W_O: Array, mask: Optional[Array] = None) -> Array:
    """Functional wrapper around :class:`MultiHeadAttention` with explicit weights."""
    layer = MultiHeadAttention(E.shape[-1], heads)
    layer.params = {"W_Q": W_Q, "W_K": W_K, "W_V": W_V, "W_O": W_O}
    return layer.forward(E, mask)[0]


class FeedForward(Layer):
    def __init__(self, dim: int, hidden: int, rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim, self.hidden = dim, hidden
        self._alloc(W1=xavier_uniform(rng, dim, hidden), b1=np.zeros(hidden),
                    W2=xavier_uniform(rng, hidden, dim), b2=np.zeros(dim))

    def forward(self, S: Array):
        p = self.params
        pre = S @ p["W1"] + p["b1"]
        act = np.maximum(pre, 0.0)
        return act @ p["W2"] + p["b2"], (S, pre, act)

    def backward(self, cache, dout: Array) -> Array:
        S, pre, act = cache
        p, g = self.params, self.grads
        g["W2"] += act.reshape(-1, self.hidden).T @ dout.reshape(-1, self.dim)
        g["b2"] += dout.reshape(-1, self.dim).sum(axis=0)
        dpre = (dout @ p["W2"].T) * (pre > 0)
        g["W1"] += S.reshape(-1, self.dim).T @ dpre.reshape(-1, self.hidden)
        g["b1"] += dpre.reshape(-1, self.hidden).sum(axis=0)
        return dpre @ p["W1"].T


class ResidualLayerNorm(Layer):
    """``LayerNorm(x + sublayer_out)``; backward returns one gradient shared by both inputs."""

    def __init__(self, dim: int, eps: float = LN_EPS) -> None:
        super().__init__()
        self.dim, self.eps = dim, eps
        self._alloc(gain=np.ones(dim), bias=np.zeros(dim))

    def forward(self, x: Array, sublayer_out: Array):
        if x.shape != sublayer_out.shape:
            raise DimensionError(f"residual shapes differ: {x.shape} vs {sublayer_out.shape}")
        z = x + sublayer_out
        mu = z.mean(axis=-1, keepdims=True)
        inv = 1.0 / np.sqrt(z.var(axis=-1, keepdims=True) + self.eps)
        xhat = (z - mu) * inv
        return xhat * self.params["gain"] + self.params["bias"], (xhat, inv)

    def backward(self, cache, dout: Array) -> Array:
        xhat, inv = cache
        g = self.grads
        g["gain"] += (dout * xhat).reshape(-1, self.dim).sum(axis=0)
        g["bias"] += dout.reshape(-1, self.dim).sum(axis=0)
        dxhat = dout * self.params["gain"]
        n = self.dim
        return inv / n * (n * dxhat - dxhat.sum(axis=-1, keepdims=True)
                          - xhat * np.sum(dxhat * xhat, axis=-1, keepdims=True))


class MeanPool(Layer):
    def forward(self, F: Array, mask: Optional[Array] = None):
        if mask is None:
            mask = np.ones(F.shape[:-1], dtype=bool)
        counts = mask.sum(axis=-1).astype(np.float64)
        if np.any(counts == 0):
            raise EmptySequenceError("cannot pool a sequence with no valid positions")
        weights = mask / counts[..., None]
        return np.einsum("...l,...ld->...d", weights, F), weights

    def backward(self, cache, dout: Array) -> Array:
        weights = cache
        return weights[..., None] * dout[..., None, :]


class TransformerEncoder(Layer):
    """One encoder block: MHA -> residual+LN -> FFN -> residual+LN -> masked mean pool.

    Dropout (when enabled) is applied to each sublayer output before the
    residual connection.
    """

    def __init__(self, dim: int, heads: int, ffn_dim: int, dropout: float = 0.0,
                 rng: Optional[np.random.Generator] = None) -> None:
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.dim = dim
        self.mha = MultiHeadAttention(dim, heads, rng)
        self.ln1 = ResidualLayerNorm(dim)
        self.ffn = FeedForward(dim, ffn_dim, rng)
        self.ln2 = ResidualLayerNorm(dim)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)
        self.pool = MeanPool()
        self._children = {"mha": self.mha, "ln1": self.ln1, "ffn": self.ffn, "ln2": self.ln2}
        self._sync()

    def _sync(self) -> None:
        self.params = {f"{c}.{k}": v for c, layer in self._children.items() for k, v in layer.params.items()}
        self.grads = {f"{c}.{k}": v for c, layer in self._children.items() for k, v in layer.grads.items()}

    def bind(self, params: Dict[str, Array], grads: Dict[str, Array]) -> None:
        for c, layer in self._children.items():
            layer.bind({k: params[f"{c}.{k}"] for k in layer.params},
                       {k: grads[f"{c}.{k}"] for k in layer.grads})
        self._sync()

    def forward(self, E: Array, mask: Optional[Array] = None,
                rng: Optional[np.random.Generator] = None):
        S, c_mha = self.mha.forward(E, mask)
        S, c_d1 = self.drop1.forward(S, rng)
        S1, c_ln1 = self.ln1.forward(E, S)
        F, c_ffn = self.ffn.forward(S1)
        F, c_d2 = self.drop2.forward(F, rng)
        F1, c_ln2 = self.ln2.forward(S1, F)
        h, c_pool = self.pool.forward(F1, mask)
        return h, (c_mha, c_d1, c_ln1, c_ffn, c_d2, c_ln2, c_pool)

    def backward(self, cache, dh: Array) -> Array:
        c_mha, c_d1, c_ln1, c_ffn, c_d2, c_ln2, c_pool = cache
        dF1 = self.pool.backward(c_pool, dh)
        dz2 = self.ln2.backward(c_ln2, dF1)
        dS1 = dz2 + self.ffn.backward(c_ffn, self.drop2.backward(c_d2, dz2))
        dz1 = self.ln1.backward(c_ln1, dS1)
        return dz1 + self.mha.backward(c_mha, self.drop1.backward(c_d1, dz1))


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: Dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: Array, numeric: Array, floor: float = 1e-6) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numerical_gradient(f: Callable[[], float], x: Array, step: float = 1e-5) -> Array:
    """Central differences of the scalar ``f()`` w.r.t. every entry of ``x`` (mutated in place, restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def grad_check(layer: Layer, inputs: Any, tolerance: float = 1e-4, step: float = 1e-5,
               seed: int = 0, **forward_kwargs: Any) -> GradCheckReport:
    """Compare a layer's analytic gradients with central finite differences.

    ``inputs`` is one array or a tuple of arrays passed positionally to
    ``forward``.  The scalar objective is ``sum(out * R)`` for a fixed random
    ``R``, so ``R`` is the upstream gradient fed to ``backward``.
    """
    xs = tuple(np.array(a, dtype=np.float64) for a in (inputs if isinstance(inputs, tuple) else (inputs,)))
    out, _ = layer.forward(*xs, **forward_kwargs)
    R = np.random.default_rng(seed).standard_normal(out.shape)

    def objective() -> float:
        return float(np.sum(layer.forward(*xs, **forward_kwargs)[0] * R))

    layer.zero_grad()
    _, cache = layer.forward(*xs, **forward_kwargs)
    dxs = layer.backward(cache, R)
    if not isinstance(dxs, tuple):
        dxs = (dxs,) * len(xs) if len(xs) > 1 else (dxs,)

    report = GradCheckReport(max_rel_error=0.0, tolerance=tolerance)
    for name, param in layer.params.items():
        report.errors[name] = relative_error(layer.grads[name].copy(), numerical_gradient(objective, param, step))
    for i, (x, dx) in enumerate(zip(xs, dxs)):
        report.errors[f"input{i}"] = relative_error(dx, numerical_gradient(objective, x, step))
    report.max_rel_error = max(report.errors.values(), default=0.0)
    return report
