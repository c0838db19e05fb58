"""Independent domain-specific transformers with contrastive alignment.

Three single-block encoders (domain A, domain B, mixed M) turn item
sequences into pooled user representations.  Two MLP heads predict click
probability per domain from ``[h_domain, h_M, e_side]``.  Training combines
per-domain BCE with an intra-domain alignment hinge (augmented vs original
sequence) and a cross-domain contrastive term.

All parameters live in one flat float64 vector (:class:`ModelParams`) so the
federated runtime can clip, perturb and average them as plain arrays.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .nn_core import (
    ConfigError,
    DimensionError,
    EmptySequenceError,
    Linear,
    TransformerEncoder,
    cosine_sim,
    cosine_sim_rows,
    cosine_sim_rows_backward,
    xavier_uniform,
)

Array = np.ndarray
PROB_CLAMP = 1e-7


class VocabularyError(KeyError):
    pass


@dataclass
class ModelConfig:
    d_id: int = 32
    d_feat: int = 16
    d_pos: int = 16
    d_other: int = 16
    heads: int = 8
    ffn_mult: int = 4
    mlp_widths: Tuple[int, ...] = (512, 256, 128)
    dropout: float = 0.1
    max_len: int = 20
    lambda1: float = 0.3
    lambda2: float = 0.5
    alpha: float = 0.5
    tau: float = 0.1

    @property
    def d_v(self) -> int:
        return self.d_id + self.d_feat + self.d_pos

    def validate(self) -> None:
        if min(self.d_id, self.d_feat, self.d_pos, self.d_other) < 1:
            raise ConfigError("embedding dims must be >= 1")
        if self.heads < 1 or self.d_v % self.heads:
            raise ConfigError(f"d_v={self.d_v} is not divisible by heads={self.heads}")
        if not 0.0 <= self.lambda1 <= 1.0 or not 0.0 <= self.lambda2 <= 1.0:
            raise ConfigError("lambda1 and lambda2 must be in [0, 1]")
        if not self.tau > 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")
        if self.max_len < 2:
            raise ConfigError("max_len must be >= 2")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")
        if not self.mlp_widths or min(self.mlp_widths) < 1:
            raise ConfigError("mlp_widths must be non-empty positive ints")


@dataclass(frozen=True)
class Vocab:
    n_items_a: int
    n_items_b: int
    n_feat_a: int
    n_feat_b: int
    n_side: int


@dataclass
class ItemFeatures:
    """Per-item averaging weights over feature-tag rows, one entry per domain."""

    index: Dict[str, Array]   # domain -> (n_items, F) int
    weight: Dict[str, Array]  # domain -> (n_items, F) float, rows sum to 1

    @classmethod
    def from_lists(cls, per_domain: Dict[str, List[List[int]]]) -> "ItemFeatures":
        index, weight = {}, {}
        for dom, lists in per_domain.items():
            width = max(1, max((len(x) for x in lists), default=1))
            idx = np.zeros((len(lists), width), dtype=np.int64)
            w = np.zeros((len(lists), width))
            for i, feats in enumerate(lists):
                if feats:
                    idx[i, :len(feats)] = feats
                    w[i, :len(feats)] = 1.0 / len(feats)
            index[dom], weight[dom] = idx, w
        return cls(index, weight)

    @classmethod
    def unknown_only(cls, vocab: Vocab) -> "ItemFeatures":
        """Every item maps to feature row 0 (the unknown tag)."""
        return cls.from_lists({"A": [[0]] * vocab.n_items_a, "B": [[0]] * vocab.n_items_b})


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ModelParams:
    """Named views into one contiguous float64 vector."""

    def __init__(self, shapes: "OrderedDict[str, Tuple[int, ...]]", flat: Optional[Array] = None) -> None:
        self.shapes = OrderedDict(shapes)
        size = sum(int(np.prod(s)) for s in self.shapes.values())
        if flat is None:
            flat = np.zeros(size)
        flat = np.ascontiguousarray(flat, dtype=np.float64)
        if flat.shape != (size,):
            raise DimensionError(f"flat vector has length {flat.size}, expected {size}")
        self.flat = flat
        self.views: Dict[str, Array] = {}
        offset = 0
        for name, shape in self.shapes.items():
            n = int(np.prod(shape))
            self.views[name] = flat[offset:offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> Array:
        return self.views[name]

    def __len__(self) -> int:
        return self.flat.size

    def flatten(self) -> Array:
        return self.flat.copy()

    def unflatten(self, flat: Array) -> "ModelParams":
        return ModelParams(self.shapes, np.array(flat, dtype=np.float64))

    def zeros_like(self) -> "ModelParams":
        return ModelParams(self.shapes)

    def copy(self) -> "ModelParams":
        return ModelParams(self.shapes, self.flat.copy())


# ---------------------------------------------------------------------------
# Batches and outputs
# ---------------------------------------------------------------------------

@dataclass
class ModelBatch:
    """Padded index arrays for ``N`` paired (A, B) training instances.

    ``a_ids``/``b_ids`` hold ``2N`` rows: augmented-history sequences first,
    then original-history sequences; each ends with the target item.
    ``m_ids``/``m_dom`` hold the N augmented mixed sequences (dom 0 = A, 1 = B).
    ``side_idx``/``side_w`` select and average user side-feature rows.
    """

    a_ids: Array
    a_mask: Array
    b_ids: Array
    b_mask: Array
    m_ids: Array
    m_dom: Array
    m_mask: Array
    side_idx: Array
    side_w: Array
    y_a: Array
    y_b: Array

    @property
    def n(self) -> int:
        return self.y_a.shape[0]

    def take(self, rows: Array) -> "ModelBatch":
        rows = np.asarray(rows)
        n = self.n
        both = np.concatenate([rows, rows + n])
        return ModelBatch(self.a_ids[both], self.a_mask[both], self.b_ids[both], self.b_mask[both],
                          self.m_ids[rows], self.m_dom[rows], self.m_mask[rows],
                          self.side_idx[rows], self.side_w[rows], self.y_a[rows], self.y_b[rows])


@dataclass
class DomainRepresentations:
    h_A: Array
    h_B: Array
    h_M: Array
    hp_A: Array
    hp_B: Array


@dataclass
class LossBreakdown:
    bce_a: float
    bce_b: float
    idra: float
    cdrd: float
    lambda1: float
    lambda2: float

    @property
    def idra_term(self) -> float:
        return self.lambda1 * self.idra

    @property
    def cdrd_term(self) -> float:
        return self.lambda2 * self.cdrd

    @property
    def total(self) -> float:
        return loss_total(self.bce_a, self.bce_b, self.idra, self.cdrd, self.lambda1, self.lambda2)


# ---------------------------------------------------------------------------
# Losses (scalar API + vectorized forms with gradients)
# ---------------------------------------------------------------------------

def sigmoid(z: Array) -> Array:
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def loss_idra(reps: Sequence[DomainRepresentations], alpha: float) -> float:
    """Mean over instances of the two-domain hinge ``max(0, alpha - sim(h, h'))``."""
    if not reps:
        raise ValueError("empty batch")
    total = 0.0
    for r in reps:
        total += max(0.0, alpha - cosine_sim(r.h_A, r.hp_A)) + max(0.0, alpha - cosine_sim(r.h_B, r.hp_B))
    return total / len(reps)


def loss_cdrd(reps: Sequence[DomainRepresentations], tau: float) -> float:
    """Cross-domain contrastive loss with the denominator summed over the batch."""
    if not tau > 0:
        raise ConfigError(f"temperature must be > 0, got {tau}")
    if not reps:
        raise ValueError("empty batch")
    h_M = np.stack([r.h_M for r in reps])
    h_A = np.stack([r.h_A for r in reps])
    h_B = np.stack([r.h_B for r in reps])
    return cdrd_forward_backward(h_M, h_A, h_B, tau, grad=False)[0]


def loss_bce(predictions: Sequence[float], labels: Sequence[float]) -> float:
    p = np.clip(np.asarray(predictions, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(labels, dtype=np.float64)
    if p.size == 0:
        raise ValueError("empty batch")
    if p.shape != y.shape:
        raise DimensionError("predictions and labels differ in length")
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def loss_total(l_a: float, l_b: float, l_idra: float, l_cdrd: float, lambda1: float, lambda2: float) -> float:
    return l_a + l_b + lambda1 * l_idra + lambda2 * l_cdrd


def _logsumexp(x: Array, axis: int = -1) -> Array:
    m = np.max(x, axis=axis, keepdims=True)
    return (m + np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True))).squeeze(axis)


def idra_forward_backward(h_A, hp_A, h_B, hp_B, alpha: float, grad: bool = True):
    n = h_A.shape[0]
    sa, ca = cosine_sim_rows(h_A, hp_A)
    sb, cb = cosine_sim_rows(h_B, hp_B)
    loss = float((np.maximum(0.0, alpha - sa).sum() + np.maximum(0.0, alpha - sb).sum()) / n)
    if not grad:
        return loss, None
    dsa = np.where(alpha - sa > 0, -1.0 / n, 0.0)
    dsb = np.where(alpha - sb > 0, -1.0 / n, 0.0)
    dhA, dhpA = cosine_sim_rows_backward(ca, dsa)
    dhB, dhpB = cosine_sim_rows_backward(cb, dsb)
    return loss, (dhA, dhpA, dhB, dhpB)


def cdrd_forward_backward(h_M, h_A, h_B, tau: float, grad: bool = True):
    """Stabilized cross-domain contrastive loss and gradients w.r.t. (h_M, h_A, h_B).

    loss = -(1/N) sum_i [LSE(s_MA_i/tau, s_MB_i/tau)] + LSE_j(s_AB_j/tau)
    """
    n = h_M.shape[0]
    s_ma, c_ma = cosine_sim_rows(h_M, h_A)
    s_mb, c_mb = cosine_sim_rows(h_M, h_B)
    s_ab, c_ab = cosine_sim_rows(h_A, h_B)
    num = np.stack([s_ma, s_mb], axis=1) / tau
    lse_num = _logsumexp(num, axis=1)
    lse_den = float(_logsumexp(s_ab / tau, axis=0))
    loss = float(-lse_num.mean() + lse_den)
    if not grad:
        return loss, None
    w = np.exp(num - lse_num[:, None])  # per-instance softmax over the two numerator terms
    d_ma = -w[:, 0] / (n * tau)
    d_mb = -w[:, 1] / (n * tau)
    d_ab = np.exp(s_ab / tau - lse_den) / tau
    dM1, dA1 = cosine_sim_rows_backward(c_ma, d_ma)
    dM2, dB1 = cosine_sim_rows_backward(c_mb, d_mb)
    dA2, dB2 = cosine_sim_rows_backward(c_ab, d_ab)
    return loss, (dM1 + dM2, dA1 + dA2, dB1 + dB2)


def bce_forward_backward(z: Array, y: Array, grad: bool = True):
    """BCE of ``sigmoid(z)`` with the probability clamp; gradient w.r.t. logits ``z``."""
    p = sigmoid(z)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = z.shape[0]
    loss = float(-np.mean(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc)))
    if not grad:
        return loss, None
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    dp = -(y / pc - (1.0 - y) / (1.0 - pc)) / n
    return loss, np.where(inside, dp * p * (1.0 - p), 0.0)


# ---------------------------------------------------------------------------
# Heads
# ---------------------------------------------------------------------------

class MLPHead:
    """``widths`` ReLU layers followed by a scalar logit layer."""

    def __init__(self, in_dim: int, widths: Sequence[int], rng: Optional[np.random.Generator] = None) -> None:
        rng = rng or np.random.default_rng(0)
        dims = [in_dim, *widths, 1]
        self.layers = [Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:])]

    @property
    def params(self) -> Dict[str, Array]:
        return {f"l{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    def bind(self, params: Dict[str, Array], grads: Dict[str, Array]) -> None:
        for i, l in enumerate(self.layers):
            l.bind({k: params[f"l{i}.{k}"] for k in l.params}, {k: grads[f"l{i}.{k}"] for k in l.grads})

    def forward(self, x: Array):
        caches = []
        for i, l in enumerate(self.layers):
            x, c = l.forward(x)
            relu = None
            if i < len(self.layers) - 1:
                relu = x > 0
                x = x * relu
            caches.append((c, relu))
        return x[..., 0], caches

    def backward(self, caches, dz: Array) -> Array:
        d = dz[..., None]
        for l, (c, relu) in zip(reversed(self.layers), reversed(caches)):
            if relu is not None:
                d = d * relu
            d = l.backward(c, d)
        return d


def predict_ctr(h_domain: Array, h_M: Array, e_side: Array, head: MLPHead) -> Array:
    """Click probability from ``[h_domain, h_M, e_side]``."""
    x = np.concatenate([np.atleast_2d(h_domain), np.atleast_2d(h_M), np.atleast_2d(e_side)], axis=-1)
    in_dim = head.layers[0].in_dim
    if x.shape[-1] != in_dim:
        raise DimensionError(f"head expects {in_dim} inputs, got {x.shape[-1]}")
    out = sigmoid(head.forward(x)[0])
    return out if np.ndim(h_domain) > 1 else out[0]


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

def pad_left(seqs: Sequence[Sequence[int]], max_len: int, domains: Optional[Sequence[Sequence[int]]] = None):
    """Keep the most recent ``max_len`` entries and left-pad; returns (ids, mask[, doms])."""
    n = len(seqs)
    ids = np.zeros((n, max_len), dtype=np.int64)
    mask = np.zeros((n, max_len), dtype=bool)
    doms = np.zeros((n, max_len), dtype=np.int64)
    for r, s in enumerate(seqs):
        s = list(s)[-max_len:]
        if s:
            ids[r, max_len - len(s):] = s
            mask[r, max_len - len(s):] = True
            if domains is not None:
                doms[r, max_len - len(s):] = list(domains[r])[-max_len:]
    return (ids, mask, doms) if domains is not None else (ids, mask)


class IDSTCL:
    """Model definition: parameter layout, forward pass, loss and analytic gradient.

    The object holds layer structure only; parameter values are passed per
    call, so one instance may be reused across clients (not across threads).
    """

    def __init__(self, config: ModelConfig, vocab: Vocab, features: Optional[ItemFeatures] = None) -> None:
        config.validate()
        self.config, self.vocab = config, vocab
        self.features = features or ItemFeatures.unknown_only(vocab)
        c = config
        d = c.d_v
        self.encoders = {dom: TransformerEncoder(d, c.heads, c.ffn_mult * d, c.dropout) for dom in "ABM"}
        head_in = 2 * d + c.d_other
        self.heads = {dom: MLPHead(head_in, c.mlp_widths) for dom in "AB"}
        shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict()
        shapes["item_A"] = (vocab.n_items_a, c.d_id)
        shapes["item_B"] = (vocab.n_items_b, c.d_id)
        shapes["feat_A"] = (vocab.n_feat_a, c.d_feat)
        shapes["feat_B"] = (vocab.n_feat_b, c.d_feat)
        shapes["pos_A"] = (c.max_len, c.d_pos)
        shapes["pos_B"] = (c.max_len, c.d_pos)
        shapes["pos_M"] = (c.max_len, c.d_pos)
        shapes["other_A"] = (vocab.n_side, c.d_other)
        shapes["other_B"] = (vocab.n_side, c.d_other)
        for dom, enc in self.encoders.items():
            for k, v in enc.params.items():
                shapes[f"enc_{dom}.{k}"] = v.shape
        for dom, head in self.heads.items():
            for k, v in head.params.items():
                shapes[f"head_{dom}.{k}"] = v.shape
        self.shapes = shapes

    # -- parameters ---------------------------------------------------------

    def n_params(self) -> int:
        return sum(int(np.prod(s)) for s in self.shapes.values())

    def init_params(self, seed: int = 0) -> ModelParams:
        """Xavier-uniform weights, zero biases, unit layer-norm gains."""
        rng = np.random.default_rng(seed)
        p = ModelParams(self.shapes)
        for name, shape in self.shapes.items():
            leaf = name.rsplit(".", 1)[-1]
            if leaf in ("b", "b1", "b2", "bias"):
                continue
            if leaf == "gain":
                p[name][...] = 1.0
            elif len(shape) == 2:
                p[name][...] = xavier_uniform(rng, shape[0], shape[1], shape)
        return p

    def _bind(self, params: ModelParams, grads: Optional[ModelParams]) -> None:
        g = grads if grads is not None else params.zeros_like()
        for dom, enc in self.encoders.items():
            pre = f"enc_{dom}."
            enc.bind({k: params[pre + k] for k in enc.params}, {k: g[pre + k] for k in enc.params})
        for dom, head in self.heads.items():
            pre = f"head_{dom}."
            head.bind({k: params[pre + k] for k in head.params}, {k: g[pre + k] for k in head.params})

    # -- embedding ----------------------------------------------------------

    def _check_ids(self, ids: Array, mask: Array, dom: str) -> None:
        n = self.vocab.n_items_a if dom == "A" else self.vocab.n_items_b
        v = ids[mask]
        if v.size and (v.min() < 0 or v.max() >= n):
            raise VocabularyError(f"item id outside the domain-{dom} vocabulary (size {n})")

    def _embed_part(self, params: ModelParams, dom: str, ids: Array):
        e_id = params[f"item_{dom}"][ids]
        fidx = self.features.index[dom][ids]
        fw = self.features.weight[dom][ids]
        e_feat = np.einsum("...f,...fd->...d", fw, params[f"feat_{dom}"][fidx])
        return e_id, e_feat, fidx, fw

    def embed(self, params: ModelParams, domain: str, ids: Array, mask: Array,
              doms: Optional[Array] = None) -> Array:
        """``[id | features | position]`` rows, zeroed at padding positions."""
        c = self.config
        lead = ids.shape
        if domain in "AB":
            self._check_ids(ids, mask, domain)
            e_id, e_feat, _, _ = self._embed_part(params, domain, ids)
        else:
            is_b = (doms == 1)
            self._check_ids(ids, mask & ~is_b, "A")
            self._check_ids(ids, mask & is_b, "B")
            ia = np.where(is_b, 0, ids)
            ib = np.where(is_b, ids, 0)
            ida, fa, _, _ = self._embed_part(params, "A", ia)
            idb, fb, _, _ = self._embed_part(params, "B", ib)
            sel = is_b[..., None]
            e_id = np.where(sel, idb, ida)
            e_feat = np.where(sel, fb, fa)
        e_pos = np.broadcast_to(params[f"pos_{domain}"][: lead[-1]], lead + (c.d_pos,))
        E = np.concatenate([e_id, e_feat, e_pos], axis=-1)
        return E * mask[..., None]

    def _embed_backward(self, grads: ModelParams, domain: str, ids: Array, mask: Array,
                        doms: Optional[Array], dE: Array) -> None:
        c = self.config
        dE = dE * mask[..., None]
        d_id, d_feat, d_pos = np.split(dE, [c.d_id, c.d_id + c.d_feat], axis=-1)
        grads[f"pos_{domain}"][: ids.shape[-1]] += d_pos.reshape(-1, *d_pos.shape[-2:]).sum(axis=0)
        parts = [(domain, mask)] if domain in "AB" else [("A", mask & (doms == 0)), ("B", mask & (doms == 1))]
        for dom, m in parts:
            sel_ids = ids[m]
            if sel_ids.size == 0:
                continue
            np.add.at(grads[f"item_{dom}"], sel_ids, d_id[m])
            fidx = self.features.index[dom][sel_ids]          # (k, F)
            fw = self.features.weight[dom][sel_ids]           # (k, F)
            np.add.at(grads[f"feat_{dom}"], fidx.ravel(),
                      (fw[..., None] * d_feat[m][:, None, :]).reshape(-1, c.d_feat))

    def embed_sequence(self, params: ModelParams, item_ids: Sequence[int], domain: str,
                       domains: Optional[Sequence[int]] = None) -> Tuple[Array, Array]:
        """Embed one sequence (truncated to the most recent ``max_len``); returns ``(E, mask)``."""
        L = self.config.max_len
        if domain == "M":
            ids, mask, doms = pad_left([item_ids], L, [domains if domains is not None else [0] * len(item_ids)])
        else:
            ids, mask = pad_left([item_ids], L)
            doms = None
        return self.embed(params, domain, ids, mask, doms)[0], mask[0]

    # -- encoders -----------------------------------------------------------

    def encode(self, params: ModelParams, domain: str, ids: Array, mask: Array,
               doms: Optional[Array] = None, rng: Optional[np.random.Generator] = None) -> Array:
        self._bind(params, None)
        E = self.embed(params, domain, ids, mask, doms)
        return self.encoders[domain].forward(E, mask, rng)[0]

    def encode_domain(self, params: ModelParams, seq_embedding: Array, mask: Array, domain: str) -> Array:
        """Pooled representation of one already-embedded sequence through the ``domain`` encoder."""
        if not mask.any():
            raise EmptySequenceError("cannot encode an empty sequence")
        self._bind(params, None)
        return self.encoders[domain].forward(seq_embedding[None], mask[None])[0][0]

    def side_embedding(self, params: ModelParams, domain: str, side_idx: Array, side_w: Array) -> Array:
        return np.einsum("ns,nsd->nd", side_w, params[f"other_{domain}"][side_idx])

    # -- training objective ---------------------------------------------------

    def loss_and_grad(self, params: ModelParams, batch: ModelBatch, rng: Optional[np.random.Generator] = None,
                      grad: bool = True, lambda1: Optional[float] = None, lambda2: Optional[float] = None,
                      alpha: Optional[float] = None, tau: Optional[float] = None
                      ) -> Tuple[LossBreakdown, Optional[Array]]:
        """Total loss on ``batch`` and its gradient as a flat vector (canonical order)."""
        c = self.config
        lambda1 = c.lambda1 if lambda1 is None else lambda1
        lambda2 = c.lambda2 if lambda2 is None else lambda2
        alpha = c.alpha if alpha is None else alpha
        tau = c.tau if tau is None else tau
        n = batch.n
        if n == 0:
            raise ValueError("empty batch")
        grads = params.zeros_like() if grad else None
        self._bind(params, grads)

        enc_rng = rng if (rng is not None and c.dropout > 0) else None
        E_a = self.embed(params, "A", batch.a_ids, batch.a_mask)
        hA_all, cache_a = self.encoders["A"].forward(E_a, batch.a_mask, enc_rng)
        E_b = self.embed(params, "B", batch.b_ids, batch.b_mask)
        hB_all, cache_b = self.encoders["B"].forward(E_b, batch.b_mask, enc_rng)
        E_m = self.embed(params, "M", batch.m_ids, batch.m_mask, batch.m_dom)
        h_M, cache_m = self.encoders["M"].forward(E_m, batch.m_mask, enc_rng)
        h_A, hp_A = hA_all[:n], hA_all[n:]
        h_B, hp_B = hB_all[:n], hB_all[n:]

        side_a = self.side_embedding(params, "A", batch.side_idx, batch.side_w)
        side_b = self.side_embedding(params, "B", batch.side_idx, batch.side_w)
        z_a, cache_ha = self.heads["A"].forward(np.concatenate([h_A, h_M, side_a], axis=1))
        z_b, cache_hb = self.heads["B"].forward(np.concatenate([h_B, h_M, side_b], axis=1))

        l_a, dz_a = bce_forward_backward(z_a, batch.y_a, grad)
        l_b, dz_b = bce_forward_backward(z_b, batch.y_b, grad)
        l_idra, g_idra = idra_forward_backward(h_A, hp_A, h_B, hp_B, alpha, grad)
        l_cdrd, g_cdrd = cdrd_forward_backward(h_M, h_A, h_B, tau, grad)
        losses = LossBreakdown(l_a, l_b, l_idra, l_cdrd, lambda1, lambda2)
        if not grad:
            return losses, None

        d = c.d_v
        dx_a = self.heads["A"].backward(cache_ha, dz_a)
        dx_b = self.heads["B"].backward(cache_hb, dz_b)
        dhA_all = np.zeros_like(hA_all)
        dhB_all = np.zeros_like(hB_all)
        dhA_all[:n] += dx_a[:, :d]
        dhB_all[:n] += dx_b[:, :d]
        dh_M = dx_a[:, d:2 * d] + dx_b[:, d:2 * d]
        dside_a, dside_b = dx_a[:, 2 * d:], dx_b[:, 2 * d:]
        if lambda1 != 0.0:
            dhA, dhpA, dhB, dhpB = g_idra
            dhA_all[:n] += lambda1 * dhA
            dhA_all[n:] += lambda1 * dhpA
            dhB_all[:n] += lambda1 * dhB
            dhB_all[n:] += lambda1 * dhpB
        if lambda2 != 0.0:
            dM, dA, dB = g_cdrd
            dh_M = dh_M + lambda2 * dM
            dhA_all[:n] += lambda2 * dA
            dhB_all[:n] += lambda2 * dB

        for dom, dside in (("A", dside_a), ("B", dside_b)):
            np.add.at(grads[f"other_{dom}"], batch.side_idx.ravel(),
                      (batch.side_w[..., None] * dside[:, None, :]).reshape(-1, c.d_other))
        dE_a = self.encoders["A"].backward(cache_a, dhA_all)
        self._embed_backward(grads, "A", batch.a_ids, batch.a_mask, None, dE_a)
        dE_b = self.encoders["B"].backward(cache_b, dhB_all)
        self._embed_backward(grads, "B", batch.b_ids, batch.b_mask, None, dE_b)
        dE_m = self.encoders["M"].backward(cache_m, dh_M)
        self._embed_backward(grads, "M", batch.m_ids, batch.m_mask, batch.m_dom, dE_m)
        return losses, grads.flat

    def representations(self, params: ModelParams, batch: ModelBatch) -> DomainRepresentations:
        n = batch.n
        hA = self.encode(params, "A", batch.a_ids, batch.a_mask)
        hB = self.encode(params, "B", batch.b_ids, batch.b_mask)
        hM = self.encode(params, "M", batch.m_ids, batch.m_mask, batch.m_dom)
        return DomainRepresentations(hA[:n], hB[:n], hM, hA[n:], hB[n:])

    def head_logits(self, params: ModelParams, domain: str, h_dom: Array, h_M: Array, side: Array) -> Array:
        self._bind(params, None)
        return self.heads[domain].forward(np.concatenate([h_dom, h_M, side], axis=-1))[0]


def model_backward(model: IDSTCL, params: ModelParams, batch: ModelBatch, lambda1: float, lambda2: float,
                   alpha: float, tau: float, rng: Optional[np.random.Generator] = None) -> Array:
    """Flat gradient of the total training loss on ``batch``."""
    return model.loss_and_grad(params, batch, rng, True, lambda1, lambda2, alpha, tau)[1]
