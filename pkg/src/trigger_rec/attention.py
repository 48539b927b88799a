"""The four attention mechanisms the model composes.

All functions are pure in (params, inputs) and operate on batched tensors:
behavior sequences are (B, T, D) with a boolean validity mask (B, T).
Sequences with no valid entry pool to the zero vector rather than erroring,
since cold users with empty histories are legitimate inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError

DIN_HIDDEN = (32, 16)


def affine(x: T.Tensor, w: T.Tensor, b: T.Tensor) -> T.Tensor:
    """x @ w + b with the bias broadcast over leading axes."""
    out = T.matmul(x, w)
    return T.add(out, T.broadcast_to(T.reshape(b, (1,) * (out.data.ndim - 1) + b.shape), out.shape))


def softmax_rows_or_zero(logits: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Masked softmax where fully-masked rows yield all-zero weights."""
    has_valid = mask.any(axis=-1)
    if has_valid.all():
        return T.softmax_masked(logits, mask)
    safe = np.where(has_valid[..., None], mask, True)
    w = T.softmax_masked(logits, safe)
    return T.mask_zero(w, np.broadcast_to(has_valid[..., None], mask.shape))


def weighted_pool(weights: T.Tensor, keys: T.Tensor) -> T.Tensor:
    """Sum keys (B, T, D) by per-row weights (B, T)."""
    b, t, d = keys.shape
    w = T.broadcast_to(T.reshape(weights, (b, t, 1)), (b, t, d))
    return T.reduce_sum(T.mul(w, keys), axis=1)


# ---------------------------------------------------------------------------
# target-conditioned (DIN-style) attention


@dataclass
class DinAttentionParams:
    """Activation-unit MLP scoring each behavior against a query vector.

    Input per pair is [query; key; query - key; query * key], so w1 has
    4 * D input columns; the output is a single logit per behavior.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


def init_din_params(rng: np.random.Generator, dim: int, hidden=DIN_HIDDEN) -> DinAttentionParams:
    h1, h2 = hidden
    return DinAttentionParams(
        w1=_init_w(rng, 4 * dim, h1),
        b1=np.zeros(h1),
        w2=_init_w(rng, h1, h2),
        b2=np.zeros(h2),
        w3=_init_w(rng, h2, 1),
        b3=np.zeros(1),
    )


def din_attention(query: T.Tensor, keys: T.Tensor, mask: np.ndarray, p: DinAttentionParams):
    """Score keys against the query and pool them by softmax weights.

    query: (B, D), keys: (B, T, D), mask: (B, T).
    Returns (weights (B, T), pooled (B, D)).
    """
    b, t, d = keys.shape
    if query.shape != (b, d):
        raise ConfigError(f"query shape {query.shape} does not match keys {keys.shape}")
    q = T.broadcast_to(T.reshape(query, (b, 1, d)), (b, t, d))
    feats = T.concat([q, keys, T.sub(q, keys), T.mul(q, keys)], axis=-1)
    h = T.relu(affine(feats, p.w1, p.b1))
    h = T.relu(affine(h, p.w2, p.b2))
    logits = T.reshape(affine(h, p.w3, p.b3), (b, t))
    weights = softmax_rows_or_zero(logits, mask)
    return weights, weighted_pool(weights, keys)


# ---------------------------------------------------------------------------
# positional attention over hard-filtered sub-sequences


@dataclass
class PositionalAttentionParams:
    """Recency-aware scoring: a learned position embedding is the query.

    Logit per behavior is z . tanh(p_t Wp + e_t We + b), where p_t is the
    behavior's position embedding at its original serial number.
    """

    pos: np.ndarray  # (T_max, d_p)
    wp: np.ndarray   # (d_p, d_h)
    we: np.ndarray   # (D, d_h)
    b: np.ndarray    # (d_h,)
    z: np.ndarray    # (d_h, 1)


def init_positional_params(
    rng: np.random.Generator, max_len: int, dim: int, pos_dim: int = 16, hidden_dim: int = 16
) -> PositionalAttentionParams:
    return PositionalAttentionParams(
        pos=rng.uniform(-1.0, 1.0, size=(max_len, pos_dim)) / np.sqrt(pos_dim),
        wp=_init_w(rng, pos_dim, hidden_dim),
        we=_init_w(rng, dim, hidden_dim),
        b=np.zeros(hidden_dim),
        z=_init_w(rng, hidden_dim, 1),
    )


def positional_attention(keys: T.Tensor, positions: np.ndarray, p: PositionalAttentionParams, mask: np.ndarray):
    """Pool a sub-sequence with position-embedding queries.

    positions holds each key's serial number in the original behavior
    sequence; filtering must preserve them. Returns (weights, pooled).
    """
    b, t, d = keys.shape
    positions = np.asarray(positions)
    pos_emb = T.gather_rows(p.pos, positions)  # (t, d_p) or (b, t, d_p)
    if pos_emb.data.ndim == 2:
        pos_emb = T.broadcast_to(T.reshape(pos_emb, (1, t, pos_emb.shape[-1])), (b, t, pos_emb.shape[-1]))
    scores = T.tanh(T.add(T.matmul(pos_emb, p.wp), affine(keys, p.we, p.b)))
    logits = T.reshape(T.matmul(scores, p.z), (b, t))
    weights = softmax_rows_or_zero(logits, mask)
    return weights, weighted_pool(weights, keys)


# ---------------------------------------------------------------------------
# multi-head self-attention encoder


@dataclass
class MhsaHeadParams:
    wq: np.ndarray  # (D, D/h)
    wk: np.ndarray
    wv: np.ndarray


@dataclass
class MhsaLayerParams:
    heads: list
    wo: np.ndarray  # (D, D)
    w1: np.ndarray  # (D, d_ff)
    b1: np.ndarray
    w2: np.ndarray  # (d_ff, D)
    b2: np.ndarray


@dataclass
class MhsaParams:
    """Self-attention + feed-forward stack. No residuals or layer norm."""

    layers: list = field(default_factory=list)
    n_heads: int = 2


def init_mhsa_params(
    rng: np.random.Generator, dim: int, n_heads: int = 2, n_layers: int = 1, ffn_mult: int = 2
) -> MhsaParams:
    if dim % n_heads != 0:
        raise ConfigError(f"head count {n_heads} does not divide dim {dim}")
    d_head = dim // n_heads
    d_ff = ffn_mult * dim
    layers = []
    for _ in range(n_layers):
        heads = [
            MhsaHeadParams(
                wq=_init_w(rng, dim, d_head), wk=_init_w(rng, dim, d_head), wv=_init_w(rng, dim, d_head)
            )
            for _ in range(n_heads)
        ]
        layers.append(
            MhsaLayerParams(
                heads=heads,
                wo=_init_w(rng, dim, dim),
                w1=_init_w(rng, dim, d_ff),
                b1=np.zeros(d_ff),
                w2=_init_w(rng, d_ff, dim),
                b2=np.zeros(dim),
            )
        )
    return MhsaParams(layers=layers, n_heads=n_heads)


def mhsa_block(f: T.Tensor, layer: MhsaLayerParams, mask: np.ndarray) -> T.Tensor:
    """One self-attention sub-block: per-head scaled dot-product, concat, Wo.

    Padded positions are excluded as keys everywhere and produce all-zero
    output rows as queries, so downstream pooling never sees them.
    """
    b, t, d = f.shape
    scale = 1.0 / np.sqrt(d / len(layer.heads))
    key_mask = np.broadcast_to(mask[:, None, :], (b, t, t))
    heads = []
    for hp in layer.heads:
        q = T.matmul(f, hp.wq)
        k = T.matmul(f, hp.wk)
        v = T.matmul(f, hp.wv)
        logits = T.mul(T.matmul(q, T.transpose(k)), q.tape.leaf(scale))
        attn = softmax_rows_or_zero(logits, key_mask)  # (b, t, t)
        heads.append(T.matmul(attn, v))
    out = T.matmul(T.concat(heads, axis=-1), layer.wo)
    return T.mask_zero(out, mask[:, :, None])


def ffn_block(f: T.Tensor, layer: MhsaLayerParams) -> T.Tensor:
    """Row-wise two-layer network: relu(x W1 + b1) W2 + b2."""
    return affine(T.relu(affine(f, layer.w1, layer.b1)), layer.w2, layer.b2)


def self_attention_encode(f: T.Tensor, p: MhsaParams, mask: np.ndarray) -> T.Tensor:
    """Apply every (attention, feed-forward) layer in order."""
    for layer in p.layers:
        f = ffn_block(mhsa_block(f, layer, mask), layer)
    return f


# ---------------------------------------------------------------------------
# global feature-slot attention


@dataclass
class FimParams:
    """One (w, b) scorer per feature slot; slots must share one dimension."""

    ws: list  # slot -> (D, 1)
    bs: list  # slot -> (1,)


def init_fim_params(rng: np.random.Generator, dim: int, n_slots: int) -> FimParams:
    return FimParams(
        ws=[_init_w(rng, dim, 1) for _ in range(n_slots)],
        bs=[np.zeros(1) for _ in range(n_slots)],
    )


def fim(slots, p: FimParams):
    """Blend same-dimension feature slots by softmax over tanh scores.

    slots: list of (B, D) tensors. Returns (weights (B, L), fused (B, D)).
    """
    if not slots:
        raise ConfigError("fim needs at least one slot")
    if len(slots) != len(p.ws):
        raise ConfigError(f"{len(slots)} slots but {len(p.ws)} scorers")
    b, d = slots[0].shape
    for s in slots:
        if s.shape != (b, d):
            raise ConfigError(f"slot shapes disagree: {s.shape} vs {(b, d)}")
    scores = [T.tanh(affine(s, w, bias)) for s, w, bias in zip(slots, p.ws, p.bs)]
    logits = T.concat(scores, axis=-1)  # (b, L)
    weights = T.softmax_masked(logits, np.ones(logits.shape, dtype=bool))
    stacked = T.concat([T.reshape(s, (b, 1, d)) for s in slots], axis=1)  # (b, L, d)
    return weights, weighted_pool(weights, stacked)


def _init_w(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))
