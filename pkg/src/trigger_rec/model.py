"""Full model assembly: intent network, embedding fusion, hybrid interest
extraction, prediction head, and the baseline/ablation variant factory.

The full pipeline per impression:
  1. embedding lookups per feature category;
  2. intent network scores the user's interest in the trigger and emits a
     per-dimension gate in (0, 1);
  3. the gate blends trigger and target embeddings into one fused query;
  4. hard branch pools attribute-matched behavior sub-sequences, soft branch
     self-attends over the full sequence and pools it with the fused query;
  5. everything concatenates into the head MLP for the click probability.

Variants re-route this pipeline to reproduce each baseline/ablation row.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from . import attention as A
from . import features as F
from . import params as P
from . import tensor as T
from .errors import ConfigError, ContractError

PROB_CLIP = 1e-7

VARIANTS = (
    "dihn",
    "dihn_scalar",
    "dihn_no_hsm",
    "dihn_no_ssm_mean",
    "dihn_no_ssm_target",
    "dihn_no_ssm_trigger",
    "dihn_no_ssm_concat",
    "din_baseline",
    "din_2ta_baseline",
)

_HAS_UIN = {"dihn", "dihn_scalar", "dihn_no_hsm"}
_HAS_HSM = {"dihn", "dihn_scalar", "dihn_no_ssm_mean", "dihn_no_ssm_target",
            "dihn_no_ssm_trigger", "dihn_no_ssm_concat"}
_HAS_ENCODER = {"dihn", "dihn_scalar", "dihn_no_hsm"}
_USES_TRIGGER = frozenset(VARIANTS) - {"din_baseline"}


@dataclass
class ModelHyper:
    """Architecture sizes not dictated by the schema."""

    din_hidden: tuple = (32, 16)
    uin_hidden: int = 32
    head_hidden: tuple = (64, 32)
    pos_dim: int = 16
    pos_hidden: int = 16
    mhsa_heads: int = 2
    mhsa_layers: int = 1
    ffn_mult: int = 2

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["din_hidden"] = list(self.din_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["din_hidden"] = tuple(d["din_hidden"])
        d["head_hidden"] = tuple(d["head_hidden"])
        return cls(**d)


@dataclass
class UinParams:
    """Trigger-intent net: behavior pool + MLP ending in the gate layer."""

    att: A.DinAttentionParams
    w1: np.ndarray  # (D + Du + D, hidden)
    b1: np.ndarray
    w2: np.ndarray  # (hidden, D) - pre-gate layer
    b2: np.ndarray
    w3: np.ndarray  # (D, 1) - scalar intent head
    b3: np.ndarray


@dataclass
class HsmParams:
    """One positional-attention channel per hard-match attribute, plus the
    slot scorer. The user slot gets a projection to the shared slot dim."""

    channels: dict  # attribute name -> PositionalAttentionParams
    user_proj: np.ndarray  # (Du, D)
    fim: A.FimParams


@dataclass
class MlpParams:
    ws: list
    bs: list


@dataclass
class ModelParams:
    """Everything learnable plus the routing configuration."""

    variant: str
    schema_hash: str
    hyper: ModelHyper
    tables: F.EmbeddingTables
    head: MlpParams
    uin: UinParams | None = None
    hsm: HsmParams | None = None
    ssm_encoder: A.MhsaParams | None = None
    ssm_att: A.DinAttentionParams | None = None
    trigger_att: A.DinAttentionParams | None = None
    query_proj: np.ndarray | None = None  # (2D, D), concat-query variant only

    def named_arrays(self):
        yield from P.walk_arrays(self, "")

    def n_parameters(self) -> int:
        return sum(arr.size for _, arr in self.named_arrays())


@dataclass
class ForwardOutput:
    p_target: T.Tensor          # (B,)
    p_trigger: T.Tensor | None  # (B,), only for variants with the intent net
    vt_x: T.Tensor | None       # (B, D) gate
    diagnostics: dict = field(default_factory=dict)


def _init_mlp(rng, dims) -> MlpParams:
    ws, bs = [], []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        ws.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws=ws, bs=bs)


def _mlp_forward(x: T.Tensor, mlp: MlpParams) -> T.Tensor:
    for i, (w, b) in enumerate(zip(mlp.ws, mlp.bs)):
        x = A.affine(x, w, b)
        if i < len(mlp.ws) - 1:
            x = T.relu(x)
    return x


def build_variant(variant: str, schema: F.FeatureSchema, hyper: ModelHyper | None = None,
                  seed: int = 0) -> ModelParams:
    """Instantiate parameters for one variant; unused branches get none."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    hyper = hyper or ModelHyper()
    rng = np.random.default_rng(seed)
    d = schema.behavior_dim
    du = schema.category_dim("user")
    dc = schema.category_dim("context")

    tables = F.init_tables(schema, rng)

    uin = None
    if variant in _HAS_UIN:
        uin_in = d + du + d
        uin = UinParams(
            att=A.init_din_params(rng, d, hyper.din_hidden),
            w1=_uniform(rng, uin_in, hyper.uin_hidden),
            b1=np.zeros(hyper.uin_hidden),
            w2=_uniform(rng, hyper.uin_hidden, d),
            b2=np.zeros(d),
            w3=_uniform(rng, d, 1),
            b3=np.zeros(1),
        )

    hsm = None
    if variant in _HAS_HSM:
        channels = {
            attr: A.init_positional_params(rng, schema.max_behavior_len, d, hyper.pos_dim, hyper.pos_hidden)
            for attr in schema.hsm_attributes
        }
        hsm = HsmParams(
            channels=channels,
            user_proj=_uniform(rng, du, d),
            fim=A.init_fim_params(rng, d, 1 + len(channels)),
        )

    ssm_encoder = None
    if variant in _HAS_ENCODER:
        ssm_encoder = A.init_mhsa_params(rng, d, hyper.mhsa_heads, hyper.mhsa_layers, hyper.ffn_mult)

    ssm_att = None
    if variant != "dihn_no_ssm_mean":
        ssm_att = A.init_din_params(rng, d, hyper.din_hidden)

    trigger_att = None
    if variant == "din_2ta_baseline":
        trigger_att = A.init_din_params(rng, d, hyper.din_hidden)

    query_proj = _uniform(rng, 2 * d, d) if variant == "dihn_no_ssm_concat" else None

    head_in = _head_input_dim(variant, d, du, dc)
    head = _init_mlp(rng, (head_in,) + tuple(hyper.head_hidden) + (1,))

    return ModelParams(
        variant=variant,
        schema_hash=schema.hash(),
        hyper=hyper,
        tables=tables,
        head=head,
        uin=uin,
        hsm=hsm,
        ssm_encoder=ssm_encoder,
        ssm_att=ssm_att,
        trigger_att=trigger_att,
        query_proj=query_proj,
    )


def _head_input_dim(variant, d, du, dc):
    if variant == "din_baseline":
        return d + du + d + dc              # pool, user, target
    if variant == "din_2ta_baseline":
        return 2 * d + du + 2 * d + dc      # two pools, user, trigger, target
    n_pools = d                             # soft-branch pool
    hsm_dim = d if variant in _HAS_HSM else 0
    return n_pools + hsm_dim + du + 2 * d + dc


def _uniform(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# sub-module forwards


def uin_forward(e_u: T.Tensor, e_b: T.Tensor, e_t: T.Tensor, mask: np.ndarray, p: UinParams):
    """Intent probability and gate vector from (user, behaviors, trigger).

    Returns (p_x (B,), vt_x (B, D), attention weights (B, T)).
    """
    weights, v_u = A.din_attention(e_t, e_b, mask, p.att)
    x = T.concat([v_u, e_u, e_t], axis=-1)
    h = T.relu(A.affine(x, p.w1, p.b1))
    vt_x = T.sigmoid(A.affine(h, p.w2, p.b2))
    p_x = T.sigmoid(T.reshape(A.affine(vt_x, p.w3, p.b3), (x.shape[0],)))
    return p_x, vt_x, weights


def fem_fuse(gate: T.Tensor, e_t: T.Tensor, e_i: T.Tensor, mode: str = "vector") -> T.Tensor:
    """Convex per-dimension blend of trigger and target embeddings.

    gate: (B, D) for vector mode, (B,) intent probability for scalar mode.
    An all-ones gate returns the trigger embedding exactly; all-zeros the
    target embedding.
    """
    if mode not in ("vector", "scalar"):
        raise ConfigError(f"unknown fusion mode {mode!r}")
    if np.any(gate.data < 0.0) or np.any(gate.data > 1.0):
        raise ContractError("fusion gate has coordinates outside [0, 1]")
    b, d = e_t.shape
    if mode == "scalar":
        gate = T.broadcast_to(T.reshape(gate, (b, 1)), (b, d))
    return T.add(T.mul(gate, e_t), T.mul(T.sub(_ones(gate), gate), e_i))


def _ones(like: T.Tensor) -> T.Tensor:
    return T.broadcast_to(like.tape.leaf(1.0), like.shape)


def hard_match_submask(behavior_attr: np.ndarray, trigger_attr: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Valid behaviors whose attribute equals the trigger's: (B, T) bool."""
    return mask & (behavior_attr == trigger_attr[:, None])


def hsm_forward(e_b: T.Tensor, batch: F.Batch, schema: F.FeatureSchema, e_u: T.Tensor, p: HsmParams):
    """Hard branch: per-attribute filtered pools blended with the user slot.

    Returns (eh_b (B, D), diagnostics with per-channel weights).
    """
    b, t, d = e_b.shape
    positions = np.arange(t)
    beh_idx = {f.name: i for i, f in enumerate(schema.behavior)}
    trig_idx = {f.name: i for i, f in enumerate(schema.trigger)}
    diag = {}
    slots = [T.matmul(e_u, p.user_proj)]
    for attr in schema.hsm_attributes:
        submask = hard_match_submask(
            batch.behavior_ids[:, :, beh_idx[attr]], batch.trigger_ids[:, trig_idx[attr]], batch.mask
        )
        weights, pooled = A.positional_attention(e_b, positions, p.channels[attr], submask)
        diag[f"hsm.{attr}"] = weights
        slots.append(pooled)
    fim_weights, eh_b = A.fim(slots, p.fim)
    diag["hsm.fim"] = fim_weights
    return eh_b, diag


def ssm_forward(e_b: T.Tensor, query: T.Tensor, mask: np.ndarray,
                encoder: A.MhsaParams, att: A.DinAttentionParams):
    """Soft branch: self-attention encode, then pool with the fused query."""
    encoded = A.self_attention_encode(e_b, encoder, mask)
    weights, pooled = A.din_attention(query, encoded, mask, att)
    return pooled, weights


def masked_mean(e_b: T.Tensor, mask: np.ndarray) -> T.Tensor:
    """Mean of valid rows; all-padded sequences give the zero vector."""
    b, t, d = e_b.shape
    counts = np.maximum(mask.sum(axis=1, keepdims=True), 1).astype(np.float64)  # (B, 1)
    total = T.reduce_sum(T.mask_zero(e_b, mask[:, :, None]), axis=1)
    inv = e_b.tape.leaf(1.0 / counts)
    return T.mul(total, T.broadcast_to(inv, (b, d)))


# ---------------------------------------------------------------------------
# full forward


def dihn_forward(bound: ModelParams, batch: F.Batch, schema: F.FeatureSchema) -> ForwardOutput:
    """Run one variant end to end on a batch of encoded samples.

    `bound` must be the tape-bound view of ModelParams (see bind_params).
    Output probabilities are clipped to [1e-7, 1 - 1e-7].
    """
    variant = bound.variant
    if schema.hash() != bound.schema_hash:
        raise ContractError("batch schema does not match the model's schema")
    emb = F.lookup_embeddings(bound.tables, batch)
    e_u, e_b = emb["user"], emb["behavior"]
    e_i = emb["target"]
    e_t = emb["trigger"] if variant in _USES_TRIGGER else None
    mask = batch.mask
    diag = {}

    p_trigger = None
    vt_x = None
    if variant in _HAS_UIN:
        p_trigger, vt_x, uin_w = uin_forward(e_u, e_b, e_t, mask, bound.uin)
        diag["uin"] = uin_w

    pools = []
    if variant in _HAS_ENCODER:
        gate = vt_x if variant != "dihn_scalar" else p_trigger
        fe_t = fem_fuse(gate, e_t, e_i, mode="vector" if variant != "dihn_scalar" else "scalar")
        pooled, w = ssm_forward(e_b, fe_t, mask, bound.ssm_encoder, bound.ssm_att)
        pools.append(pooled)
        diag["ssm"] = w
    elif variant == "dihn_no_ssm_mean":
        pools.append(masked_mean(e_b, mask))
    elif variant in ("dihn_no_ssm_target", "din_baseline"):
        w, pooled = A.din_attention(e_i, e_b, mask, bound.ssm_att)
        pools.append(pooled)
        diag["pool"] = w
    elif variant == "dihn_no_ssm_trigger":
        w, pooled = A.din_attention(e_t, e_b, mask, bound.ssm_att)
        pools.append(pooled)
        diag["pool"] = w
    elif variant == "dihn_no_ssm_concat":
        query = T.matmul(T.concat([e_t, e_i], axis=-1), bound.query_proj)
        w, pooled = A.din_attention(query, e_b, mask, bound.ssm_att)
        pools.append(pooled)
        diag["pool"] = w
    elif variant == "din_2ta_baseline":
        w_i, pooled_i = A.din_attention(e_i, e_b, mask, bound.ssm_att)
        w_t, pooled_t = A.din_attention(e_t, e_b, mask, bound.trigger_att)
        pools.extend([pooled_i, pooled_t])
        diag["pool.target"] = w_i
        diag["pool.trigger"] = w_t

    if variant in _HAS_HSM:
        eh_b, hsm_diag = hsm_forward(e_b, batch, schema, e_u, bound.hsm)
        pools.append(eh_b)
        diag.update(hsm_diag)

    parts = list(pools) + [e_u]
    if e_t is not None:
        parts.append(e_t)
    parts.append(e_i)
    if "context" in emb:
        parts.append(emb["context"])
    x = T.concat(parts, axis=-1)
    logit = T.reshape(_mlp_forward(x, bound.head), (batch.size,))
    p_target = T.clip(T.sigmoid(logit), PROB_CLIP, 1.0 - PROB_CLIP)
    if p_trigger is not None:
        p_trigger = T.clip(p_trigger, PROB_CLIP, 1.0 - PROB_CLIP)
    return ForwardOutput(p_target=p_target, p_trigger=p_trigger, vt_x=vt_x, diagnostics=diag)


def bind_params(tape: T.Tape, model: ModelParams):
    """Wrap every parameter array as a tape leaf.

    Returns (bound model, flat name -> leaf Tensor map).
    """
    leaf_map = {}
    return P.bind(tape, model, leaf_map, ""), leaf_map


def nll(p: T.Tensor, y: np.ndarray) -> T.Tensor:
    """Batch-mean negative log likelihood of Bernoulli labels."""
    tape = p.tape
    y = np.asarray(y, dtype=np.float64)
    yt = tape.leaf(y)
    one = T.broadcast_to(tape.leaf(1.0), p.shape)
    ll = T.add(T.mul(yt, T.log(p)), T.mul(T.sub(one, yt), T.log(T.sub(one, p))))
    return T.mul(T.reduce_mean(ll), tape.leaf(-1.0))


def joint_loss(p_target: T.Tensor, y: np.ndarray, p_trigger: T.Tensor | None,
               y_t: np.ndarray, alpha: float, beta: float) -> T.Tensor:
    """alpha * trigger-intent loss + beta * target-click loss.

    Variants without the intent branch pass p_trigger=None and train on the
    target term alone.
    """
    if alpha < 0 or beta < 0:
        raise ContractError("loss weights must be nonnegative")
    loss_i = nll(p_target, y)
    if p_trigger is None:
        return T.mul(loss_i, p_target.tape.leaf(beta))
    loss_t = nll(p_trigger, y_t)
    return T.add(
        T.mul(loss_t, p_target.tape.leaf(alpha)),
        T.mul(loss_i, p_target.tape.leaf(beta)),
    )


def batch_loss(tape: T.Tape, model: ModelParams, batch: F.Batch, schema: F.FeatureSchema,
               alpha: float, beta: float):
    """Forward + joint loss; returns (loss, output, leaf map)."""
    bound, leaf_map = bind_params(tape, model)
    out = dihn_forward(tape, bound, batch, schema)
    loss = joint_loss(out.p_target, batch.labels, out.p_trigger, batch.aux_labels, alpha, beta)
    return loss, out, leaf_map


# ---------------------------------------------------------------------------
# checkpoints: one header line of json, then raw little-endian f64 blocks


def save_checkpoint(model: ModelParams, path):
    entries = [(name, list(arr.shape)) for name, arr in model.named_arrays()]
    header = {
        "format": 1,
        "variant": model.variant,
        "schema_hash": model.schema_hash,
        "hyper": model.hyper.to_dict(),
        "params": entries,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        for _, arr in model.named_arrays():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, schema: F.FeatureSchema) -> ModelParams:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != 1:
            raise ContractError(f"unsupported checkpoint format {header.get('format')!r}")
        if header["schema_hash"] != schema.hash():
            raise ContractError(
                f"checkpoint schema hash {header['schema_hash']} does not match schema {schema.hash()}"
            )
        model = build_variant(header["variant"], schema, ModelHyper.from_dict(header["hyper"]), seed=0)
        updates = {}
        for name, shape in header["params"]:
            n = int(np.prod(shape)) if shape else 1
            buf = fh.read(8 * n)
            if len(buf) != 8 * n:
                raise ContractError(f"checkpoint truncated while reading {name}")
            updates[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
        P.set_arrays(model, updates)
    return model
