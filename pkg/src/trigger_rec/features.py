"""Feature schema, integer-ID encoding, embedding tables, and batch assembly.

Raw impressions arrive as tab-separated text lines; samples become integer-ID
records against a declared schema; embedding lookup turns ID batches into
dense category representations with padded behavior rows zeroed out.

Index 0 of every vocabulary is the reserved out-of-vocabulary bucket, and the
matching embedding row starts at zero.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, ParseError, SchemaError

CATEGORIES = ("user", "behavior", "trigger", "target", "context")


@dataclass(frozen=True)
class FieldSpec:
    name: str
    vocab_size: int
    dim: int
    table: str = ""  # fields with the same non-empty key share one table

    def table_key(self, category: str) -> str:
        return self.table if self.table else f"{category}.{self.name}"


@dataclass
class FeatureSchema:
    """Field layout per feature category plus sequence-length policy."""

    user: list
    behavior: list
    trigger: list
    target: list
    context: list
    max_behavior_len: int = 50
    hsm_attributes: tuple = ("category", "destination", "tag")

    def fields(self, category: str) -> list:
        return getattr(self, category)

    def category_dim(self, category: str) -> int:
        return sum(f.dim for f in self.fields(category))

    @property
    def behavior_dim(self) -> int:
        return self.category_dim("behavior")

    def hash(self) -> str:
        return hashlib.sha256(serialize_schema(self).encode()).hexdigest()[:16]


def build_schema(
    user,
    behavior,
    trigger,
    target,
    context,
    max_behavior_len: int = 50,
    hsm_attributes=("category", "destination", "tag"),
) -> FeatureSchema:
    """Validate a field layout and return the schema.

    Trigger and target must declare identical fields (name, vocab, dim) so
    their embeddings can be fused element-wise, and the trigger/behavior
    dims must agree so behaviors can be scored against the trigger/target.
    """
    schema = FeatureSchema(
        user=list(user),
        behavior=list(behavior),
        trigger=list(trigger),
        target=list(target),
        context=list(context),
        max_behavior_len=int(max_behavior_len),
        hsm_attributes=tuple(hsm_attributes),
    )
    for cat in CATEGORIES:
        specs = schema.fields(cat)
        if cat != "context" and not specs:
            raise SchemaError(f"category {cat!r} declares no fields")
        for f in specs:
            if f.vocab_size < 2:
                raise SchemaError(f"{cat}.{f.name}: vocab size {f.vocab_size} < 2 (index 0 is reserved for OOV)")
            if f.dim < 1:
                raise SchemaError(f"{cat}.{f.name}: embedding dim must be positive")
    trig = [(f.name, f.vocab_size, f.dim) for f in schema.trigger]
    targ = [(f.name, f.vocab_size, f.dim) for f in schema.target]
    if trig != targ:
        raise SchemaError(f"trigger fields {trig} != target fields {targ}")
    # trigger and target always share tables, whatever the declaration says
    shared = []
    for ft, fi in zip(schema.trigger, schema.target):
        key = ft.table if ft.table else f"item.{ft.name}"
        shared.append((ft, fi, key))
    schema.trigger = [FieldSpec(ft.name, ft.vocab_size, ft.dim, key) for ft, _, key in shared]
    schema.target = [FieldSpec(fi.name, fi.vocab_size, fi.dim, key) for _, fi, key in shared]
    if schema.behavior_dim != schema.category_dim("trigger"):
        raise SchemaError(
            f"behavior dim {schema.behavior_dim} != trigger/target dim "
            f"{schema.category_dim('trigger')}; behaviors must be scoreable against the trigger"
        )
    if schema.max_behavior_len < 1:
        raise SchemaError("max_behavior_len must be >= 1")
    for attr in schema.hsm_attributes:
        if attr not in {f.name for f in schema.behavior}:
            raise SchemaError(f"hard-match attribute {attr!r} is not a behavior field")
        if attr not in {f.name for f in schema.trigger}:
            raise SchemaError(f"hard-match attribute {attr!r} is not a trigger field")
    return schema


# ---------------------------------------------------------------------------
# schema file format: one `key value` pair or `field` row per line


def serialize_schema(schema: FeatureSchema) -> str:
    lines = [
        f"max_behavior_len {schema.max_behavior_len}",
        f"hsm_attributes {','.join(schema.hsm_attributes)}",
    ]
    for cat in CATEGORIES:
        lines.append(f"[{cat}]")
        for f in schema.fields(cat):
            table = f.table if f.table else "-"
            lines.append(f"field {f.name} {f.vocab_size} {f.dim} {table}")
    return "\n".join(lines) + "\n"


def parse_schema(text: str) -> FeatureSchema:
    cats = {c: [] for c in CATEGORIES}
    max_len = 50
    hsm_attrs = ("category", "destination", "tag")
    current = None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            if current not in cats:
                raise ParseError(f"unknown category {current!r}", no)
            continue
        parts = line.split()
        if parts[0] == "max_behavior_len":
            max_len = int(parts[1])
        elif parts[0] == "hsm_attributes":
            hsm_attrs = tuple(parts[1].split(","))
        elif parts[0] == "field":
            if current is None:
                raise ParseError("field declared outside a category", no)
            if len(parts) != 5:
                raise ParseError(f"field needs 4 values, got {len(parts) - 1}", no)
            table = "" if parts[4] == "-" else parts[4]
            try:
                cats[current].append(FieldSpec(parts[1], int(parts[2]), int(parts[3]), table))
            except ValueError:
                raise ParseError(f"malformed integer in field row: {line!r}", no) from None
        else:
            raise ParseError(f"unrecognized schema line: {line!r}", no)
    return build_schema(
        cats["user"], cats["behavior"], cats["trigger"], cats["target"], cats["context"],
        max_behavior_len=max_len, hsm_attributes=hsm_attrs,
    )


def load_schema(path) -> FeatureSchema:
    with open(path, encoding="utf-8") as fh:
        return parse_schema(fh.read())


def save_schema(schema: FeatureSchema, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_schema(schema))


# ---------------------------------------------------------------------------
# samples


@dataclass
class EncodedSample:
    """One impression, fully reduced to integer IDs.

    behavior_ids holds only the valid rows (most recent last); padding to
    max_behavior_len happens at batch time.
    """

    user_ids: np.ndarray      # (n_user_fields,)
    behavior_ids: np.ndarray  # (t_valid, n_behavior_fields)
    trigger_ids: np.ndarray   # (n_item_fields,)
    target_ids: np.ndarray    # (n_item_fields,)
    context_ids: np.ndarray   # (n_context_fields,)
    label: int
    aux_label: int

    @property
    def t_valid(self) -> int:
        return self.behavior_ids.shape[0]

    def __eq__(self, other):
        return (
            isinstance(other, EncodedSample)
            and np.array_equal(self.user_ids, other.user_ids)
            and np.array_equal(self.behavior_ids, other.behavior_ids)
            and np.array_equal(self.trigger_ids, other.trigger_ids)
            and np.array_equal(self.target_ids, other.target_ids)
            and np.array_equal(self.context_ids, other.context_ids)
            and self.label == other.label
            and self.aux_label == other.aux_label
        )


def _encode_ids(values, specs, line_no):
    out = np.zeros(len(specs), dtype=np.int64)
    for i, (v, spec) in enumerate(zip(values, specs)):
        out[i] = v if 0 <= v < spec.vocab_size else 0
    return out


def _parse_ints(parts, expected, what, line_no):
    if len(parts) != expected:
        raise ParseError(f"{what}: expected {expected} values, got {len(parts)}", line_no)
    try:
        return [int(p) for p in parts]
    except ValueError:
        raise ParseError(f"{what}: malformed integer in {parts!r}", line_no) from None


def encode_sample(line: str, schema: FeatureSchema, line_no: int | None = None) -> EncodedSample:
    """Encode one tab-separated record.

    Columns: user fields | behavior tuple list | trigger fields | target
    fields | context fields | label | aux label. Behaviors are
    `(f1,...,fk,timestamp)` tuples, comma separated, ordered by timestamp
    (ties keep file order); only the most recent max_behavior_len survive.
    Out-of-vocabulary values map to index 0.
    """
    cols = line.rstrip("\n").split("\t")
    if len(cols) != 7:
        raise ParseError(f"expected 7 tab-separated columns, got {len(cols)}", line_no)
    user_col, behavior_col, trigger_col, target_col, context_col, y_col, yt_col = cols

    user = _parse_ints(user_col.split(",") if user_col else [], len(schema.user), "user", line_no)
    trigger = _parse_ints(trigger_col.split(","), len(schema.trigger), "trigger", line_no)
    target = _parse_ints(target_col.split(","), len(schema.target), "target", line_no)
    n_ctx = len(schema.context)
    context = _parse_ints(context_col.split(",") if context_col else [], n_ctx, "context", line_no)

    n_beh_fields = len(schema.behavior)
    rows = []
    if behavior_col:
        for tup in behavior_col.split("),("):
            tup = tup.strip("()")
            vals = _parse_ints(tup.split(","), n_beh_fields + 1, "behavior tuple", line_no)
            rows.append(vals)
    rows.sort(key=lambda r: r[-1])  # stable: ties keep input order
    rows = rows[-schema.max_behavior_len:]
    behavior = np.zeros((len(rows), n_beh_fields), dtype=np.int64)
    for t, vals in enumerate(rows):
        behavior[t] = _encode_ids(vals[:-1], schema.behavior, line_no)

    try:
        y, y_t = int(y_col), int(yt_col)
    except ValueError:
        raise ParseError(f"malformed label columns {y_col!r}/{yt_col!r}", line_no) from None
    if y not in (0, 1) or y_t not in (0, 1):
        raise ParseError(f"labels must be 0/1, got {y}/{y_t}", line_no)

    return EncodedSample(
        user_ids=_encode_ids(user, schema.user, line_no),
        behavior_ids=behavior,
        trigger_ids=_encode_ids(trigger, schema.trigger, line_no),
        target_ids=_encode_ids(target, schema.target, line_no),
        context_ids=_encode_ids(context, schema.context, line_no),
        label=y,
        aux_label=y_t,
    )


def format_sample(s: EncodedSample) -> str:
    """Inverse of encode_sample; synthetic timestamps are row indices."""
    tuples = ",".join(
        "(" + ",".join(str(v) for v in row) + f",{t})" for t, row in enumerate(s.behavior_ids)
    )
    return "\t".join([
        ",".join(str(v) for v in s.user_ids),
        tuples,
        ",".join(str(v) for v in s.trigger_ids),
        ",".join(str(v) for v in s.target_ids),
        ",".join(str(v) for v in s.context_ids),
        str(s.label),
        str(s.aux_label),
    ])


# ---------------------------------------------------------------------------
# batches


@dataclass
class Batch:
    user_ids: np.ndarray      # (B, Fu)
    behavior_ids: np.ndarray  # (B, T_max, Fb), padded with 0
    mask: np.ndarray          # (B, T_max) bool, True where a behavior exists
    trigger_ids: np.ndarray   # (B, Fi)
    target_ids: np.ndarray    # (B, Fi)
    context_ids: np.ndarray   # (B, Fc)
    labels: np.ndarray        # (B,)
    aux_labels: np.ndarray    # (B,)

    @property
    def size(self) -> int:
        return self.labels.shape[0]


def pad_and_mask(samples, schema: FeatureSchema) -> Batch:
    """Stack samples, padding behaviors to max_behavior_len with OOV rows."""
    if not samples:
        raise ContractError("pad_and_mask needs a non-empty sample list")
    n = len(samples)
    t_max = schema.max_behavior_len
    fb = len(schema.behavior)
    behavior = np.zeros((n, t_max, fb), dtype=np.int64)
    mask = np.zeros((n, t_max), dtype=bool)
    for i, s in enumerate(samples):
        tv = min(s.t_valid, t_max)
        behavior[i, :tv] = s.behavior_ids[-tv:]
        mask[i, :tv] = True
    return Batch(
        user_ids=np.stack([s.user_ids for s in samples]),
        behavior_ids=behavior,
        mask=mask,
        trigger_ids=np.stack([s.trigger_ids for s in samples]),
        target_ids=np.stack([s.target_ids for s in samples]),
        context_ids=np.stack([s.context_ids for s in samples]),
        labels=np.array([s.label for s in samples], dtype=np.int64),
        aux_labels=np.array([s.aux_label for s in samples], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# embedding tables


@dataclass
class EmbeddingTables:
    """Learnable id -> vector maps, one ndarray per (shared) table key."""

    tables: dict = field(default_factory=dict)  # key -> (vocab, dim) ndarray
    field_keys: dict = field(default_factory=dict)  # category -> [table key per field]

    def named_arrays(self):
        for key in self.tables:
            yield f"emb.{key}", self.tables[key]


def init_tables(schema: FeatureSchema, rng: np.random.Generator) -> EmbeddingTables:
    """Uniform init in [-1/sqrt(dim), 1/sqrt(dim)]; row 0 (OOV) is zero."""
    tables = {}
    field_keys = {}
    for cat in CATEGORIES:
        keys = []
        for f in schema.fields(cat):
            key = f.table_key(cat)
            keys.append(key)
            if key in tables:
                if tables[key].shape != (f.vocab_size, f.dim):
                    raise SchemaError(
                        f"shared table {key!r} declared with shapes "
                        f"{tables[key].shape} and {(f.vocab_size, f.dim)}"
                    )
                continue
            bound = 1.0 / np.sqrt(f.dim)
            arr = rng.uniform(-bound, bound, size=(f.vocab_size, f.dim))
            arr[0] = 0.0
            tables[key] = arr
        field_keys[cat] = keys
    return EmbeddingTables(tables=tables, field_keys=field_keys)


def lookup_category(tables: EmbeddingTables, category: str, ids: np.ndarray) -> T.Tensor:
    """Concatenate per-field embeddings: ids (..., F) -> (..., sum of dims).

    `tables` must be tape-bound (its arrays wrapped as Tensors) so lookups
    are differentiable into the touched rows only.
    """
    keys = tables.field_keys[category]
    parts = [T.gather_rows(tables.tables[key], ids[..., i]) for i, key in enumerate(keys)]
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


def lookup_embeddings(tables: EmbeddingTables, batch: Batch) -> dict:
    """Per-category dense representations for a batch.

    Returns tensors keyed 'user' (B, Du), 'behavior' (B, T, D) with padded
    rows zeroed, 'trigger'/'target' (B, D), 'context' (B, Dc).
    """
    e_b = lookup_category(tables, "behavior", batch.behavior_ids)
    e_b = T.mask_zero(e_b, batch.mask[:, :, None])
    out = {
        "user": lookup_category(tables, "user", batch.user_ids),
        "behavior": e_b,
        "trigger": lookup_category(tables, "trigger", batch.trigger_ids),
        "target": lookup_category(tables, "target", batch.target_ids),
    }
    if tables.field_keys["context"]:
        out["context"] = lookup_category(tables, "context", batch.context_ids)
    return out
