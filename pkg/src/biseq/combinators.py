"""Context/target combination schemes and the 19 concrete architectures.

Six schemes combine a context encoding with a target encoding:

* ``concat`` - softmax over [context ; target] features
* ``bilinear`` - one bilinear form per class, ``ctx . W_c . tgt (+ b_c)``
* ``conditional_state`` - context vector is the target RNN's initial state
* ``conditional_input`` - context vector is appended to every target input
* ``conditional_state_input`` - both of the above
* ``concat_sentence`` - a single RNN over ``context SEP target``
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .embed import PAD_ID, SEP_ID, EmbeddingTable, Vocabulary, lookup, random_table, tokenize
from .encoders import (
    CELLS,
    CnnParams,
    RnnParams,
    encode_cbow,
    encode_cnn,
    encode_rnn,
    glorot,
    init_cnn,
    init_rnn,
)
from .errors import ConfigurationError, DimensionError
from .tensor import Node

COMBINATIONS = (
    "concat",
    "bilinear",
    "conditional_state",
    "conditional_input",
    "conditional_state_input",
    "concat_sentence",
)
CONDITIONAL = ("conditional_state", "conditional_input", "conditional_state_input")
STATE_FED = ("conditional_state", "conditional_state_input")
INPUT_FED = ("conditional_input", "conditional_state_input")
CONTEXT_ENCODERS = ("cbow", "rnn", "cnn", "none")
TARGET_ENCODERS = ("rnn", "cnn", "none")


@dataclass(frozen=True)
class ModelSpec:
    combination: str = "concat"
    context_encoder: str = "rnn"
    target_encoder: str = "rnn"
    cell: str = "gru"
    rnn_size: int = 48
    filter_windows: tuple[int, ...] = (3, 4, 5)
    num_filters: int = 16
    l2_coeff: float = 0.01
    learning_rate: float = 0.001
    num_classes: int = 2
    max_ctx_len: int = 14
    max_tgt_len: int = 60
    embed_dim: int = 50
    bilinear_bias: bool = True
    seed: int = 0

    def replace(self, **changes) -> "ModelSpec":
        return dataclasses.replace(self, **changes)

    @property
    def uses_rnn(self) -> bool:
        return (
            self.combination in CONDITIONAL
            or self.combination == "concat_sentence"
            or "rnn" in (self.context_encoder, self.target_encoder)
        )

    @property
    def uses_cnn(self) -> bool:
        return "cnn" in (self.context_encoder, self.target_encoder)

    @property
    def name(self) -> str:
        if self.combination == "concat_sentence":
            return "concat_sentence"
        return f"{self.combination}/{self.context_encoder}/{self.target_encoder}"

    def to_kv(self) -> str:
        return " ".join(f"{k}={v}" for k, v in spec_to_row(self).items())

    @classmethod
    def from_kv(cls, text: str, base: "ModelSpec | None" = None) -> "ModelSpec":
        pairs = {}
        for token in text.split():
            key, sep, value = token.partition("=")
            if not sep:
                raise ConfigurationError(f"expected key=value, got {token!r}")
            pairs[key] = value
        return spec_from_row(pairs, base)


# serialization key -> (field name, parser)
def _parse_windows(v) -> tuple[int, ...]:
    if isinstance(v, (tuple, list)):
        return tuple(int(x) for x in v)
    return tuple(int(x) for x in str(v).split("+") if x)


def _parse_bool(v) -> bool:
    if isinstance(v, bool):
        return v
    s = str(v).lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


SPEC_KEYS = {
    "combination": ("combination", str),
    "context": ("context_encoder", str),
    "target": ("target_encoder", str),
    "cell": ("cell", str),
    "rnn_size": ("rnn_size", int),
    "windows": ("filter_windows", _parse_windows),
    "filters": ("num_filters", int),
    "l2": ("l2_coeff", float),
    "lr": ("learning_rate", float),
    "classes": ("num_classes", int),
    "ctx_len": ("max_ctx_len", int),
    "tgt_len": ("max_tgt_len", int),
    "embed_dim": ("embed_dim", int),
    "bilinear_bias": ("bilinear_bias", _parse_bool),
    "seed": ("seed", int),
}


def _fmt(value) -> str:
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        s = f"{value:g}"
        return s if float(s) == value else repr(value)
    if isinstance(value, tuple):
        return "+".join(str(x) for x in value)
    return str(value)


def spec_to_row(spec: ModelSpec) -> dict[str, str]:
    return {key: _fmt(getattr(spec, fname)) for key, (fname, _) in SPEC_KEYS.items()}


def spec_from_row(row: dict, base: ModelSpec | None = None) -> ModelSpec:
    """Build a spec from serialization keys; absent keys come from ``base``."""
    changes = {}
    for key, value in row.items():
        if key not in SPEC_KEYS:
            raise ConfigurationError(f"unknown spec key {key!r}")
        fname, parse = SPEC_KEYS[key]
        try:
            changes[fname] = parse(value)
        except ValueError:
            raise ConfigurationError(f"bad value {value!r} for {key}") from None
    return dataclasses.replace(base or ModelSpec(), **changes)


def context_dim(spec: ModelSpec, d_x: int) -> int:
    enc = spec.context_encoder
    if enc == "cbow":
        return d_x
    if enc == "rnn":
        return spec.rnn_size
    if enc == "cnn":
        return spec.num_filters * len(spec.filter_windows)
    return 0


def target_dim(spec: ModelSpec) -> int:
    if spec.target_encoder == "rnn":
        return spec.rnn_size
    if spec.target_encoder == "cnn":
        return spec.num_filters * len(spec.filter_windows)
    return 0


def validate_spec(spec: ModelSpec) -> list[str]:
    """Every constraint the spec violates; an empty list means valid."""
    errs = []
    comb, ctx, tgt = spec.combination, spec.context_encoder, spec.target_encoder
    if comb not in COMBINATIONS:
        errs.append(f"unknown combination {comb!r}")
    if ctx not in CONTEXT_ENCODERS:
        errs.append(f"unknown context encoder {ctx!r}")
    if tgt not in TARGET_ENCODERS:
        errs.append(f"unknown target encoder {tgt!r}")
    if spec.cell not in CELLS:
        errs.append(f"unknown cell {spec.cell!r}")

    if comb == "concat_sentence":
        if ctx != "none" or tgt != "none":
            errs.append("(c) concat_sentence uses a single RNN: context and target encoders must be 'none'")
    elif comb in COMBINATIONS:
        if ctx == "none" or tgt == "none":
            errs.append(f"(c) encoder 'none' is only valid with concat_sentence, not {comb}")
    if comb in CONDITIONAL:
        if tgt != "rnn":
            errs.append(f"(a) {comb} needs an RNN target encoder, got {tgt!r}")
        if ctx not in ("rnn", "cnn"):
            errs.append(f"(a) {comb} needs an RNN or CNN context encoder, got {ctx!r}")
    if ctx == "cbow" and comb not in ("concat", "bilinear"):
        errs.append(f"(b) cbow context is only used with concat or bilinear, not {comb}")
    if comb in STATE_FED and ctx == "cnn":
        out = spec.num_filters * len(spec.filter_windows)
        if out != spec.rnn_size:
            errs.append(
                f"(d) {comb}: CNN context output {spec.num_filters}x{len(spec.filter_windows)}={out} "
                f"must equal rnn_size {spec.rnn_size}"
            )

    if spec.rnn_size < 1:
        errs.append("rnn_size must be positive")
    if spec.num_filters < 1:
        errs.append("filters must be positive")
    if not spec.filter_windows or min(spec.filter_windows) < 1:
        errs.append("windows must be a non-empty set of positive sizes")
    elif len(set(spec.filter_windows)) != len(spec.filter_windows):
        errs.append("windows must not repeat")
    if spec.num_classes < 2:
        errs.append("classes must be at least 2")
    if spec.l2_coeff < 0:
        errs.append("l2 must be non-negative")
    if spec.learning_rate < 0:
        errs.append("lr must be non-negative")
    if spec.max_ctx_len < 1 or spec.max_tgt_len < 1:
        errs.append("ctx_len and tgt_len must be positive")
    if spec.embed_dim < 1:
        errs.append("embed_dim must be positive")
    return errs


def enumerate_architectures(base: ModelSpec | None = None) -> list[ModelSpec]:
    """The 19 architectures: 12 concat/bilinear, 6 conditional, 1 concat_sentence.

    State-fed conditional variants with a CNN context get
    ``num_filters = rnn_size / |windows|`` so the context output matches the
    target RNN state.
    """
    base = base or ModelSpec()
    specs = []
    for comb in ("concat", "bilinear"):
        for ctx in ("cbow", "rnn", "cnn"):
            for tgt in ("rnn", "cnn"):
                specs.append(base.replace(combination=comb, context_encoder=ctx, target_encoder=tgt))
    for comb in CONDITIONAL:
        for ctx in ("rnn", "cnn"):
            spec = base.replace(combination=comb, context_encoder=ctx, target_encoder="rnn")
            if comb in STATE_FED and ctx == "cnn":
                spec = spec.replace(num_filters=matched_filters(base))
            specs.append(spec)
    specs.append(base.replace(combination="concat_sentence", context_encoder="none", target_encoder="none"))
    for spec in specs:
        errs = validate_spec(spec)
        if errs:
            raise ConfigurationError(f"{spec.name}: " + "; ".join(errs))
    return specs


def matched_filters(spec: ModelSpec) -> int:
    n = len(spec.filter_windows)
    if n == 0 or spec.rnn_size % n:
        raise ConfigurationError(
            f"rnn_size {spec.rnn_size} is not divisible by the {n} filter windows; "
            "no CNN context can feed the target RNN state"
        )
    return spec.rnn_size // n


# --------------------------------------------------------------------------
# models
# --------------------------------------------------------------------------

@dataclass
class Model:
    spec: ModelSpec
    vocab: Vocabulary
    embedding: Node
    context: RnnParams | CnnParams | None = None
    target: RnnParams | CnnParams | None = None
    head_w: Node | None = None
    head_b: Node | None = None
    bilinear_w: Node | None = None
    bilinear_b: Node | None = None
    extra: dict = field(default_factory=dict)

    def parameters(self) -> dict[str, Node]:
        """Named parameter nodes in a fixed order."""
        out = {"embedding": self.embedding}
        for prefix, enc in (("ctx", self.context), ("tgt", self.target)):
            if enc is not None:
                for k, node in enc.nodes().items():
                    out[f"{prefix}.{k}"] = node
        for name in ("head_w", "head_b", "bilinear_w", "bilinear_b"):
            node = getattr(self, name)
            if node is not None:
                out[name] = node
        return out

    def trainable(self) -> dict[str, Node]:
        return {k: v for k, v in self.parameters().items() if v.requires_grad}

    def l2_nodes(self) -> list[Node]:
        """CNN filter weights (biases excluded)."""
        return [
            enc.filters[h]
            for enc in (self.context, self.target)
            if isinstance(enc, CnnParams)
            for h in enc.windows
        ]

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.value.copy() for k, v in self.parameters().items()}

    def restore(self, snap: dict[str, np.ndarray]) -> None:
        for k, node in self.parameters().items():
            node.value[...] = snap[k]

    def zero_grad(self) -> None:
        for node in self.parameters().values():
            node.grad = None


def build_model(
    spec: ModelSpec,
    vocab: Vocabulary,
    embedding: EmbeddingTable | None = None,
    rng: np.random.Generator | None = None,
) -> Model:
    """Allocate and initialise every parameter of ``spec``.

    A supplied embedding table fixes ``embed_dim``; otherwise the table is
    drawn uniform in [-0.25, 0.25].
    """
    if embedding is not None and embedding.dim != spec.embed_dim:
        spec = spec.replace(embed_dim=embedding.dim)
    errs = validate_spec(spec)
    if errs:
        raise ConfigurationError(f"invalid spec {spec.name}: " + "; ".join(errs))
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    if embedding is None:
        embedding = random_table(vocab, spec.embed_dim, rng)
    elif embedding.matrix.shape[0] != len(vocab):
        raise DimensionError(
            f"embedding has {embedding.matrix.shape[0]} rows but vocabulary has {len(vocab)} entries"
        )
    d_x = embedding.dim
    S, C = spec.rnn_size, spec.num_classes
    model = Model(spec, vocab, embedding.as_node())

    if spec.combination == "concat_sentence":
        model.target = init_rnn(spec.cell, d_x, S, rng)
        feat = S
    else:
        if spec.context_encoder == "rnn":
            model.context = init_rnn(spec.cell, d_x, S, rng)
        elif spec.context_encoder == "cnn":
            model.context = init_cnn(spec.filter_windows, spec.num_filters, d_x, rng)
        d_ctx = context_dim(spec, d_x)
        if spec.target_encoder == "cnn":
            model.target = init_cnn(spec.filter_windows, spec.num_filters, d_x, rng)
        else:
            d_in = d_x + (d_ctx if spec.combination in INPUT_FED else 0)
            model.target = init_rnn(spec.cell, d_in, S, rng)
        if spec.combination == "concat":
            feat = d_ctx + target_dim(spec)
        elif spec.combination == "bilinear":
            d_tgt = target_dim(spec)
            model.bilinear_w = T.parameter(glorot(rng, d_ctx, d_tgt, (C, d_ctx, d_tgt)), "bilinear_w")
            if spec.bilinear_bias:
                model.bilinear_b = T.parameter(np.zeros(C), "bilinear_b")
            return model
        else:
            feat = S
    model.head_w = T.parameter(glorot(rng, feat, C), "head_w")
    model.head_b = T.parameter(np.zeros(C), "head_b")
    return model


def check_model(model: Model) -> list[str]:
    """Shape consistency of an allocated model against its spec."""
    spec = model.spec
    errs = validate_spec(spec)
    d_x = model.embedding.shape[1]
    C = spec.num_classes
    if spec.combination == "bilinear":
        w = model.bilinear_w
        want = (C, context_dim(spec, d_x), target_dim(spec))
        if w is None or w.shape != want:
            got = None if w is None else w.shape
            errs.append(f"bilinear needs {C} matrices of shape {want[1:]}, got {got}")
        if spec.bilinear_bias and (model.bilinear_b is None or model.bilinear_b.shape != (C,)):
            errs.append(f"bilinear bias must have {C} entries")
    else:
        if model.head_w is None or model.head_w.shape[1] != C:
            errs.append(f"classifier head must have {C} outputs")
    if spec.combination in INPUT_FED and isinstance(model.target, RnnParams):
        want_in = d_x + context_dim(spec, d_x)
        if model.target.d_in != want_in:
            errs.append(f"target RNN input dim {model.target.d_in} != {want_in}")
    return errs


def _encode(enc, embedded: Node, mask, **kw) -> Node:
    if enc is None:
        return encode_cbow(embedded, mask)
    if isinstance(enc, CnnParams):
        return encode_cnn(embedded, mask, enc)
    return encode_rnn(embedded, mask, enc, **kw)


def join_with_separator(ctx_ids, ctx_mask, tgt_ids, tgt_mask) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise ``context SEP target`` id matrix, right-padded, with its mask."""
    ctx_len = np.asarray(ctx_mask, dtype=bool).sum(axis=1)
    tgt_len = np.asarray(tgt_mask, dtype=bool).sum(axis=1)
    total = ctx_len + tgt_len + 1
    B = len(total)
    ids = np.full((B, int(total.max())), PAD_ID, dtype=np.int64)
    for i in range(B):
        a, b = ctx_len[i], tgt_len[i]
        ids[i, :a] = ctx_ids[i, :a]
        ids[i, a] = SEP_ID
        ids[i, a + 1:a + 1 + b] = tgt_ids[i, :b]
    mask = np.arange(ids.shape[1])[None, :] < total[:, None]
    return ids, mask


def forward_batch(model: Model, ctx_ids, ctx_mask, tgt_ids, tgt_mask) -> Node:
    """Logits ``[B, num_classes]`` for a padded batch."""
    spec = model.spec
    E = model.embedding
    comb = spec.combination
    if comb == "concat_sentence":
        ids, mask = join_with_separator(ctx_ids, ctx_mask, tgt_ids, tgt_mask)
        state = encode_rnn(lookup(E, ids), mask, model.target)
        return T.add(T.matmul(state, model.head_w), model.head_b)

    ctx_vec = _encode(model.context, lookup(E, ctx_ids), ctx_mask)
    tgt_emb = lookup(E, tgt_ids)
    if comb in CONDITIONAL:
        state = encode_rnn(
            tgt_emb,
            tgt_mask,
            model.target,
            init_state=ctx_vec if comb in STATE_FED else None,
            aux_input=ctx_vec if comb in INPUT_FED else None,
        )
        return T.add(T.matmul(state, model.head_w), model.head_b)
    tgt_vec = _encode(model.target, tgt_emb, tgt_mask)
    if comb == "concat":
        feats = T.concat(ctx_vec, tgt_vec, axis=1)
        return T.add(T.matmul(feats, model.head_w), model.head_b)
    logits = T.bilinear(ctx_vec, model.bilinear_w, tgt_vec)
    if model.bilinear_b is not None:
        logits = T.add(logits, model.bilinear_b)
    return logits


def as_ids(model: Model, seq, max_len: int) -> list[int]:
    """Token ids for text or an id sequence, truncated to ``max_len``."""
    if isinstance(seq, str):
        seq = model.vocab.encode(tokenize(seq))
    return [int(i) for i in seq][:max_len]


def forward_pair(model: Model, context_ids, target_ids) -> Node:
    """Logits ``[num_classes]`` for one (context, target) pair; long inputs are truncated."""
    c = as_ids(model, context_ids, model.spec.max_ctx_len)
    t = as_ids(model, target_ids, model.spec.max_tgt_len)
    ctx = np.array([c], dtype=np.int64)
    tgt = np.array([t], dtype=np.int64)
    logits = forward_batch(model, ctx, np.ones_like(ctx, dtype=bool), tgt, np.ones_like(tgt, dtype=bool))
    return T.select(logits, 0, axis=0)


def predict_proba(model: Model, context, target) -> np.ndarray:
    """Class probabilities for one pair (text or id sequences)."""
    return T.softmax(forward_pair(model, context, target).value)
