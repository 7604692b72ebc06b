"""Mini-batch training with Adam, early stopping and per-epoch history."""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .combinators import Model, ModelSpec, build_model, forward_batch, validate_spec
from .embed import PAD_ID, EmbeddingTable, Vocabulary, build_vocab, tokenize
from .errors import ConfigurationError, InputError, NumericError, UndefinedMetricError
from .metrics import accuracy, average_precision, roc_auc

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
SELECTION_METRICS = ("avgp", "auc", "accuracy")


@dataclass(frozen=True)
class SequencePair:
    context: str
    target: str
    label: int
    group: str = ""


@dataclass
class Batch:
    ctx_ids: np.ndarray
    ctx_mask: np.ndarray
    tgt_ids: np.ndarray
    tgt_mask: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return len(self.labels)


@dataclass
class TrainConfig:
    """Optimisation settings; ``None`` for learning rate, L2 or seed means "take it from the spec"."""
    learning_rate: float | None = None
    batch_size: int = 64
    max_epochs: int = 50
    patience: int = 5
    l2_coeff: float | None = None
    seed: int | None = None
    selection_metric: str = "avgp"
    clip_norm: float | None = 5.0
    pos_weight: float | None = None
    min_count: int = 1
    record_time: bool = False

    def check(self) -> None:
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ConfigurationError("batch_size, max_epochs and patience must be positive")
        if self.patience > self.max_epochs:
            raise ConfigurationError("patience cannot exceed max_epochs")
        if (self.learning_rate or 0) < 0 or (self.l2_coeff or 0) < 0:
            raise ConfigurationError("learning_rate and l2_coeff must be non-negative")
        if self.selection_metric not in SELECTION_METRICS:
            raise ConfigurationError(
                f"unknown selection metric {self.selection_metric!r}; expected one of {SELECTION_METRICS}"
            )
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ConfigurationError("clip_norm must be positive or None")
        if self.pos_weight is not None and self.pos_weight <= 0:
            raise ConfigurationError("pos_weight must be positive")

    def resolve(self, spec: ModelSpec) -> "TrainConfig":
        """Copy with every unset field filled from ``spec``."""
        return dataclasses.replace(
            self,
            learning_rate=spec.learning_rate if self.learning_rate is None else self.learning_rate,
            l2_coeff=spec.l2_coeff if self.l2_coeff is None else self.l2_coeff,
            seed=spec.seed if self.seed is None else self.seed,
        )


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------

EncodedPair = tuple[Sequence[int], Sequence[int], int]


def encode_pairs(vocab: Vocabulary, pairs: Sequence[SequencePair]) -> list[EncodedPair]:
    return [(vocab.encode(tokenize(p.context)), vocab.encode(tokenize(p.target)), p.label) for p in pairs]


def _pad(rows: Sequence[Sequence[int]], max_len: int) -> tuple[np.ndarray, np.ndarray]:
    width = max(min(len(r), max_len) for r in rows)
    ids = np.full((len(rows), width), PAD_ID, dtype=np.int64)
    for i, r in enumerate(rows):
        r = list(r)[:max_len]
        ids[i, :len(r)] = r
    lengths = np.array([min(len(r), max_len) for r in rows])
    mask = np.arange(width)[None, :] < lengths[:, None]
    return ids, mask


def pad_batch(pairs: Sequence[EncodedPair], max_ctx_len: int, max_tgt_len: int) -> Batch:
    """Truncate on the right to the max lengths and right-pad with PAD."""
    if not pairs:
        raise InputError("cannot build an empty batch")
    for i, (c, t, _) in enumerate(pairs):
        if len(c) == 0 or len(t) == 0:
            which = "context" if len(c) == 0 else "target"
            raise InputError(f"record {i}: empty {which}")
    ctx_ids, ctx_mask = _pad([p[0] for p in pairs], max_ctx_len)
    tgt_ids, tgt_mask = _pad([p[1] for p in pairs], max_tgt_len)
    labels = np.array([p[2] for p in pairs], dtype=np.int64)
    return Batch(ctx_ids, ctx_mask, tgt_ids, tgt_mask, labels)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, T.Node], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """One in-place Adam update of every parameter that has a gradient."""
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name}; step aborted")
    state.t += 1
    t = state.t
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        m, v = state.m[name], state.v[name]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)


def clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``; returns the prior norm."""
    total = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


# --------------------------------------------------------------------------
# training and scoring
# --------------------------------------------------------------------------

def _batches(encoded: Sequence[EncodedPair], spec: ModelSpec, size: int, order=None):
    idx = np.arange(len(encoded)) if order is None else order
    for start in range(0, len(idx), size):
        chunk = [encoded[i] for i in idx[start:start + size]]
        yield pad_batch(chunk, spec.max_ctx_len, spec.max_tgt_len)


def batch_loss(model: Model, batch: Batch, l2_coeff: float = 0.0, class_weights=None) -> T.Node:
    logits = forward_batch(model, batch.ctx_ids, batch.ctx_mask, batch.tgt_ids, batch.tgt_mask)
    loss = T.softmax_cross_entropy(logits, batch.labels, class_weights)
    if l2_coeff > 0:
        for w in model.l2_nodes():
            loss = T.add(loss, T.scale(T.sum_squares(w), l2_coeff))
    return loss


def predict_encoded(model: Model, encoded: Sequence[EncodedPair], batch_size: int = 256) -> np.ndarray:
    """Class-probability rows for already-encoded pairs, in input order."""
    if not encoded:
        return np.zeros((0, model.spec.num_classes))
    rows = []
    for batch in _batches(encoded, model.spec, batch_size):
        logits = forward_batch(model, batch.ctx_ids, batch.ctx_mask, batch.tgt_ids, batch.tgt_mask)
        rows.append(T.softmax(logits.value))
    return np.concatenate(rows, axis=0)


def score_dataset(model: Model, pairs: Sequence[SequencePair]):
    """Positive-class scores for binary models, probability rows otherwise."""
    probs = predict_encoded(model, encode_pairs(model.vocab, pairs))
    if model.spec.num_classes == 2:
        return probs[:, 1].copy()
    return probs


def selection_score(metric: str, probs: np.ndarray, labels: np.ndarray) -> float:
    if metric == "accuracy" or probs.shape[1] != 2:
        return accuracy(probs, labels)
    fn = average_precision if metric == "avgp" else roc_auc
    try:
        return fn(probs[:, 1], labels)
    except UndefinedMetricError:
        log.warning("%s undefined on the validation set; selecting on accuracy", metric)
        return accuracy(probs, labels)


@dataclass
class TrainResult:
    model: Model
    history: list[dict]
    best_epoch: int
    best_metric: float

    def write_history(self, path, run: str | None = None, record_time: bool = False) -> None:
        write_history(self.history, path, run=run, record_time=record_time)


def write_history(history: list[dict], path, run: str | None = None, record_time: bool = False, mode="a") -> None:
    with open(path, mode, encoding="utf-8") as fh:
        for rec in history:
            rec = dict(rec)
            if not record_time:
                rec.pop("wall_time", None)
            if run is not None:
                rec = {"run": run, **rec}
            fh.write(json.dumps(rec, sort_keys=False) + "\n")


def train_model(
    spec: ModelSpec,
    train: Sequence[SequencePair],
    valid: Sequence[SequencePair],
    config: TrainConfig | None = None,
    vocab: Vocabulary | None = None,
    embedding: EmbeddingTable | None = None,
    evaluate: Callable[[Model, int], float] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train ``spec`` and return the snapshot from the best validation epoch.

    Without a vocabulary one is built from the training texts. ``evaluate``
    overrides the validation metric (called with the model and epoch
    number); higher is better. Training stops after ``patience`` epochs
    without strict improvement.
    """
    config = (config or TrainConfig()).resolve(spec)
    config.check()
    errs = validate_spec(spec)
    if errs:
        raise ConfigurationError(f"invalid spec {spec.name}: " + "; ".join(errs))
    if not train:
        raise InputError("empty training set")
    if vocab is None:
        vocab = build_vocab(
            (tokenize(p.context) + tokenize(p.target) for p in train), min_count=config.min_count
        )
    rng = np.random.default_rng(config.seed)
    spec = spec.replace(learning_rate=config.learning_rate, l2_coeff=config.l2_coeff, seed=config.seed)
    model = build_model(spec, vocab, embedding, rng=rng)
    spec = model.spec
    enc_train = encode_pairs(vocab, train)
    enc_valid = encode_pairs(vocab, valid)
    valid_labels = np.array([p.label for p in valid], dtype=np.int64)
    for p in list(train) + list(valid):
        if not 0 <= p.label < spec.num_classes:
            raise InputError(f"label {p.label} outside [0, {spec.num_classes})")
    weights = None
    if config.pos_weight is not None:
        weights = np.ones(spec.num_classes)
        weights[1] = config.pos_weight

    params = model.trainable()
    adam = AdamState()
    history: list[dict] = []
    best_metric, best_epoch, best_snap = -np.inf, 0, model.snapshot()
    stale = 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(enc_train))
        total, count = 0.0, 0
        try:
            for batch in _batches(enc_train, spec, config.batch_size, order):
                model.zero_grad()
                with T.GraphTape() as tape:
                    loss = batch_loss(model, batch, config.l2_coeff, weights)
                T.backward(loss, tape)
                grads = {k: p.grad for k, p in params.items() if p.grad is not None}
                if config.clip_norm is not None:
                    clip_grads(grads, config.clip_norm)
                adam_step(params, grads, adam, config.learning_rate)
                total += float(loss.value) * len(batch)
                count += len(batch)
        except NumericError as exc:
            # keep what was learned so far for the caller's diagnostics
            exc.history = history
            exc.epoch = epoch
            raise NumericError(f"{spec.name}: epoch {epoch}: {exc}") from exc
        model.zero_grad()

        record = {"epoch": epoch, "train_loss": total / count}
        if evaluate is not None:
            metric = float(evaluate(model, epoch))
        elif enc_valid:
            probs = predict_encoded(model, enc_valid)
            metric = selection_score(config.selection_metric, probs, valid_labels)
        else:
            metric = -record["train_loss"]
        record[f"valid_{config.selection_metric}"] = metric
        record["wall_time"] = time.perf_counter() - t0
        history.append(record)
        if on_epoch is not None:
            on_epoch(record)
        log.debug("%s epoch %d loss %.4f valid %.4f", spec.name, epoch, record["train_loss"], metric)

        if metric > best_metric:
            best_metric, best_epoch, best_snap = metric, epoch, model.snapshot()
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    model.restore(best_snap)
    return TrainResult(model, history, best_epoch, float(best_metric))


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)
