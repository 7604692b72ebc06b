"""Datasets, grouped splits, grid search and leave-one-group-out evaluation.

Every record carries a group id (a motion, a question, a premise batch).
Splits never put one group in two parts, so a context text seen in training
never reappears at test time.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import itertools
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .combinators import (
    SPEC_KEYS,
    STATE_FED,
    ModelSpec,
    spec_from_row,
    spec_to_row,
    validate_spec,
)
from .embed import EmbeddingTable, Vocabulary, build_vocab, tokenize
from .errors import ConfigurationError, FormatError, InputError, ParseError
from .metrics import EvalReport, MacroReport, evaluate, macro_average
from .train import (
    SequencePair,
    TrainConfig,
    encode_pairs,
    predict_encoded,
    selection_score,
    train_model,
    write_history,
)

log = logging.getLogger(__name__)

FORMATS = ("tsv-pairs", "snli-jsonl", "wikiqa-tsv")
NLI_LABELS = ("entailment", "contradiction", "neutral")
DEFAULT_SPLIT = (0.6, 0.1, 0.3)


# --------------------------------------------------------------------------
# datasets
# --------------------------------------------------------------------------

@dataclass
class Dataset:
    records: list[SequencePair]
    label_names: list[str]
    name: str = "dataset"

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def __len__(self) -> int:
        return len(self.records)

    def groups(self) -> list[str]:
        """Group ids in order of first appearance."""
        return list(dict.fromkeys(r.group for r in self.records))

    def subset(self, groups, name: str | None = None) -> "Dataset":
        keep = set(groups)
        return Dataset([r for r in self.records if r.group in keep], self.label_names, name or self.name)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update(f"{r.context}\t{r.target}\t{r.label}\t{r.group}\n".encode("utf-8"))
        return h.hexdigest()


def _label_order(raw: Sequence[str]) -> list[str]:
    names = set(raw)
    if names <= set(NLI_LABELS):
        return [n for n in NLI_LABELS if n in names] if len(names) < 3 else list(NLI_LABELS)
    try:
        return sorted(names, key=float)
    except ValueError:
        return sorted(names)


def _finish(rows: list[tuple[str, str, str, str, int]], name: str, path) -> Dataset:
    if not rows:
        raise InputError(f"{path}: no records")
    names = _label_order([r[2] for r in rows])
    if len(names) < 2:
        raise InputError(f"{path}: only one label value {names[0]!r}")
    index = {n: i for i, n in enumerate(names)}
    records = []
    for ctx, tgt, label, group, lineno in rows:
        if not tokenize(ctx):
            raise ParseError("empty context", lineno)
        if not tokenize(tgt):
            raise ParseError("empty target", lineno)
        # records without a group are grouped by their context text
        records.append(SequencePair(ctx, tgt, index[label], group or ctx))
    return Dataset(records, names, name)


def _read_tsv_pairs(path: Path):
    rows, width = [], None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) not in (3, 4):
                raise ParseError(f"expected 3 or 4 tab-separated columns, got {len(cols)}", lineno)
            if width is not None and len(cols) != width:
                raise ParseError(f"inconsistent column count {len(cols)} (earlier rows had {width})", lineno)
            width = len(cols)
            group = cols[3] if len(cols) == 4 else ""
            rows.append((cols[0], cols[1], cols[2].strip(), group, lineno))
    return rows


def _read_snli(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"invalid JSON: {exc.msg}", lineno) from None
            try:
                s1, s2, gold = obj["sentence1"], obj["sentence2"], obj["gold_label"]
            except (KeyError, TypeError):
                raise ParseError("needs sentence1, sentence2 and gold_label", lineno) from None
            if gold == "-":
                continue
            if gold not in NLI_LABELS:
                raise ParseError(f"unknown gold_label {gold!r}", lineno)
            group = str(obj.get("pairID", "")).rsplit("#", 1)[0] or obj.get("captionID", "") or s1
            rows.append((s1, s2, gold, str(group), lineno))
    return rows


def _read_wikiqa(path: Path):
    rows = []
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split("\t")
        lower = [h.strip().lower() for h in header]
        try:
            qi, si, li = lower.index("question"), lower.index("sentence"), lower.index("label")
        except ValueError:
            raise ParseError("header must name Question, Sentence and Label columns", 1) from None
        gi = lower.index("questionid") if "questionid" in lower else None
        for lineno, line in enumerate(fh, 2):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != len(header):
                raise ParseError(f"expected {len(header)} columns, got {len(cols)}", lineno)
            group = cols[gi] if gi is not None else cols[qi]
            rows.append((cols[qi], cols[si], cols[li].strip(), group, lineno))
    return rows


def load_dataset(path, format: str = "tsv-pairs", name: str | None = None) -> Dataset:
    """Parse a dataset file; labels are mapped to dense ids (see ``label_names``).

    String labels sort lexicographically and numeric labels numerically,
    except the entailment labels, which keep the order entailment,
    contradiction, neutral.
    """
    readers = {"tsv-pairs": _read_tsv_pairs, "snli-jsonl": _read_snli, "wikiqa-tsv": _read_wikiqa}
    if format not in readers:
        raise FormatError(f"unknown dataset format {format!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{path}: no such file")
    if path.stat().st_size == 0:
        raise InputError(f"{path}: empty file")
    return _finish(readers[format](path), name or path.stem, path)


def save_dataset(dataset: Dataset, path) -> None:
    """Write ``tsv-pairs`` with label names and groups."""
    with open(path, "w", encoding="utf-8") as fh:
        for r in dataset.records:
            fh.write(f"{r.context}\t{r.target}\t{dataset.label_names[r.label]}\t{r.group}\n")


# --------------------------------------------------------------------------
# synthetic containment task
# --------------------------------------------------------------------------

def make_synthetic(
    n: int = 1000,
    groups: int = 5,
    vocab: int = 50,
    seed: int = 0,
    n_keys: int = 10,
    min_len: int = 4,
    max_len: int = 10,
    distractor_rate: float = 0.0,
) -> Dataset:
    """Label 1 iff the one-token context occurs in the target.

    The vocabulary is ``n_keys`` key words (possible contexts) plus
    fillers. Positive targets are fillers with the context word inserted;
    negative targets are fillers, or with probability ``distractor_rate``
    fillers plus a different key word. Groups are assigned round-robin by label pair and
    do not influence the data, so any group can be held out.
    """
    if n < 2 or groups < 1:
        raise InputError("need n >= 2 and groups >= 1")
    if not 1 <= n_keys < vocab:
        raise InputError("need 1 <= n_keys < vocab")
    if not 1 <= min_len <= max_len:
        raise InputError("need 1 <= min_len <= max_len")
    rng = np.random.default_rng(seed)
    keys = [f"key{i}" for i in range(n_keys)]
    fillers = [f"w{i}" for i in range(vocab - n_keys)]
    records = []
    for i in range(n):
        label = i % 2
        ctx = int(rng.integers(n_keys))
        length = int(rng.integers(min_len, max_len + 1))
        words = [fillers[j] for j in rng.integers(len(fillers), size=length)]
        if label == 1:
            words[int(rng.integers(length))] = keys[ctx]
        elif n_keys > 1 and rng.random() < distractor_rate:
            other = (ctx + 1 + int(rng.integers(n_keys - 1))) % n_keys
            words[int(rng.integers(length))] = keys[other]
        # consecutive positive/negative pairs share a group so every group sees both labels
        records.append(SequencePair(keys[ctx], " ".join(words), label, f"g{(i // 2) % groups}"))
    order = rng.permutation(n)
    return Dataset([records[i] for i in order], ["0", "1"], f"synthetic-{n}-{groups}-{seed}")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------

@dataclass
class Splits:
    train: Dataset
    valid: Dataset
    test: Dataset | None = None

    def group_ids(self) -> dict[str, list[str]]:
        out = {"train": self.train.groups(), "valid": self.valid.groups()}
        if self.test is not None:
            out["test"] = self.test.groups()
        return out


def split_dataset(dataset: Dataset, ratios: Sequence[float] = DEFAULT_SPLIT, seed: int = 0) -> tuple[Dataset, ...]:
    """Grouped random split approximating ``ratios`` by record count.

    Group ids are shuffled with ``seed``; each part first receives one
    group, then every remaining group goes to the part furthest below its
    target size.
    """
    ratios = [float(r) for r in ratios]
    if any(r <= 0 for r in ratios):
        raise InputError(f"every split ratio must be positive (got {ratios}); empty parts are not allowed")
    if not math.isclose(sum(ratios), 1.0, abs_tol=1e-9):
        raise InputError(f"split ratios must sum to 1, got {sum(ratios)}")
    groups = dataset.groups()
    if len(groups) < len(ratios):
        raise InputError(f"{len(groups)} groups cannot fill {len(ratios)} parts")
    sizes = {}
    for r in dataset.records:
        sizes[r.group] = sizes.get(r.group, 0) + 1
    order = [groups[i] for i in np.random.default_rng(seed).permutation(len(groups))]
    total = len(dataset)
    parts: list[list[str]] = [[] for _ in ratios]
    counts = [0] * len(ratios)
    # seed the parts from largest to smallest ratio
    by_ratio = sorted(range(len(ratios)), key=lambda i: -ratios[i])
    for i, g in zip(by_ratio, order):
        parts[i].append(g)
        counts[i] += sizes[g]
    for g in order[len(ratios):]:
        i = max(range(len(ratios)), key=lambda j: (ratios[j] * total - counts[j], -j))
        parts[i].append(g)
        counts[i] += sizes[g]
    names = ("train", "valid", "test")
    return tuple(
        dataset.subset(p, f"{dataset.name}:{names[i] if i < 3 else i}") for i, p in enumerate(parts)
    )


def holdout_split(dataset: Dataset, fraction: float = 0.1, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Training/early-stopping split; by group when possible, else by record."""
    if len(dataset.groups()) >= 2:
        return split_dataset(dataset, (1.0 - fraction, fraction), seed)
    n = len(dataset)
    if n < 2:
        raise InputError("need at least 2 records for a holdout split")
    perm = np.random.default_rng(seed).permutation(n)
    k = max(1, int(round(fraction * n)))
    held = set(perm[:k].tolist())
    train = [r for i, r in enumerate(dataset.records) if i not in held]
    valid = [r for i, r in enumerate(dataset.records) if i in held]
    return (Dataset(train, dataset.label_names, dataset.name + ":train"),
            Dataset(valid, dataset.label_names, dataset.name + ":valid"))


def suggest_max_lengths(dataset: Dataset, percentile: float = 99.0) -> tuple[int, int]:
    """Nearest-rank percentile of context and target token lengths."""
    if not 0 < percentile <= 100:
        raise InputError("percentile must be in (0, 100]")
    if not dataset.records:
        raise InputError("empty dataset")

    def rank(lengths):
        s = sorted(lengths)
        return s[max(1, math.ceil(percentile / 100.0 * len(s))) - 1]

    return (rank(len(tokenize(r.context)) for r in dataset.records),
            rank(len(tokenize(r.target)) for r in dataset.records))


# --------------------------------------------------------------------------
# grid search
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpace:
    """Hyperparameter axes; only the axes a spec uses are expanded.

    ``derive_filters`` replaces the filter-count axis of state-fed
    conditional specs with a CNN context by ``rnn_size / |windows|``
    (cells where that is not an integer are excluded).
    """
    cell: tuple[str, ...] = ("gru", "lstm")
    rnn_size: tuple[int, ...] = (50, 100, 200, 300, 400, 500, 1000)
    windows: tuple[tuple[int, ...], ...] = ((3,), (3, 4), (3, 4, 5), (2, 3, 4, 5))
    num_filters: tuple[int, ...] = (10, 20, 40, 64, 128)
    l2: tuple[float, ...] = (0.0, 0.01, 0.001, 0.0001)
    learning_rate: tuple[float, ...] = (0.001, 0.0001, 0.00001)
    derive_filters: bool = False

    def __post_init__(self):
        for name in ("cell", "rnn_size", "windows", "num_filters", "l2", "learning_rate"):
            if not getattr(self, name):
                raise ConfigurationError(f"grid axis {name} is empty")

    @classmethod
    def single(cls, spec: ModelSpec) -> "GridSpace":
        return cls((spec.cell,), (spec.rnn_size,), (spec.filter_windows,), (spec.num_filters,),
                   (spec.l2_coeff,), (spec.learning_rate,))

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpace":
        """Axes from a JSON-style mapping; windows may be written ``"3+4+5"``."""
        kw = {}
        for key, value in d.items():
            if key == "derive_filters":
                kw[key] = bool(value)
                continue
            if key not in cls.__dataclass_fields__:
                raise ConfigurationError(f"unknown grid axis {key!r}")
            if not isinstance(value, (list, tuple)):
                value = [value]
            if key == "windows":
                value = [tuple(int(x) for x in (v.split("+") if isinstance(v, str) else v)) for v in value]
            kw[key] = tuple(value)
        return cls(**kw)


@dataclass
class GridExpansion:
    cells: list[ModelSpec]
    excluded: list[tuple[ModelSpec, list[str]]] = field(default_factory=list)


def expand_grid(base: ModelSpec, grid: GridSpace) -> GridExpansion:
    """All distinct valid cells of ``grid`` for the architecture of ``base``."""
    rnn_axes = base.uses_rnn
    cnn_axes = base.uses_cnn
    derive = grid.derive_filters and base.combination in STATE_FED and base.context_encoder == "cnn"
    axes = [
        grid.cell if rnn_axes else (base.cell,),
        grid.rnn_size if rnn_axes else (base.rnn_size,),
        grid.windows if cnn_axes else (base.filter_windows,),
        (None,) if derive else (grid.num_filters if cnn_axes else (base.num_filters,)),
        grid.l2 if cnn_axes else (base.l2_coeff,),
        grid.learning_rate,
    ]
    out = GridExpansion([])
    seen = set()
    for cell, size, win, nf, l2, lr in itertools.product(*axes):
        if nf is None:
            nf = size // len(win) if size % len(win) == 0 else 0
        spec = base.replace(cell=cell, rnn_size=size, filter_windows=tuple(win), num_filters=max(nf, 1),
                            l2_coeff=l2, learning_rate=lr)
        errs = validate_spec(spec) if nf else [f"(d) rnn_size {size} not divisible by {len(win)} windows"]
        if errs:
            out.excluded.append((spec, errs))
        elif spec not in seen:
            seen.add(spec)
            out.cells.append(spec)
    return out


@dataclass
class GridRow:
    spec: ModelSpec
    valid_metric: float
    test_metric: float | None
    best_epoch: int
    epochs: int
    wall_time: float
    index: int


@dataclass
class GridResult:
    rows: list[GridRow]
    metric: str
    excluded: int
    winner_report: EvalReport | None = None

    @property
    def winner(self) -> GridRow:
        return self.rows[0]


def _run_cell(job):
    """Worker entry point: train one cell and return picklable results."""
    index, spec, train, valid, test, config, vocab, embedding = job
    t0 = time.perf_counter()
    # the cell's spec carries lr and L2; the run seed comes from the config
    cfg = dataclasses.replace(config, learning_rate=None, l2_coeff=None)
    res = train_model(spec, train, valid, cfg, vocab=vocab, embedding=embedding)
    test_probs = predict_encoded(res.model, encode_pairs(vocab, test)) if test is not None else None
    return {
        "index": index,
        "spec": res.model.spec,
        "valid": res.best_metric,
        "best_epoch": res.best_epoch,
        "epochs": len(res.history),
        "history": res.history,
        "test_probs": test_probs,
        "wall_time": time.perf_counter() - t0,
    }


def default_workers() -> int:
    env = os.environ.get("BISEQ_WORKERS")
    if env:
        try:
            n = int(env)
        except ValueError:
            raise ConfigurationError(f"BISEQ_WORKERS must be an integer, got {env!r}") from None
        if n < 1:
            raise ConfigurationError("BISEQ_WORKERS must be >= 1")
        return n
    return 1


def run_jobs(fn: Callable, jobs: list, workers: int | None = None, on_done: Callable | None = None) -> list:
    """Run ``fn`` over ``jobs`` with a bounded process pool; results in job order.

    With one worker everything runs in-process. On Ctrl-C, queued jobs are
    cancelled and the interrupt propagates after ``on_done`` has seen every
    finished result.
    """
    workers = workers or default_workers()
    results = [None] * len(jobs)
    if workers <= 1 or len(jobs) <= 1:
        for i, job in enumerate(jobs):
            results[i] = fn(job)
            if on_done:
                on_done(results[i])
        return results
    pool = ProcessPoolExecutor(max_workers=min(workers, len(jobs)))
    try:
        futures = {pool.submit(fn, job): i for i, job in enumerate(jobs)}
        for fut in as_completed(futures):
            results[futures[fut]] = fut.result()
            if on_done:
                on_done(results[futures[fut]])
    except KeyboardInterrupt:
        pool.shutdown(wait=False, cancel_futures=True)
        raise
    pool.shutdown()
    return results


def report_for(probs: np.ndarray, labels: np.ndarray) -> EvalReport:
    if probs.shape[1] == 2:
        return evaluate(probs[:, 1], labels, probs=probs)
    return evaluate(labels=labels, probs=probs)


def vocab_for(train: Dataset, config: TrainConfig) -> Vocabulary:
    return build_vocab((tokenize(r.context) + tokenize(r.target) for r in train.records),
                       min_count=config.min_count)


def grid_search(
    splits: Splits,
    base: ModelSpec,
    grid: GridSpace,
    config: TrainConfig | None = None,
    *,
    vocab: Vocabulary | None = None,
    embedding: EmbeddingTable | None = None,
    workers: int | None = None,
    full_table: bool = False,
    out_dir=None,
    record_time: bool = False,
    progress: Callable[[str], None] | None = None,
) -> GridResult:
    """Train every valid grid cell; rank by validation metric.

    The test metric is filled in for the winner only, or for every row
    when ``full_table`` is set.
    """
    config = (config or TrainConfig()).resolve(base)
    if splits.test is None:
        raise InputError("grid search needs a test split")
    expansion = expand_grid(base, grid)
    if not expansion.cells:
        reasons = sorted({e for _, errs in expansion.excluded for e in errs})
        raise ConfigurationError(
            f"no valid grid cell for {base.name} ({len(expansion.excluded)} excluded): " + "; ".join(reasons)
        )
    if expansion.excluded and progress:
        progress(f"{base.name}: {len(expansion.excluded)} grid cells excluded by spec constraints")
    vocab = vocab or vocab_for(splits.train, config)
    classes = splits.train.num_classes
    jobs = [
        (i, spec.replace(num_classes=classes), splits.train.records, splits.valid.records,
         splits.test.records, config, vocab, embedding)
        for i, spec in enumerate(expansion.cells)
    ]
    done = []

    def collect(res):
        done.append(res)
        if progress:
            progress(f"[{len(done)}/{len(jobs)}] {res['spec'].to_kv()} valid={res['valid']:.4f}")

    try:
        results = run_jobs(_run_cell, jobs, workers, collect)
    except KeyboardInterrupt:
        results = sorted(done, key=lambda r: r["index"])
        if out_dir is not None and results:
            _persist_grid(results, config, splits, out_dir, record_time, full_table, None)
        raise
    return _persist_grid(results, config, splits, out_dir, record_time, full_table, len(expansion.excluded))


def _persist_grid(results, config, splits, out_dir, record_time, full_table, excluded) -> GridResult:
    test_labels = np.array([r.label for r in splits.test.records])
    metric = config.selection_metric
    rows = []
    for res in results:
        test = None
        if full_table:
            test = selection_score(metric, res["test_probs"], test_labels)
        rows.append(GridRow(res["spec"], res["valid"], test, res["best_epoch"], res["epochs"],
                            res["wall_time"], res["index"]))
    # stable: ties keep grid order
    rows.sort(key=lambda r: (-r.valid_metric, r.index))
    best = next(res for res in results if res["index"] == rows[0].index)
    rows[0].test_metric = selection_score(metric, best["test_probs"], test_labels)
    result = GridResult(rows, metric, excluded or 0, report_for(best["test_probs"], test_labels))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_results_csv(result, out / "results.csv", record_time)
        hist = out / "history.jsonl"
        hist.write_text("")
        for res in sorted(results, key=lambda r: r["index"]):
            write_history(res["history"], hist, run=res["spec"].to_kv(), record_time=record_time)
        write_manifest(out / "manifest.json", {
            "command": "grid",
            "seed": config.seed,
            "dataset": splits.train.name.split(":")[0],
            "dataset_sha256": _split_hash(splits),
            "labels": splits.train.label_names,
            "splits": splits.group_ids(),
            "excluded_cells": result.excluded,
            "winner": spec_to_row(result.winner.spec),
            "winner_test": result.winner_report.as_dict() if result.winner_report else None,
            "train_config": config_row(config),
        })
    return result


def _split_hash(splits: Splits) -> str:
    h = hashlib.sha256()
    for part in (splits.train, splits.valid, splits.test):
        if part is not None:
            h.update(part.fingerprint().encode())
    return h.hexdigest()


def config_row(config: TrainConfig) -> dict:
    d = dict(config.__dict__)
    d.pop("record_time", None)
    return d


def _fmt_metric(v) -> str:
    return "" if v is None else repr(float(v))


def write_results_csv(result: GridResult, path, record_time: bool = False) -> None:
    m = result.metric
    header = list(SPEC_KEYS) + [f"valid_{m}", f"test_{m}", "best_epoch", "epochs"]
    if record_time:
        header.append("wall_time")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in result.rows:
            values = list(spec_to_row(row.spec).values())
            values += [_fmt_metric(row.valid_metric), _fmt_metric(row.test_metric), row.best_epoch, row.epochs]
            if record_time:
                values.append(f"{row.wall_time:.3f}")
            w.writerow(values)


def write_manifest(path, data: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(data, fh, indent=2, sort_keys=True)
        fh.write("\n")


def best_spec_from_results(path, base: ModelSpec | None = None) -> ModelSpec:
    """The first data row of a ``results.csv`` (rows are sorted best first)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        try:
            row = next(reader)
        except StopIteration:
            raise InputError(f"{path}: no result rows") from None
    return spec_from_row({k: v for k, v in row.items() if k in SPEC_KEYS}, base)


def transfer_evaluate(spec: ModelSpec, splits: Splits, config: TrainConfig | None = None,
                      embedding: EmbeddingTable | None = None) -> EvalReport:
    """Train ``spec`` as is on new splits and report test metrics (no tuning)."""
    config = config or TrainConfig()
    if splits.test is None:
        raise InputError("transfer needs a test split")
    vocab = vocab_for(splits.train, config)
    res = train_model(spec.replace(num_classes=splits.train.num_classes), splits.train.records,
                      splits.valid.records, config, vocab=vocab, embedding=embedding)
    probs = predict_encoded(res.model, encode_pairs(vocab, splits.test.records))
    return report_for(probs, np.array([r.label for r in splits.test.records]))


# --------------------------------------------------------------------------
# leave one group out
# --------------------------------------------------------------------------

@dataclass
class Fold:
    test_group: str
    train_groups: list[str]
    valid_groups: list[str]
    report: EvalReport | None
    best_epoch: int
    history: list[dict]


@dataclass
class LomoResult:
    macro: MacroReport
    folds: list[Fold]
    skipped: list[str]
    manifest: dict


def _run_fold(job):
    g, spec, train, valid, test, config, vocab, embedding = job
    res = train_model(spec, train.records, valid.records, config, vocab=vocab, embedding=embedding)
    probs = predict_encoded(res.model, encode_pairs(vocab, test.records))
    labels = np.array([r.label for r in test.records])
    return g, report_for(probs, labels), res.best_epoch, res.history


def lomo_evaluate(
    dataset: Dataset,
    spec: ModelSpec,
    config: TrainConfig | None = None,
    *,
    holdout: float = 0.1,
    vocab: Vocabulary | None = None,
    embedding: EmbeddingTable | None = None,
    workers: int | None = None,
    out_dir=None,
    record_time: bool = False,
    progress: Callable[[str], None] | None = None,
) -> LomoResult:
    """One model per group, trained on every other group and tested on it.

    ``holdout`` of the remaining groups is kept aside for early stopping.
    Each fold builds its vocabulary from its own training part unless
    ``vocab`` is given (required with a pretrained ``embedding``). The
    returned macro report averages the per-fold reports.
    """
    config = (config or TrainConfig()).resolve(spec)
    groups = sorted(dataset.groups())
    if len(groups) < 2:
        raise InputError(f"leave-one-group-out needs at least 2 groups, got {len(groups)}")
    spec = spec.replace(num_classes=dataset.num_classes)
    jobs, folds_meta = [], {}
    for k, g in enumerate(groups):
        test = dataset.subset([g], f"{dataset.name}:test")
        rest = dataset.subset([h for h in groups if h != g], f"{dataset.name}:rest")
        train, valid = holdout_split(rest, holdout, seed=config.seed + k)
        fold_vocab = vocab or vocab_for(train, config)
        folds_meta[g] = (train.groups(), valid.groups())
        if set(train.groups()) & {g} or set(valid.groups()) & {g}:
            raise AssertionError(f"fold {g}: test group leaked into training")
        jobs.append((g, spec, train, valid, test, config, fold_vocab, embedding))

    def note(res):
        if progress:
            rep = res[1]
            progress(f"fold {res[0]}: auc={rep.auc} avgp={rep.avgp} accuracy={rep.accuracy}")

    results = run_jobs(_run_fold, jobs, workers, note)
    folds, reports, skipped = [], {}, []
    for g, report, best_epoch, history in results:
        tr, va = folds_meta[g]
        folds.append(Fold(g, tr, va, report, best_epoch, history))
        if report.n == 0:
            skipped.append(g)
        else:
            reports[g] = report
    macro = macro_average(reports)
    manifest = {
        "command": "lomo",
        "seed": config.seed,
        "dataset": dataset.name,
        "dataset_sha256": dataset.fingerprint(),
        "labels": dataset.label_names,
        "spec": spec_to_row(spec),
        "train_config": config_row(config),
        "folds": [
            {"test_group": f.test_group, "train_groups": f.train_groups, "valid_groups": f.valid_groups,
             "best_epoch": f.best_epoch}
            for f in folds
        ],
        "skipped_groups": skipped,
        "macro": macro.mean,
        "macro_skipped": macro.skipped,
    }
    result = LomoResult(macro, folds, skipped, manifest)
    if out_dir is not None:
        write_lomo(result, out_dir, record_time)
    return result


def write_lomo(result: LomoResult, out_dir, record_time: bool = False) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    names = []
    for f in result.folds:
        for key in f.report.as_dict():
            if key not in names:
                names.append(key)
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["group"] + names)
        for f in result.folds:
            d = f.report.as_dict()
            w.writerow([f.test_group] + [_fmt_metric(d.get(k)) if k not in ("n", "n_pos") else d[k]
                                         for k in names])
        w.writerow(["macro"] + [_fmt_metric(result.macro.mean.get(k)) if k not in ("n", "n_pos") else ""
                                for k in names])
    hist = out / "history.jsonl"
    hist.write_text("")
    for f in result.folds:
        write_history(f.history, hist, run=f"fold={f.test_group}", record_time=record_time)
    write_manifest(out / "manifest.json", result.manifest)


def check_manifest_disjoint(manifest: dict) -> bool:
    """True when no fold or split shares a group between training and testing."""
    if "folds" in manifest:
        return all(
            fold["test_group"] not in fold["train_groups"] and fold["test_group"] not in fold["valid_groups"]
            for fold in manifest["folds"]
        )
    s = manifest["splits"]
    parts = [set(s[k]) for k in s]
    return all(not (a & b) for a, b in itertools.combinations(parts, 2))


__all__ = [
    "Dataset", "GridExpansion", "GridResult", "GridRow", "GridSpace", "LomoResult", "Splits",
    "best_spec_from_results", "check_manifest_disjoint", "expand_grid", "grid_search",
    "holdout_split", "load_dataset", "lomo_evaluate", "make_synthetic", "save_dataset", "split_dataset",
    "suggest_max_lengths", "transfer_evaluate",
]
