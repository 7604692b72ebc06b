"""Command-line interface.

Model flags use the same names as the ``key=value`` spec serialization, so a
row of ``results.csv`` can be replayed with ``--spec "<row as key=value>"``
or flag by flag. Progress goes to stderr; results go to files.

Exit codes: 0 success, 1 bad input or usage, 2 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .combinators import SPEC_KEYS, ModelSpec, enumerate_architectures, spec_from_row, spec_to_row
from .embed import load_pretrained
from .errors import BiseqError, ConfigurationError, InputError, NumericError
from .metrics import DEFAULT_KS, evaluate, evaluate_grouped, read_score_file
from .train import SELECTION_METRICS, TrainConfig, encode_pairs, predict_encoded, train_model, write_history

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2

SPEC_HELP = {
    "combination": "combination scheme: concat, bilinear, conditional_state, conditional_input, "
                   "conditional_state_input or concat_sentence",
    "context": "context encoder: cbow, rnn, cnn, or none (concat_sentence only)",
    "target": "target encoder: rnn, cnn, or none (concat_sentence only)",
    "cell": "recurrent cell: gru or lstm",
    "rnn_size": "RNN state size",
    "windows": "CNN filter window sizes joined with '+', e.g. 3+4+5",
    "filters": "CNN filters per window size",
    "l2": "L2 coefficient on CNN filter weights",
    "lr": "Adam learning rate",
    "classes": "number of classes (taken from the data when training)",
    "ctx_len": "maximum context length in tokens",
    "tgt_len": "maximum target length in tokens",
    "embed_dim": "word embedding size (fixed by --embeddings when given)",
    "bilinear_bias": "per-class bias in the bilinear combination (1 or 0)",
    "seed": "random seed for initialisation, shuffling and splits",
}

# name -> (type, help); also accepted as keys in --config files
TRAIN_KEYS = {
    "batch_size": (int, "mini-batch size (default 64)"),
    "max_epochs": (int, "epoch cap (default 50)"),
    "patience": (int, "epochs without validation improvement before stopping (default 5)"),
    "metric": (str, "validation metric for early stopping and model selection: avgp, auc or accuracy"),
    "clip_norm": (float, "global gradient-norm clip; 0 disables (default 5)"),
    "pos_weight": (float, "cross-entropy weight of class 1 (default: unweighted)"),
    "min_count": (int, "drop training words seen fewer times (default 1)"),
}


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with status 1 instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INPUT, f"{self.prog}: error: {message}\n")


def _add_spec_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model (same keys as results.csv columns)")
    for key in SPEC_KEYS:
        g.add_argument(f"--{key}", default=None, metavar="V", help=SPEC_HELP[key])
    g.add_argument("--spec", default=None, metavar="KV",
                   help="whole spec as 'key=value ...' (a results row); individual flags override it")
    g.add_argument("--config", default=None, metavar="FILE",
                   help="key=value file with model and training keys; flags override it")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("training")
    for key, (typ, text) in TRAIN_KEYS.items():
        g.add_argument(f"--{key}", type=typ, default=None, metavar="V", help=text)


def _add_data_flags(p: argparse.ArgumentParser, splits: bool = True) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", required=True, help="dataset file")
    g.add_argument("--format", default="tsv-pairs", choices=harness.FORMATS, help="dataset format")
    g.add_argument("--embeddings", default=None, metavar="FILE",
                   help="pretrained word vectors (word2vec/GloVe text format)")
    g.add_argument("--length_percentile", type=float, default=None, metavar="P",
                   help="set ctx_len and tgt_len to this token-length percentile of the data")
    if splits:
        g.add_argument("--valid", default=None, metavar="FILE", help="given validation file (needs --test)")
        g.add_argument("--test", default=None, metavar="FILE", help="given test file (needs --valid)")
        g.add_argument("--split", default="0.6,0.1,0.3", metavar="R",
                       help="grouped train,valid,test ratios when no split files are given")


def _add_run_flags(p: argparse.ArgumentParser, workers: bool = True) -> None:
    g = p.add_argument_group("run")
    g.add_argument("--out", required=True, help="output directory")
    if workers:
        g.add_argument("--workers", type=int, default=None,
                       help="parallel training processes (default: BISEQ_WORKERS or 1)")
    g.add_argument("--timings", action="store_true", help="include wall-clock times in output files")
    g.add_argument("--quiet", action="store_true", help="no progress messages on stderr")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="biseq", description="Train and evaluate bi-sequence classifiers.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train one spec on one split and report test metrics")
    _add_spec_flags(p)
    _add_train_flags(p)
    _add_data_flags(p)
    _add_run_flags(p, workers=False)
    p.add_argument("--from_results", default=None, metavar="CSV",
                   help="start from the best row of a grid results.csv (transfer without re-tuning)")

    p = sub.add_parser("grid", help="grid search over the hyperparameters one architecture uses")
    _add_spec_flags(p)
    _add_train_flags(p)
    _add_data_flags(p)
    _add_run_flags(p)
    p.add_argument("--grid", default=None, metavar="JSON",
                   help="JSON object of axes (cell, rnn_size, windows, num_filters, l2, learning_rate); "
                        "omitted axes use the full default grid")
    p.add_argument("--derive_filters", action="store_true",
                   help="for state-fed conditional specs with a CNN context, set filters = rnn_size/|windows|")
    p.add_argument("--full_table", action="store_true", help="report the test metric for every row")

    p = sub.add_parser("lomo", help="leave-one-group-out evaluation with macro-averaged metrics")
    _add_spec_flags(p)
    _add_train_flags(p)
    _add_data_flags(p, splits=False)
    _add_run_flags(p)
    p.add_argument("--holdout", type=float, default=0.1,
                   help="fraction of the training groups kept for early stopping (default 0.1)")

    p = sub.add_parser("eval", help="metrics for a score<TAB>label[<TAB>group] file")
    p.add_argument("--scores", required=True, help="score file")
    p.add_argument("--k", type=int, action="append", default=None,
                   help="cut-off for P/R/F1@K; repeatable (default 200 50 20 10 5)")
    p.add_argument("--out", default=None, help="also write the metrics as JSON to this file")

    p = sub.add_parser("enumerate", help="print the 19 architectures as key=value lines")
    _add_spec_flags(p)

    p = sub.add_parser("synth", help="write the synthetic containment dataset as tsv-pairs")
    p.add_argument("--n", type=int, default=1000, help="number of records")
    p.add_argument("--groups", type=int, default=5, help="number of groups")
    p.add_argument("--vocab", type=int, default=50, help="vocabulary size")
    p.add_argument("--distractor_rate", type=float, default=0.0,
                   help="chance that a negative target holds a wrong key word")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--out", required=True, help="output file")
    return parser


# --------------------------------------------------------------------------
# argument resolution
# --------------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are ignored."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            key = key.strip()
            if not sep or not key:
                raise InputError(f"{path}: line {lineno}: expected key=value")
            if key not in SPEC_KEYS and key not in TRAIN_KEYS:
                raise ConfigurationError(f"{path}: line {lineno}: unknown key {key!r}")
            out[key] = value.strip()
    return out


def _resolve(args) -> tuple[ModelSpec, TrainConfig]:
    conf = read_config(args.config) if getattr(args, "config", None) else {}
    base = ModelSpec()
    if getattr(args, "from_results", None):
        base = harness.best_spec_from_results(args.from_results)
    row = {k: v for k, v in conf.items() if k in SPEC_KEYS}
    if args.spec:
        row.update(spec_from_row_text(args.spec))
    for key in SPEC_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            row[key] = value
    spec = spec_from_row(row, base)

    train = {k: conf[k] for k in TRAIN_KEYS if k in conf}
    for key in TRAIN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            train[key] = value
    kw = {}
    for key, value in train.items():
        typ = TRAIN_KEYS[key][0]
        try:
            kw[key] = typ(value)
        except ValueError:
            raise ConfigurationError(f"bad value {value!r} for {key}") from None
    metric = kw.pop("metric", "avgp")
    if metric not in SELECTION_METRICS:
        raise ConfigurationError(f"metric must be one of {SELECTION_METRICS}, got {metric!r}")
    clip = kw.pop("clip_norm", 5.0)
    config = TrainConfig(selection_metric=metric, clip_norm=clip or None, **kw)
    config = config.resolve(spec)
    config.record_time = bool(getattr(args, "timings", False))
    return spec, config


def spec_from_row_text(text: str) -> dict[str, str]:
    row = {}
    for token in text.split():
        key, sep, value = token.partition("=")
        if not sep:
            raise ConfigurationError(f"expected key=value in --spec, got {token!r}")
        row[key] = value
    return row


def _progress(args):
    if getattr(args, "quiet", False):
        return None
    return lambda msg: print(msg, file=sys.stderr, flush=True)


def _load(args, spec: ModelSpec) -> tuple[harness.Dataset, ModelSpec]:
    ds = harness.load_dataset(args.data, args.format)
    if args.length_percentile is not None:
        c, t = harness.suggest_max_lengths(ds, args.length_percentile)
        spec = spec.replace(max_ctx_len=c, max_tgt_len=t)
    return ds, spec.replace(num_classes=ds.num_classes)


def _splits(args, ds: harness.Dataset, seed: int) -> harness.Splits:
    if (args.valid is None) != (args.test is None):
        raise InputError("--valid and --test must be given together")
    if args.valid is not None:
        valid = harness.load_dataset(args.valid, args.format)
        test = harness.load_dataset(args.test, args.format)
        if valid.label_names != ds.label_names or test.label_names != ds.label_names:
            raise InputError("train, valid and test files must use the same label set")
        return harness.Splits(ds, valid, test)
    try:
        ratios = [float(x) for x in args.split.split(",")]
    except ValueError:
        raise InputError(f"bad --split {args.split!r}") from None
    if len(ratios) != 3:
        raise InputError("--split needs three ratios")
    return harness.Splits(*harness.split_dataset(ds, ratios, seed))


def _embedding(args, train: harness.Dataset, config: TrainConfig, progress):
    if not args.embeddings:
        return None, None
    vocab = harness.vocab_for(train, config)
    table, matched = load_pretrained(args.embeddings, vocab, seed=config.seed)
    if progress:
        progress(f"pretrained vectors cover {matched} of {len(vocab)} words")
    return vocab, table


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_train(args) -> int:
    spec, config = _resolve(args)
    progress = _progress(args)
    ds, spec = _load(args, spec)
    splits = _splits(args, ds, config.seed)
    vocab, table = _embedding(args, splits.train, config, progress)
    vocab = vocab or harness.vocab_for(splits.train, config)

    def on_epoch(rec):
        if progress:
            progress(f"epoch {rec['epoch']} loss {rec['train_loss']:.4f} "
                     f"valid_{config.selection_metric} {rec[f'valid_{config.selection_metric}']:.4f}")

    res = train_model(spec, splits.train.records, splits.valid.records, config, vocab=vocab,
                      embedding=table, on_epoch=on_epoch)
    test = splits.test.records
    probs = predict_encoded(res.model, encode_pairs(vocab, test))
    labels = np.array([r.label for r in test])
    report = harness.report_for(probs, labels)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    row = dict(spec_to_row(res.model.spec))
    row[f"valid_{config.selection_metric}"] = repr(res.best_metric)
    row["best_epoch"] = str(res.best_epoch)
    row["epochs"] = str(len(res.history))
    for key, value in report.as_dict().items():
        row[f"test_{key}"] = "" if value is None else (str(value) if isinstance(value, int) else repr(value))
    with open(out / "results.csv", "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(row))
        w.writerow(list(row.values()))
    with open(out / "scores.tsv", "w", encoding="utf-8") as fh:
        for p, r in zip(probs, test):
            score = float(p[1] if probs.shape[1] == 2 else np.max(p))
            fh.write(f"{score!r}\t{r.label}\t{r.group}\n")
    hist = out / "history.jsonl"
    write_history(res.history, hist, run=res.model.spec.to_kv(), record_time=config.record_time, mode="w")
    harness.write_manifest(out / "manifest.json", {
        "command": "train",
        "seed": config.seed,
        "dataset": ds.name,
        "dataset_sha256": ds.fingerprint(),
        "labels": ds.label_names,
        "spec": spec_to_row(res.model.spec),
        "train_config": harness.config_row(config),
        "splits": splits.group_ids(),
        "test": report.as_dict(),
    })
    if progress:
        progress("test: " + " ".join(f"{k}={v:.4f}" for k, v in report.as_dict().items()
                                      if isinstance(v, float)))
    return EXIT_OK


def _grid_space(args) -> harness.GridSpace:
    axes = {}
    if args.grid:
        try:
            with open(args.grid, encoding="utf-8") as fh:
                axes = json.load(fh)
        except json.JSONDecodeError as exc:
            raise InputError(f"{args.grid}: invalid JSON: {exc.msg}") from None
        if not isinstance(axes, dict):
            raise InputError(f"{args.grid}: expected a JSON object of axes")
    if args.derive_filters:
        axes["derive_filters"] = True
    return harness.GridSpace.from_dict(axes)


def cmd_grid(args) -> int:
    spec, config = _resolve(args)
    progress = _progress(args)
    ds, spec = _load(args, spec)
    splits = _splits(args, ds, config.seed)
    vocab, table = _embedding(args, splits.train, config, progress)
    result = harness.grid_search(
        splits, spec, _grid_space(args), config, vocab=vocab, embedding=table, workers=args.workers,
        full_table=args.full_table, out_dir=args.out, record_time=args.timings, progress=progress,
    )
    if progress:
        w = result.winner
        progress(f"winner {w.spec.to_kv()} valid={w.valid_metric:.4f} test={w.test_metric:.4f}")
    return EXIT_OK


def cmd_lomo(args) -> int:
    spec, config = _resolve(args)
    progress = _progress(args)
    ds, spec = _load(args, spec)
    table = None
    if args.embeddings:
        # one vocabulary over all groups so every fold shares the table
        vocab = harness.vocab_for(ds, config)
        table, matched = load_pretrained(args.embeddings, vocab, seed=config.seed)
        if progress:
            progress(f"pretrained vectors cover {matched} of {len(vocab)} words")
    else:
        vocab = None
    result = harness.lomo_evaluate(ds, spec, config, holdout=args.holdout, vocab=vocab, embedding=table,
                                   workers=args.workers, out_dir=args.out, record_time=args.timings,
                                   progress=progress)
    if progress:
        progress("macro: " + " ".join(f"{k}={v:.4f}" for k, v in result.macro.mean.items()))
    return EXIT_OK


def cmd_eval(args) -> int:
    items = read_score_file(args.scores)
    ks = tuple(args.k) if args.k else DEFAULT_KS
    scores = [i.score for i in items]
    labels = [i.label for i in items]
    report = evaluate(scores, labels, ks=ks).as_dict()
    out = {"overall": report}
    lines = [f"{k}\t{_show(v)}" for k, v in report.items()]
    if all(i.group is not None for i in items) and len({i.group for i in items}) > 1:
        macro = evaluate_grouped(scores, labels, [i.group for i in items], ks=ks)
        out["macro"] = macro.mean
        out["macro_skipped"] = macro.skipped
        lines += [f"macro_{k}\t{_show(v)}" for k, v in macro.mean.items()]
    print("\n".join(lines))
    if args.out:
        harness.write_manifest(args.out, out)
    return EXIT_OK


def _show(v) -> str:
    if v is None:
        return "undefined"
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def cmd_enumerate(args) -> int:
    spec, _ = _resolve(args)
    for s in enumerate_architectures(spec):
        print(s.to_kv())
    return EXIT_OK


def cmd_synth(args) -> int:
    if not 0.0 <= args.distractor_rate <= 1.0:
        raise InputError("--distractor_rate must be in [0, 1]")
    ds = harness.make_synthetic(args.n, args.groups, args.vocab, args.seed,
                                distractor_rate=args.distractor_rate)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    harness.save_dataset(ds, args.out)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "grid": cmd_grid,
    "lomo": cmd_lomo,
    "eval": cmd_eval,
    "enumerate": cmd_enumerate,
    "synth": cmd_synth,
}


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except NumericError as exc:
        print(f"biseq: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (BiseqError, OSError, ValueError) as exc:
        print(f"biseq: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except KeyboardInterrupt:
        print("biseq: interrupted; completed rows were written", file=sys.stderr)
        return 130


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
