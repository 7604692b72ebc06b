"""Acceptance checks; each prints one PASS/FAIL line.

Run alone with ``python3 -m pytest tests/test_acceptance.py -v`` or
``python3 tests/test_acceptance.py``.
"""
import contextlib
import itertools
import sys
import time

import numpy as np
import pytest

from biseq import cli, harness
from biseq import tensor as T
from biseq.combinators import ModelSpec, build_model, enumerate_architectures, validate_spec
from biseq.encoders import encode_cbow, encode_cnn, encode_rnn, init_cnn, init_rnn, step_gru, step_lstm
from biseq.metrics import EvalReport, average_precision, macro_average, prf_at_k, roc_auc
from biseq.train import TrainConfig, batch_loss, score_dataset, train_model

from conftest import SMALL, small_batch, small_vocab


@pytest.fixture
def criterion(capsys):
    """Yields a function ``check(number, title)`` returning a context manager."""

    @contextlib.contextmanager
    def check(number, title):
        t0 = time.perf_counter()
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            with capsys.disabled():
                print(f"\nFAIL criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) {exc}")
            raise
        extra = " ".join(f"{k}={v}" for k, v in detail.items())
        with capsys.disabled():
            print(f"\nPASS criterion {number}: {title} ({time.perf_counter() - t0:.1f}s) {extra}".rstrip())

    return check


def test_1_architecture_coverage(criterion):
    with criterion(1, "19 validated architectures") as d:
        t0 = time.perf_counter()
        specs = enumerate_architectures()
        elapsed = time.perf_counter() - t0
        assert len(specs) == 19
        assert all(validate_spec(s) == [] for s in specs)
        counts = (sum(s.combination in ("concat", "bilinear") for s in specs),
                  sum(s.combination.startswith("conditional") for s in specs),
                  sum(s.combination == "concat_sentence" for s in specs))
        assert counts == (12, 6, 1), counts
        assert elapsed < 1.0
        d["time"] = f"{elapsed:.3f}s"


@pytest.mark.slow
def test_2_gradient_soundness(criterion):
    with criterion(2, "full-model finite differences, 19 specs x 3 seeds") as d:
        t0 = time.perf_counter()
        worst = 0.0
        for seed in (0, 1, 2):
            for spec in enumerate_architectures(SMALL):
                assert spec.embed_dim == 8
                rng = np.random.default_rng(seed)
                m = build_model(spec, small_vocab(), rng=rng)
                b = small_batch(rng)
                err = T.finite_difference_check(lambda: batch_loss(m, b, spec.l2_coeff), m.parameters(),
                                                eps=1e-5, extended=True)
                assert err < 1e-5, f"{spec.name} seed {seed}: {err:.2e}"
                worst = max(worst, err)
        elapsed = time.perf_counter() - t0
        assert elapsed < 120
        d["max_rel_err"] = f"{worst:.2e}"


def _brute_auc(s, y):
    pos = [a for a, l in zip(s, y) if l == 1]
    neg = [a for a, l in zip(s, y) if l == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def _walk_ap(s, y):
    order = sorted(range(len(s)), key=lambda i: -s[i])
    hits, total = 0, 0.0
    for rank, i in enumerate(order, 1):
        if y[i] == 1:
            hits += 1
            total += hits / rank
    return total / hits


def test_3_metric_oracles(criterion):
    with criterion(3, "metric oracles on 200 random lists") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(3)
        worst, done = 0.0, 0
        while done < 200:
            n = int(rng.integers(2, 51))
            s = rng.integers(0, 10, size=n) / 10.0 if done % 2 else rng.random(n)
            y = rng.integers(0, 2, size=n)
            if y.min() == y.max():
                continue
            worst = max(worst, abs(roc_auc(s, y) - _brute_auc(list(s), list(y))),
                        abs(average_precision(s, y) - _walk_ap(list(s), list(y))))
            done += 1
        assert worst <= 1e-12
        s4, y4 = [0.9, 0.8, 0.4, 0.3], [1, 0, 1, 0]
        assert roc_auc(s4, y4) == 0.75
        assert round(average_precision(s4, y4), 4) == 0.8333
        assert prf_at_k(s4, y4, 2) == (0.5, 0.5, 0.5)
        assert time.perf_counter() - t0 < 5
        d["max_abs_err"] = f"{worst:.1e}"


def test_4_dimension_constraint(criterion):
    with criterion(4, "state-fed CNN context needs filters x windows == rnn_size") as d:
        ok = ModelSpec(combination="conditional_state", context_encoder="cnn", filter_windows=(3, 4, 5),
                       num_filters=16, rnn_size=48)
        assert validate_spec(ok) == []
        rejected = 0
        for comb in ("conditional_state", "conditional_state_input"):
            for win in ((3,), (3, 4), (3, 4, 5), (2, 3, 4, 5)):
                for nf in (10, 16, 20, 40, 64, 128):
                    for size in (48, 50, 100, 200, 300, 400, 500, 1000):
                        spec = ok.replace(combination=comb, filter_windows=win, num_filters=nf, rnn_size=size)
                        errs = validate_spec(spec)
                        if nf * len(win) == size:
                            assert errs == [], (spec.to_kv(), errs)
                        else:
                            assert any(e.startswith("(d)") for e in errs), spec.to_kv()
                            rejected += 1
        d["rejected"] = rejected


@pytest.fixture(scope="module")
def synthetic():
    ds = harness.make_synthetic(1000, 5, 50, seed=0)
    return ds, harness.split_dataset(ds, harness.DEFAULT_SPLIT, seed=0)


def _accuracy(model, records):
    s = score_dataset(model, records)
    return float(np.mean((s > 0.5) == np.array([r.label for r in records])))


@pytest.mark.slow
def test_5_learnability(criterion, synthetic):
    ds, (train, valid, test) = synthetic
    with criterion(5, "all 19 specs >= 90% held-out accuracy; concat/rnn/rnn fits 200 records") as d:
        worst, slowest = 1.0, 0.0
        for spec in enumerate_architectures():
            t0 = time.perf_counter()
            res = train_model(spec, train.records, valid.records)
            acc = _accuracy(res.model, test.records)
            slowest = max(slowest, time.perf_counter() - t0)
            assert acc >= 0.9, f"{spec.name}: {acc:.3f}"
            assert len(res.history) <= 50
            worst = min(worst, acc)
        assert slowest <= 300

        sub = ds.records[:200]
        spec = ModelSpec(combination="concat", context_encoder="rnn", target_encoder="rnn")
        res = train_model(spec, sub, [], TrainConfig(patience=50),
                          evaluate=lambda m, e: _accuracy(m, sub))
        train_acc = _accuracy(res.model, sub)
        assert train_acc == 1.0, train_acc
        d["min_test_acc"] = f"{worst:.3f}"
        d["fit_epoch"] = res.best_epoch
        d["slowest"] = f"{slowest:.1f}s"


@pytest.mark.slow
def test_6_lomo(criterion, synthetic, monkeypatch):
    ds, _ = synthetic
    with criterion(6, "leave-one-group-out protocol and macro average") as d:
        t0 = time.perf_counter()
        calls = []
        real = harness.train_model
        monkeypatch.setattr(harness, "train_model", lambda *a, **kw: calls.append(1) or real(*a, **kw))
        res = harness.lomo_evaluate(ds, ModelSpec(), workers=1)
        assert len(calls) == 5 and len(res.folds) == 5
        assert harness.check_manifest_disjoint(res.manifest)
        for fold in res.manifest["folds"]:
            assert fold["test_group"] not in fold["train_groups"] + fold["valid_groups"]
        for key, value in res.macro.mean.items():
            want = np.mean([f.report.as_dict()[key] for f in res.folds])
            assert abs(value - want) <= 1e-15, key
        two = macro_average({"a": EvalReport(1, 1, avgp=0.2), "b": EvalReport(1, 1, avgp=0.4)})
        assert abs(two.mean["avgp"] - 0.3) < 1e-15
        assert res.macro.mean["auc"] > 0.9
        assert time.perf_counter() - t0 < 600
        d["macro_auc"] = f"{res.macro.mean['auc']:.4f}"


def test_7_determinism(criterion, tmp_path):
    with criterion(7, "repeated concat/rnn/rnn run gives byte-identical results.csv") as d:
        data = tmp_path / "synth.tsv"
        assert cli.run(["synth", "--n", "1000", "--groups", "5", "--vocab", "50", "--seed", "0",
                        "--out", str(data)]) == 0
        outs = []
        for name in ("first", "second"):
            out = tmp_path / name
            code = cli.run(["train", "--data", str(data), "--out", str(out), "--combination", "concat",
                            "--context", "rnn", "--target", "rnn", "--seed", "0", "--quiet"])
            assert code == 0
            outs.append((out / "results.csv").read_bytes())
        assert outs[0] == outs[1]
        d["bytes"] = len(outs[0])


def test_8_encoder_invariants(criterion):
    with criterion(8, "encoder invariants on 100 random cases each") as d:
        t0 = time.perf_counter()
        rng = np.random.default_rng(8)
        d_x, S = 3, 4
        gru, lstm = init_rnn("gru", d_x, S, rng), init_rnn("lstm", d_x, S, rng)
        cnn = init_cnn((1, 2, 3), 3, d_x, rng)
        encoders = {
            "cbow": encode_cbow,
            "gru": lambda e, m: encode_rnn(e, m, gru),
            "lstm": lambda e, m: encode_rnn(e, m, lstm),
            "cnn": lambda e, m: encode_cnn(e, m, cnn),
        }
        worst_pad = 0.0
        for _ in range(100):
            n = int(rng.integers(1, 9))
            e = rng.normal(size=(1, n, d_x))
            mask = np.ones((1, n), bool)
            base = encode_cbow(T.constant(e), mask).value
            perm = encode_cbow(T.constant(e[:, rng.permutation(n)]), mask).value
            np.testing.assert_allclose(perm, base, rtol=1e-14, atol=1e-15)

            pad = int(rng.integers(1, 5))
            e_pad = np.concatenate([e, np.zeros((1, pad, d_x))], axis=1)
            m_pad = np.concatenate([mask, np.zeros((1, pad), bool)], axis=1)
            for name, f in encoders.items():
                a = f(T.constant(e), mask).value
                b = f(T.constant(e_pad), m_pad).value
                if name == "cnn":
                    # BLAS blocks the window matmul differently by shape
                    np.testing.assert_allclose(b, a, rtol=1e-13, atol=1e-15, err_msg=name)
                else:
                    np.testing.assert_array_equal(b, a, err_msg=name)
                worst_pad = max(worst_pad, float(np.max(np.abs(a - b))))

            for cell, p in (("gru", gru), ("lstm", lstm)):
                s = T.constant(np.zeros((1, S)))
                c = T.constant(np.zeros((1, S)))
                for t in range(n):
                    x = T.constant(e[:, t])
                    if cell == "gru":
                        s = step_gru(x, s, p)
                    else:
                        s, c = step_lstm(x, s, c, p)
                np.testing.assert_array_equal(encode_rnn(T.constant(e), mask, p).value, s.value)
        assert time.perf_counter() - t0 < 30
        d["max_pad_diff"] = f"{worst_pad:.1e}"


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
