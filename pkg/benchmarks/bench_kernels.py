"""Compare the compiled kernels with the numpy fallback.

Times each kernel on both backends, then whole training epochs end to end in
a subprocess per backend (the backend is fixed at import time).

    python3 benchmarks/bench_kernels.py [--repeat 5] [--batch 64] [--size 100]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from biseq._kernels import available_backends, load_backend

EPOCH_SCRIPT = """
import json, time
from biseq import BACKEND
from biseq.combinators import ModelSpec
from biseq.harness import make_synthetic, split_dataset
from biseq.train import TrainConfig, train_model
ds = make_synthetic(1000, 5, 50, seed=0)
train, valid, _ = split_dataset(ds, (0.6, 0.1, 0.3), seed=0)
out = {"backend": BACKEND}
for name, spec in [("gru", ModelSpec(cell="gru")), ("lstm", ModelSpec(cell="lstm")),
                   ("cnn", ModelSpec(context_encoder="cnn", target_encoder="cnn"))]:
    t0 = time.perf_counter()
    train_model(spec, train.records, valid.records, TrainConfig(max_epochs=EPOCHS, patience=EPOCHS))
    out[name] = (time.perf_counter() - t0) / EPOCHS
print(json.dumps(out))
"""


def kernel_cases(B, S, L, rng):
    ax, ah = rng.normal(size=(B, 3 * S)), rng.normal(size=(B, 2 * S))
    s, g = rng.normal(size=(B, S)), rng.normal(size=(B, S))
    a4, c = rng.normal(size=(B, 4 * S)), rng.normal(size=(B, S))
    x = rng.normal(size=(B, L, S))
    nvalid = np.full(B, L - 2, dtype=np.int64)
    ids = rng.integers(0, 500, size=B * L).astype(np.int64)
    rows = rng.normal(size=(B * L, S))
    table = np.zeros((500, S))

    def lstm_bw(k):
        gates, _, tanh_c, _ = k.lstm_forward(a4, c)
        return lambda: k.lstm_backward(g, g, gates, c, tanh_c)

    def pool_bw(k):
        _, idx = k.max_pool_forward(x, nvalid)
        return lambda: k.max_pool_backward(g, idx, L)

    def gru_bw(k):
        z, _ = k.gru_gates(ax, ah)
        h, _ = k.gru_candidate(ax, s, z, s)
        return lambda: k.gru_backward_candidate(g, z, h, s)

    return {
        "sigmoid": lambda k: lambda: k.sigmoid(a4),
        "gru_gates": lambda k: lambda: k.gru_gates(ax, ah),
        "gru_backward_candidate": gru_bw,
        "lstm_forward": lambda k: lambda: k.lstm_forward(a4, c),
        "lstm_backward": lstm_bw,
        "max_pool_forward": lambda k: lambda: k.max_pool_forward(x, nvalid),
        "max_pool_backward": pool_bw,
        "unfold_windows(h=3)": lambda k: lambda: k.unfold_windows(x, 3),
        "scatter_add_rows": lambda k: lambda: k.scatter_add_rows(table, ids, rows, 0),
    }


def bench_kernels(args):
    rng = np.random.default_rng(0)
    cases = kernel_cases(args.batch, args.size, args.length, rng)
    backends = {name: load_backend(name) for name in available_backends()}
    print(f"{'kernel':<24}" + "".join(f"{b:>14}" for b in backends) + "   speedup")
    for name, make in cases.items():
        times = {}
        for b, mod in backends.items():
            fn = make(mod)
            n, _ = timeit.Timer(fn).autorange()
            times[b] = min(timeit.repeat(fn, number=n, repeat=args.repeat)) / n
        line = f"{name:<24}" + "".join(f"{times[b] * 1e6:>12.1f}us" for b in backends)
        if "cython" in times:
            line += f"   {times['python'] / times['cython']:.2f}x"
        print(line)


def bench_epochs(args):
    rows = []
    for pure in ("0", "1"):
        env = dict(os.environ, BISEQ_PURE_PYTHON=pure)
        proc = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT.replace("EPOCHS", str(args.epochs))],
                              env=env, capture_output=True, text=True, check=True)
        rows.append(json.loads(proc.stdout))
    print(f"\n{'seconds per epoch':<24}" + "".join(f"{r['backend']:>14}" for r in rows))
    for key in ("gru", "lstm", "cnn"):
        print(f"{key:<24}" + "".join(f"{r[key]:>14.3f}" for r in rows))


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5, help="timing repeats; the best is reported")
    p.add_argument("--batch", type=int, default=64, help="batch size for kernel inputs")
    p.add_argument("--size", type=int, default=100, help="state size for kernel inputs")
    p.add_argument("--length", type=int, default=20, help="sequence length for CNN kernels")
    p.add_argument("--epochs", type=int, default=2, help="epochs per end-to-end timing")
    p.add_argument("--skip_epochs", action="store_true", help="kernel timings only")
    args = p.parse_args(argv)
    if "cython" not in available_backends():
        print("compiled extension not built; timing the fallback only", file=sys.stderr)
    bench_kernels(args)
    if not args.skip_epochs:
        bench_epochs(args)


if __name__ == "__main__":
    main()
