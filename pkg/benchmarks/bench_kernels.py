"""Compiled kernels vs the numpy fallback.

Times each kernel on typical training shapes, then one full forward/backward
pass of a model batch under each backend.

    python3 benchmarks/bench_kernels.py [--repeats 20] [--csv out.csv]
"""

import argparse
import csv
import statistics
import sys
import time

import numpy as np

from lbsf.data import PaymentBehavior, UserRecord
from lbsf.encoding import AmountStats
from lbsf.model import LbsfModel, ModelConfig
from lbsf.nn import _fallback, backend
from lbsf.nn.tensor import sigmoid
from lbsf.training import bce_loss


def median_ms(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t = time.perf_counter()
        fn()
        times.append(1000.0 * (time.perf_counter() - t))
    return statistics.median(times)


def kernel_cases(rng):
    # attention scores for 64 users x 16 merchants x 4 heads over 64 positions
    scores = rng.normal(size=(4096, 64, 64)).astype(np.float32)
    mask = (rng.random((4096, 64)) < 0.8).astype(np.uint8)
    mask[:, 0] = 1
    probs = _fallback.masked_softmax_forward(scores, mask).reshape(-1, 64)
    g_probs = rng.normal(size=probs.shape).astype(np.float32)
    rows = rng.normal(size=(65536, 64)).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    _, xhat, rstd = _fallback.layer_norm_forward(rows, gamma, beta, 1e-5)
    g_rows = rng.normal(size=rows.shape).astype(np.float32)
    return [
        ("masked_softmax_forward", lambda k: k.masked_softmax_forward(scores, mask)),
        ("softmax_backward", lambda k: k.softmax_backward(probs, g_probs)),
        ("layer_norm_forward", lambda k: k.layer_norm_forward(rows, gamma, beta, 1e-5)),
        ("layer_norm_backward", lambda k: k.layer_norm_backward(g_rows, xhat, rstd, gamma)),
        ("gelu_forward", lambda k: k.gelu_forward(rows.reshape(-1))),
        ("gelu_backward", lambda k: k.gelu_backward(rows.reshape(-1), g_rows.reshape(-1))),
    ]


def model_batch(rng, n_users=64):
    model = LbsfModel(ModelConfig(M=16, L_max=64, d_model=64))
    model.stats = AmountStats(3.0, 1.0)
    records = []
    for u in range(n_users):
        n = int(rng.integers(50, 300))
        ts = np.sort(rng.integers(0, 90 * 86400, size=n)) + 1_700_000_000
        shops = rng.integers(0, 25, size=n)
        bs = tuple(PaymentBehavior(f"shop {s}", "card payment", int(t), float(rng.uniform(1, 400))) for s, t in zip(shops, ts))
        records.append(UserRecord(f"u{u}", bs, int(u % 10 == 0)))
    folded = [model.fold(r) for r in records]
    labels = np.array([r.label for r in records], dtype=float)

    def step():
        model.zero_grad()
        logits, pos, _ = model.forward(folded, training=True)
        bce_loss(sigmoid(logits), labels[pos]).backward()

    return step


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeats", type=int, default=20)
    ap.add_argument("--csv", help="also write the table as CSV")
    args = ap.parse_args(argv)
    if not backend.has_compiled():
        print("compiled kernels are not built; only the numpy fallback is available", file=sys.stderr)
        return 1
    from lbsf.nn import _kernels

    rng = np.random.default_rng(0)
    rows = []
    for label, fn in kernel_cases(rng):
        rows.append((label, median_ms(lambda: fn(_fallback), args.repeats), median_ms(lambda: fn(_kernels), args.repeats)))
    step = model_batch(rng)
    timed = {}
    for name in ("numpy", "compiled"):
        with backend.using(name):
            timed[name] = median_ms(step, max(3, args.repeats // 4))
    rows.append(("model forward+backward (64 users)", timed["numpy"], timed["compiled"]))

    print(f"{'case':<36}{'numpy ms':>12}{'compiled ms':>14}{'speedup':>10}")
    for label, a, b in rows:
        print(f"{label:<36}{a:>12.2f}{b:>14.2f}{a / b:>9.2f}x")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["case", "numpy_ms", "compiled_ms"])
            w.writerows([(label, f"{a:.3f}", f"{b:.3f}") for label, a, b in rows])
    return 0


if __name__ == "__main__":
    sys.exit(main())
