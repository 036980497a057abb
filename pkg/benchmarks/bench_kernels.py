"""Compiled kernels vs the pure-Python fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--steps 5]

Part one times each kernel directly on shapes typical of the 6+6 layer,
d=64 desk model.  Part two times whole training steps in two subprocesses,
one with ``LORAPRUN_PURE_PYTHON=1``, so dispatch overhead is included.
Everything runs on one thread.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np
from threadpoolctl import threadpool_limits

from loraprun import _pykernels

try:
    from loraprun import _ckernels
except ImportError:
    _ckernels = None

STEP_SCRIPT = """
import json, statistics, sys, time
from loraprun import _kernels, data as ds
from loraprun.model import ArchDescriptor, build_model, forward, seq_loss
from loraprun.optim import AdamWConfig, OptimState, accumulate_and_step
from threadpoolctl import threadpool_limits
threadpool_limits(1)
steps = int(sys.argv[1])
corpus = ds.synth_corpus(ds.SynthSpec(n_examples=64, noise=0.1), seed=0)
vocab = ds.build_vocab(t for e in corpus.examples for t in (e.source, e.target))
batch = next(ds.batches(ds.encode_examples(corpus.examples, vocab), 32, 64, 40, seed=0))
model = build_model(ArchDescriptor(6, 6, 64, 256, 4, len(vocab), max_positions=64), seed=0)
params, state, opt = model.parameters(), OptimState(), AdamWConfig(lr=1e-4, warmup_steps=0)
loss = lambda b: seq_loss(forward(model, b.src, b.tgt_in), b.tgt_out)
state, _ = accumulate_and_step(params, [batch], loss, state, opt)
times = []
for _ in range(steps):
    t0 = time.perf_counter()
    state, _ = accumulate_and_step(params, [batch], loss, state, opt)
    times.append(time.perf_counter() - t0)
print(json.dumps({"backend": _kernels.BACKEND, "tokens_per_sec": batch.n_tokens / statistics.median(times)}))
"""


def kernel_cases(rng):
    x = rng.normal(size=32 * 40 * 256).astype(np.float32)
    o, t = np.empty_like(x), np.empty_like(x)
    z = rng.normal(size=(32 * 4 * 40, 64)).astype(np.float32)
    h = rng.normal(size=(32 * 64, 64)).astype(np.float32)
    gamma, beta = np.ones(64, np.float32), np.zeros(64, np.float32)
    out, xhat, inv = np.empty_like(h), np.empty_like(h), np.empty(len(h), np.float32)
    ids = rng.integers(0, 60, size=32 * 64)
    table = np.zeros((60, 64), np.float32)
    a, b = list(rng.integers(0, 20, 120)), list(rng.integers(0, 20, 120))
    return {
        "gelu_forward": lambda m: m.gelu_forward(x, o, t),
        "gelu_backward": lambda m: m.gelu_backward(x, t, x, o),
        "softmax_rows": lambda m: m.softmax_rows(z.copy()),
        "softmax_backward": lambda m: m.softmax_backward(z, z, np.empty_like(z)),
        "layer_norm_forward": lambda m: m.layer_norm_forward(h, gamma, beta, 1e-5, out, xhat, inv),
        "layer_norm_backward": lambda m: m.layer_norm_backward(h, xhat, inv, gamma, np.empty_like(h),
                                                               np.zeros(64, np.float32),
                                                               np.zeros(64, np.float32), True),
        "scatter_add_rows": lambda m: m.scatter_add_rows(table, ids, h),
        "lcs_length": lambda m: m.lcs_length(a, b),
    }


def bench_kernels(repeat: int) -> None:
    print(f"{'kernel':22s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, run in kernel_cases(np.random.default_rng(0)).items():
        py = min(timeit.repeat(lambda: run(_pykernels), number=1, repeat=repeat)) * 1e3
        if _ckernels is None:
            print(f"{name:22s} {py:10.3f} {'-':>10s} {'-':>8s}")
            continue
        cy = min(timeit.repeat(lambda: run(_ckernels), number=1, repeat=repeat)) * 1e3
        print(f"{name:22s} {py:10.3f} {cy:10.3f} {py / cy:7.2f}x")


def bench_steps(steps: int) -> None:
    results = []
    for pure in (False, True):
        env = dict(os.environ)
        env.pop("LORAPRUN_PURE_PYTHON", None)
        if pure:
            env["LORAPRUN_PURE_PYTHON"] = "1"
        proc = subprocess.run([sys.executable, "-c", STEP_SCRIPT, str(steps)], env=env,
                              capture_output=True, text=True, check=True)
        results.append(json.loads(proc.stdout.strip().splitlines()[-1]))
    print("\nfull training step, 6+6 layers, d=64, batch 32")
    for r in results:
        print(f"  {r['backend']:7s} {r['tokens_per_sec']:10.0f} tokens/sec")
    if len({r["backend"] for r in results}) == 2:
        print(f"  speedup {results[0]['tokens_per_sec'] / results[1]['tokens_per_sec']:.2f}x")


def main() -> None:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--steps", type=int, default=5)
    args = p.parse_args()
    threadpool_limits(1)
    bench_kernels(args.repeat)
    bench_steps(args.steps)


if __name__ == "__main__":
    main()
