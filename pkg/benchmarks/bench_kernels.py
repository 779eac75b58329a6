#!/usr/bin/env python3
"""Compare the numpy and numba kernel backends.

Part 1 times each kernel in-process (numba versions are warmed up first, so
JIT compilation is excluded). Part 2 trains one epoch in a fresh interpreter
per backend, since the backend is picked at import time from MAGNN_USE_NUMBA.

    python benchmarks/bench_kernels.py [--repeat 5] [--skip-epoch]
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from magnn import _kernels as K


def make_inputs(rng):
    n_users, n_items, length, d = 2000, 5000, 60, 50
    seqs = rng.integers(n_items, size=(n_users, length))
    ptr = np.arange(0, n_users * length + 1, length, dtype=np.int64)
    items = seqs.ravel().astype(np.int64)

    src, dst = K.cooccurrence_pairs_numpy(ptr, items, 3)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    indptr = np.zeros(n_items + 2, dtype=np.int64)
    np.add.at(indptr, src + 1, 1)
    indptr = np.cumsum(indptr)
    weights = rng.random(dst.size)

    table = rng.normal(size=(n_items + 1, d))
    rows = rng.integers(n_items, size=128 * 5).astype(np.int64)
    grad_out = rng.normal(size=(rows.size, d))

    keys = np.unique(rng.integers(n_users * n_items, size=200_000)).astype(np.int64)
    queries = rng.integers(n_users * n_items, size=400_000).astype(np.int64)

    scores = rng.normal(size=(512, n_items))
    excl_counts = np.full(512, 40)
    excl_ptr = np.concatenate([[0], np.cumsum(excl_counts)]).astype(np.int64)
    excl = np.concatenate([np.sort(rng.choice(n_items, 40, replace=False)) for _ in range(512)]).astype(np.int64)

    return {
        "cooccurrence_pairs": (ptr, items, 3),
        "csr_aggregate": (indptr, dst, weights, rows, table),
        "csr_aggregate_backward": lambda: (indptr, dst, weights, rows, grad_out, np.zeros_like(table)),
        "scatter_add_rows": lambda: (np.zeros_like(table), rows, grad_out),
        "member": (keys, queries),
        "topk_excluding": (scores, excl_ptr, excl, 10),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    inputs = make_inputs(rng)
    print(f"{'kernel':<24}{'numpy ms':>12}{'numba ms':>12}{'speedup':>10}")
    for name in K.KERNELS:
        args = inputs[name]
        fresh = args if callable(args) else (lambda a=args: a)
        times = {}
        for backend in ("numpy", "numba"):
            if backend == "numba" and not K.HAVE_NUMBA:
                continue
            fn = getattr(K, f"{name}_{backend}")
            fn(*fresh())  # warm-up / compile
            times[backend] = min(timeit.repeat(lambda: fn(*fresh()), number=1, repeat=repeat)) * 1e3
        nb = times.get("numba")
        speed = f"{times['numpy'] / nb:9.1f}x" if nb else "      n/a"
        print(f"{name:<24}{times['numpy']:>12.2f}{nb if nb is not None else float('nan'):>12.2f}{speed:>10}")


EPOCH_SCRIPT = """
import json, time
from magnn import _kernels
from magnn.itemgraph import build_graph
from magnn.dataset import make_training_instances
from magnn.model import ModelConfig, init_params
from magnn.synthetic import markov_split
from magnn.trainer import Adam, ObservedItems, TrainConfig, train_epoch
from magnn.evaluator import evaluate
from magnn import autodiff as ad
import numpy as np

split = markov_split(num_users=400, num_items=200, seed=0)
build_graph(split.train[:2], split.num_items)  # compile outside the timer
t0 = time.perf_counter()
graph = build_graph(split.train, split.num_items)
graph_s = time.perf_counter() - t0
mc = ModelConfig(precision="float32")
tc = TrainConfig(batch_size=256)
with ad.precision(mc.precision):
    inst = make_training_instances(split)
    params = init_params(mc, split.num_users, split.num_items)
    obs = ObservedItems(split.train, split.num_items)
    train_epoch(params, inst.subset(np.arange(256)), graph, obs, tc, Adam(), np.random.default_rng(0))
    stats = train_epoch(params, inst, graph, obs, tc, Adam(), np.random.default_rng(1))
    t0 = time.perf_counter()
    evaluate(params, split, graph, mc)
    eval_s = time.perf_counter() - t0
print(json.dumps({"backend": _kernels.BACKEND, "graph_s": graph_s, "epoch_s": stats.seconds, "eval_s": eval_s}))
"""


def bench_epoch():
    print()
    print(f"{'backend':<10}{'graph s':>10}{'epoch s':>10}{'eval s':>10}")
    for flag in ("0", "1"):
        env = dict(os.environ, MAGNN_USE_NUMBA=flag)
        out = subprocess.run([sys.executable, "-c", EPOCH_SCRIPT], env=env, capture_output=True, text=True, check=True)
        r = json.loads(out.stdout.strip().splitlines()[-1])
        print(f"{r['backend']:<10}{r['graph_s']:>10.3f}{r['epoch_s']:>10.3f}{r['eval_s']:>10.3f}")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    parser.add_argument("--skip-epoch", action="store_true")
    args = parser.parse_args()
    bench_kernels(args.repeat)
    if not args.skip_epoch:
        bench_epoch()


if __name__ == "__main__":
    main()
