"""Compiled kernels vs the numpy fallback.

Times each hot kernel on fixture-sized inputs, then one full quantized
evaluation of the convnet fixture under each backend (the fallback run is a
subprocess with MPQ_PURE_PYTHON=1 so backend selection happens at import).

    python benchmarks/bench_kernels.py [--repeat N] [--batch B]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from mpq import _fallback

try:
    from mpq import _kernels
except ImportError:
    _kernels = None

EVAL_SNIPPET = """
import json, timeit
from mpq import kernels
from mpq.fixtures import make_fixture
from mpq.quant import Candidate, calibrate, derive_quantizer_groups, parse_candidates, uniform_assignment
from mpq.search import Evaluator
fx = make_fixture("convnet", 0, calib_size=128, eval_size={batch})
specs = calibrate(fx.graph, fx.calib, parse_candidates("W4A8,W8A8,W8A16"), grid=10)
groups = derive_quantizer_groups(fx.graph)
ev = Evaluator(fx.graph, specs, groups, fx.eval, "sqnr")
a = uniform_assignment(groups, Candidate(8, 8))
t = min(timeit.repeat(lambda: ev(a), number=1, repeat={repeat}))
print(json.dumps({{"backend": kernels.BACKEND, "seconds": t, "value": ev(a)}}))
"""


def cases(batch, rng):
    f32 = np.float32
    x_dense = rng.standard_normal((batch, 256)).astype(f32)
    w_dense = rng.standard_normal((32, 256)).astype(f32)
    x_conv1 = rng.standard_normal((batch, 3, 8, 8)).astype(f32)
    w_conv1 = rng.standard_normal((8, 3, 3, 3)).astype(f32)
    x_conv2 = rng.standard_normal((batch, 8, 8, 8)).astype(f32)
    w_conv2 = rng.standard_normal((16, 8, 3, 3)).astype(f32)
    x_q = rng.standard_normal((batch, 8, 64)).astype(f32)
    scale = np.full(8, 0.05)
    zp = np.zeros(8, dtype=np.int64)
    return {
        "dense 256->32": lambda m: m.dense(x_dense, w_dense),
        "conv2d 3->8 k3 s1": lambda m: m.conv2d(x_conv1, w_conv1, 1, 1),
        "conv2d 8->16 k3 s2": lambda m: m.conv2d(x_conv2, w_conv2, 2, 1),
        "global_avg_pool": lambda m: m.global_avg_pool(x_conv2),
        "qdq per-channel": lambda m: m.qdq(x_q, scale, zp, -128, 127),
    }


def eval_run(pure: bool, batch: int, repeat: int) -> dict:
    env = dict(os.environ)
    env["MPQ_PURE_PYTHON"] = "1" if pure else "0"
    code = EVAL_SNIPPET.format(batch=batch, repeat=repeat)
    out = subprocess.run([sys.executable, "-c", code], env=env, check=True,
                         capture_output=True, text=True).stdout
    return json.loads(out.strip().splitlines()[-1])


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--batch", type=int, default=1024)
    args = ap.parse_args(argv)

    if _kernels is None:
        print("compiled extension not built; only the fallback is available")
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'cython ms':>12}{'numpy ms':>12}{'speedup':>10}  same bits")
    for name, fn in cases(args.batch, rng).items():
        tc = min(timeit.repeat(lambda: fn(_kernels), number=1, repeat=args.repeat))
        tf = min(timeit.repeat(lambda: fn(_fallback), number=1, repeat=args.repeat))
        same = fn(_kernels).tobytes() == fn(_fallback).tobytes()
        print(f"{name:<22}{tc * 1e3:>12.2f}{tf * 1e3:>12.2f}{tf / tc:>9.1f}x  {same}")

    fast = eval_run(False, args.batch, args.repeat)
    slow = eval_run(True, args.batch, args.repeat)
    print(f"\nconvnet evaluation, {args.batch} samples:")
    for r in (fast, slow):
        print(f"  {r['backend']:<7} {r['seconds'] * 1e3:8.2f} ms  sqnr={r['value']!r}")
    print(f"  speedup {slow['seconds'] / fast['seconds']:.1f}x, identical result: {fast['value'] == slow['value']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
