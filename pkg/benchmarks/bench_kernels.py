"""Time the compiled and numpy row kernels side by side, then one training round per backend.

    python3 benchmarks/bench_kernels.py [--repeat 50]

The round timing runs in a subprocess per backend because the backend is
chosen once at import.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from repfed import kernels

ROUND_SCRIPT = """
import time
from repfed import kernels
from repfed.config import RunConfig
from repfed.federation import Federation
fed = Federation(RunConfig())
start = time.perf_counter()
fed.run_round(0)
print(kernels.BACKEND, time.perf_counter() - start)
"""


def cases(rng):
    z = rng.standard_normal((256, 16))
    y, norms = kernels.get_backend("python").l2_normalize_rows(z)
    dy = rng.standard_normal(z.shape)
    logits = rng.standard_normal((128, 128))
    targets = np.arange(128, dtype=np.int64)
    stack = rng.standard_normal((8, 256, 16))
    g = rng.standard_normal((256, 16))
    return {
        "l2_normalize_rows": lambda k: k.l2_normalize_rows(z),
        "l2_normalize_backward": lambda k: k.l2_normalize_backward(y, norms, dy),
        "softmax_xent_rows": lambda k: k.softmax_xent_rows(logits, targets),
        "contrastive_scores": lambda k: k.contrastive_scores(stack, g, 1 / 0.07, False),
        "row_softmax": lambda k: k.row_softmax(logits),
        "mean_pairwise_distance": lambda k: k.mean_pairwise_distance(stack),
    }


def time_round(pure):
    env = dict(os.environ)
    if pure:
        env["REPFED_PURE_PYTHON"] = "1"
    else:
        env.pop("REPFED_PURE_PYTHON", None)
    out = subprocess.run([sys.executable, "-c", ROUND_SCRIPT], capture_output=True, text=True, env=env, check=True)
    name, seconds = out.stdout.split()
    return name, float(seconds)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=50)
    parser.add_argument("--skip-round", action="store_true")
    args = parser.parse_args(argv)

    backends = ["python"] + (["cython"] if kernels.compiled_available() else [])
    print(f"{'kernel':24s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases(np.random.default_rng(0)).items():
        times = []
        for b in backends:
            mod = kernels.get_backend(b)
            fn(mod)
            times.append(min(timeit.repeat(lambda: fn(mod), number=args.repeat, repeat=3)) / args.repeat)
        line = f"{name:24s}" + "".join(f"{t * 1e6:12.1f}us" for t in times)
        if len(times) > 1:
            line += f"{times[0] / times[1]:11.2f}x"
        print(line)

    if not args.skip_round:
        print()
        rounds = [time_round(True)] + ([time_round(False)] if kernels.compiled_available() else [])
        for name, seconds in rounds:
            print(f"desk-bench round 0 with {name:6s} kernels: {seconds:.3f}s")


if __name__ == "__main__":
    main()
