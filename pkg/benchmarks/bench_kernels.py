"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--step]

Shapes are taken from the micro student at 32 px and the full student at
128 px. ``--step`` also times one training step of the micro student
under each backend (subprocesses, since the backend is fixed at import).
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from tinyssl.kernels import backends

# (label, B, C, H, stride) for depthwise 3x3 layers and im2col stems
CASES = [
    ("micro dw 32px", 64, 16, 16, 1),
    ("micro dw s2", 64, 48, 16, 2),
    ("full dw 64px", 16, 48, 64, 1),
    ("full dw 16px", 16, 192, 16, 1),
]
STEM = [("micro stem", 64, 3, 32, 2), ("full stem", 16, 3, 128, 2)]

STEP_SNIPPET = """
import time, numpy as np
from tinyssl import kernels
from tinyssl.config import parse_config
from tinyssl.engine import build_run, train_step
from tinyssl.data import synth_dataset_generate
cfg = parse_config("method = simclr\\nbackbone.preset = micro\\noptimizer.batch = 64\\ncurriculum.total_epochs = 2\\n"
                   "optimizer.warmup_epochs = 0\\noutput_dir = /tmp/tinyssl_bench\\n")
ds = synth_dataset_generate(8, 8, 32, 0)
run = build_run(cfg, (ds, None))
idx = np.arange(64)
train_step(run, idx, 1, 1e-3)
t = time.perf_counter()
for _ in range(3):
    train_step(run, idx, 1, 1e-3)
print(kernels.BACKEND, (time.perf_counter() - t) / 3)
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--step", action="store_true")
    args = ap.parse_args()
    impls = backends()
    if "cython" not in impls:
        print("compiled extension not built; only the numpy fallback is available")
    rng = np.random.default_rng(0)
    names = list(impls)
    print(f"{'case':<18}{'op':<10}" + "".join(f"{n:>12}" for n in names) + ("     speedup" if len(names) > 1 else ""))
    for label, B, C, H, s in CASES:
        x = rng.standard_normal((B, C, H, H)).astype(np.float32)
        w = rng.standard_normal((C, 3, 3)).astype(np.float32)
        Ho = (H + 2 - 3) // s + 1
        g = rng.standard_normal((B, C, Ho, Ho)).astype(np.float32)
        for op, call in (("dw fwd", lambda m: m.depthwise_forward(x, w, s, 1)),
                         ("dw bwd", lambda m: m.depthwise_backward(x, w, g, s, 1))):
            t = {n: best(lambda m=impls[n]: call(m), args.repeat) for n in names}
            _row(label, op, t, names)
    for label, B, C, H, s in STEM:
        x = rng.standard_normal((B, C, H, H)).astype(np.float32)
        cols = impls["python"].im2col(x, 3, s, 1)
        for op, call in (("im2col", lambda m: m.im2col(x, 3, s, 1)),
                         ("col2im", lambda m: m.col2im(cols, x.shape, 3, s, 1))):
            t = {n: best(lambda m=impls[n]: call(m), args.repeat) for n in names}
            _row(label, op, t, names)
    if args.step:
        print("\none micro-student training step (batch 64, simclr):")
        for force in ("0", "1"):
            env = dict(os.environ, TINYSSL_PURE_PYTHON=force)
            out = subprocess.run([sys.executable, "-c", STEP_SNIPPET], env=env, capture_output=True, text=True,
                                 check=True).stdout.split()
            print(f"  {out[0]:<8} {float(out[1]) * 1e3:9.1f} ms")


def _row(label, op, t, names):
    line = f"{label:<18}{op:<10}" + "".join(f"{t[n] * 1e3:10.2f}ms" for n in names)
    if len(names) > 1:
        line += f"{t['python'] / t['cython']:11.2f}x"
    print(line)


if __name__ == "__main__":
    main()
