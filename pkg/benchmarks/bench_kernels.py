"""Compare the compiled and numpy kernel backends.

Times im2col/col2im/maxpool on shapes that occur in the desk model, then one
full training step of att_unet_aspp (batch 8, 64x64, base 16) per backend.
The training step runs in a subprocess so the backend choice at import time
is honoured.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--json out.json]
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from attnaspp import kernels

# (name, input shape, kernel, stride, dilation, pad)
SHAPES = [
    ("enc1 3x3", (8, 16, 64, 64), 3, 1, 1, 1),
    ("enc3 3x3", (8, 64, 16, 16), 3, 1, 1, 1),
    ("aspp r2", (8, 256, 4, 4), 3, 1, 2, 2),
    ("stride2", (8, 16, 32, 32), 3, 2, 1, 1),
]

STEP_SNIPPET = """
import time, numpy as np
from attnaspp import kernels
from attnaspp.data import SynthConfig, gen_synthetic, iter_batches
from attnaspp.models import ModelSpec, build
from attnaspp.optim import AdamState
from attnaspp.train import train_step
x, y = next(iter_batches(gen_synthetic(SynthConfig(), 8), 8))
net = build(ModelSpec(variant="att_unet_aspp"), 0)
opt = AdamState()
train_step(net, opt, x, y, 1e-3)
times = []
for _ in range({steps}):
    t0 = time.perf_counter()
    train_step(net, opt, x, y, 1e-3)
    times.append(time.perf_counter() - t0)
print(kernels.BACKEND, min(times), sum(times) / len(times))
"""


def bench_kernels(repeat: int) -> list[dict]:
    rows = []
    rng = np.random.default_rng(0)
    for name, shape, k, s, d, p in SHAPES:
        x = rng.normal(size=shape).astype(np.float32)
        for backend, mod in kernels.available_backends().items():
            cols = mod.im2col(x, k, k, s, d, p)
            t_fwd = min(timeit.repeat(lambda: mod.im2col(x, k, k, s, d, p), number=1,
                                      repeat=repeat))
            t_bwd = min(timeit.repeat(lambda: mod.col2im(cols, x.shape, k, k, s, d, p),
                                      number=1, repeat=repeat))
            rows.append({"case": name, "backend": backend, "im2col_ms": 1e3 * t_fwd,
                         "col2im_ms": 1e3 * t_bwd})
    x = rng.normal(size=(8, 16, 64, 64)).astype(np.float32)
    for backend, mod in kernels.available_backends().items():
        out, idx = mod.maxpool2_forward(x)
        t_fwd = min(timeit.repeat(lambda: mod.maxpool2_forward(x), number=1, repeat=repeat))
        t_bwd = min(timeit.repeat(lambda: mod.maxpool2_backward(out, idx), number=1,
                                  repeat=repeat))
        rows.append({"case": "maxpool2", "backend": backend, "im2col_ms": 1e3 * t_fwd,
                     "col2im_ms": 1e3 * t_bwd})
    return rows


def bench_step(pure: bool, steps: int) -> dict:
    env = dict(os.environ)
    if pure:
        env["ATTNASPP_PURE_PYTHON"] = "1"
    else:
        env.pop("ATTNASPP_PURE_PYTHON", None)
    res = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(steps=steps)], env=env,
                         capture_output=True, text=True, check=True)
    backend, best, mean = res.stdout.split()
    return {"backend": backend, "best_s": float(best), "mean_s": float(mean)}


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--steps", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)

    rows = bench_kernels(args.repeat)
    print(f"{'case':<10} {'backend':<8} {'fwd ms':>9} {'bwd ms':>9}")
    for r in rows:
        print(f"{r['case']:<10} {r['backend']:<8} {r['im2col_ms']:9.3f} {r['col2im_ms']:9.3f}")
    steps = [bench_step(False, args.steps), bench_step(True, args.steps)]
    print("\ntraining step, att_unet_aspp, batch 8, 64x64, base 16")
    for s in steps:
        print(f"  {s['backend']:<8} best {s['best_s']:.3f} s  mean {s['mean_s']:.3f} s")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"kernels": rows, "train_step": steps}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
