"""Compare the compiled and numpy convolution kernels.

    python benchmarks/bench_kernels.py [--repeat 5] [--train-steps 3]

Times im2col / col2im on layer shapes from the desk model, then a full
conv2d forward+backward and a few training steps under each backend.
"""
import argparse
import time
import timeit

import numpy as np

from dptn import autograd as ag
from dptn import kernels
from dptn.train import TrainConfig, Trainer

# (label, input shape N,C,H,W, kernel, stride) from the desk model at 32x32, batch 8
SHAPES = [
    ("en_c.conv1", (16, 39, 32, 32), 3, 1),
    ("en_c.conv2", (16, 16, 32, 32), 3, 2),
    ("resblock", (16, 64, 8, 8), 3, 1),
    ("de.conv2", (16, 32, 32, 32), 3, 1),
    ("width64.en_c.conv2", (8, 64, 64, 64), 3, 2),
]


def _best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat, dtype):
    rows = []
    rng = np.random.default_rng(0)
    for label, shape, k, stride in SHAPES:
        x = rng.normal(size=shape).astype(dtype)
        cols = kernels.im2col(x, k, k, stride, 1)
        row = [label]
        for name in kernels.available_backends():
            kernels.set_backend(name)
            row.append(_best(lambda: kernels.im2col(x, k, k, stride, 1), repeat))
            row.append(_best(lambda: kernels.col2im(cols, shape, k, k, stride, 1), repeat))
        rows.append(row)
    return rows


def bench_conv(repeat, dtype):
    rng = np.random.default_rng(1)
    x = ag.Tensor(rng.normal(size=(16, 32, 32, 32)).astype(dtype), requires_grad=True)
    w = ag.Tensor(rng.normal(size=(16, 32, 3, 3)).astype(dtype), requires_grad=True)

    def step():
        ag.tsum(ag.conv2d(x, w, None, 1, 1)).backward()

    out = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        out[name] = _best(step, repeat)
    return out


def bench_train(steps):
    out = {}
    for name in kernels.available_backends():
        kernels.set_backend(name)
        tr = Trainer(TrainConfig())
        tr.train_step(tr.batch_at(0))  # warm-up
        t0 = time.perf_counter()
        for s in range(1, steps + 1):
            tr.train_step(tr.batch_at(s))
        out[name] = (time.perf_counter() - t0) / steps
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--train-steps", type=int, default=3)
    ap.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    args = ap.parse_args()
    backends = kernels.available_backends()
    if len(backends) < 2:
        print("compiled extension not built; only the numpy backend is available")
    dtype = np.dtype(args.dtype)
    original = kernels.backend()
    try:
        print(f"kernel timings in ms ({args.dtype}, best of {args.repeat})")
        header = ["layer"] + [f"{b}.{op}" for b in backends for op in ("im2col", "col2im")]
        print("\t".join(header))
        for row in bench_kernels(args.repeat, dtype):
            print("\t".join([row[0]] + [f"{t * 1e3:.2f}" for t in row[1:]]))
        conv = bench_conv(args.repeat, dtype)
        print("conv2d fwd+bwd ms\t" + "\t".join(f"{b}={t * 1e3:.1f}" for b, t in conv.items()))
        if args.train_steps:
            tr = bench_train(args.train_steps)
            print("train step s\t" + "\t".join(f"{b}={t:.3f}" for b, t in tr.items()))
    finally:
        kernels.set_backend(original)


if __name__ == "__main__":
    main()
