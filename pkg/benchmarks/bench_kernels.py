"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py            # kernel micro-benchmarks
    python benchmarks/bench_kernels.py --train    # plus one training epoch per backend

The training comparison runs each backend in a subprocess, because the
backend is fixed at import time.
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from sttree.kernels import available_backends

CASES = {
    # (B, C, L, F, K): tree routing, attention gates, encoder-sized attention gate
    "proto match  (16x1x25, k=3)": (16, 1, 25, 1, 3),
    "attn gate    (16x2x66, a=3)": (16, 2, 66, 1, 3),
    "attn gate    (112x2x6, a=3)": (112, 2, 6, 1, 3),
    "wide conv    (8x16x256, k=9)": (8, 16, 256, 4, 9),
}

TRAIN_SNIPPET = """
import time
from sttree import BACKEND
from sttree.data import load_dataset, z_normalize, pad_dataset
from sttree.encoder import EncoderConfig
from sttree.model import ModelConfig, STTreeModel
from sttree.trainer import TrainConfig, train
tr, _ = load_dataset({root!r}, "BasicMotions")
tr, _ = z_normalize(tr)
tr = pad_dataset(tr, 4)
m = STTreeModel(ModelConfig(EncoderConfig(num_channels=6, num_classes=4), depth={depth}))
t0 = time.perf_counter()
train(m, tr, None, TrainConfig(epochs={epochs}))
print(BACKEND, time.perf_counter() - t0)
"""


def bench_kernels(number: int) -> None:
    backends = available_backends()
    rng = np.random.default_rng(0)
    print(f"{'case':32s} {'op':12s} " + " ".join(f"{b:>12s}" for b in backends) + "   speedup")
    for label, (b, c, length, f, k) in CASES.items():
        x = rng.normal(size=(b, c, length))
        w = rng.normal(size=(f, c, k))
        g = rng.normal(size=(b, f, length - k + 1))
        rows = np.ascontiguousarray(x.reshape(-1, length))
        ops = {
            "forward": lambda m: m.conv1d_forward(x, w),
            "grad_input": lambda m: m.conv1d_grad_input(g, w, length),
            "grad_kernel": lambda m: m.conv1d_grad_kernel(g, x, k),
            "argmax": lambda m: m.argmax_lastaxis(rows),
        }
        for op, fn in ops.items():
            times = {name: min(timeit.repeat(lambda: fn(mod), number=number, repeat=3)) / number
                     for name, mod in backends.items()}
            cols = " ".join(f"{times[n] * 1e6:10.1f}us" for n in backends)
            speed = ""
            if "cython" in times:
                speed = f"{times['python'] / times['cython']:8.2f}x"
            print(f"{label:32s} {op:12s} {cols} {speed}")


def bench_train(root: str, depth: int, epochs: int) -> None:
    code = TRAIN_SNIPPET.format(root=root, depth=depth, epochs=epochs)
    for pure in ("0", "1"):
        env = dict(os.environ, ST_TREE_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                             text=True, check=True).stdout.split()
        print(f"train depth={depth} epochs={epochs} backend={out[0]:7s} {float(out[1]):7.2f}s")


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--number", type=int, default=200)
    ap.add_argument("--train", action="store_true")
    ap.add_argument("--data-root", default=os.environ.get("ST_TREE_DATA", "data"))
    ap.add_argument("--depth", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=3)
    args = ap.parse_args()
    bench_kernels(args.number)
    if args.train:
        bench_train(args.data_root, args.depth, args.epochs)


if __name__ == "__main__":
    main()
