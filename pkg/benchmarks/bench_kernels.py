"""Compare the compiled and numpy integer kernels.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints the median time per call for each kernel and for a full quantized
forward pass of the MNIST-shaped network, plus the speed-up, and checks the
two backends agree bit for bit on every input used.
"""
import argparse
import timeit

import numpy as np

from pnetlab import kernels
from pnetlab.kernels import _numpy_impl as npk
from pnetlab.nets import cifar_net, mnist_cryptonets
from pnetlab.numerics import make_rng
from pnetlab.pnet_core import encode_model, forward_batch

try:
    from pnetlab.kernels import _cquant as cq
except ImportError:
    cq = None


def median_time(fn, repeat):
    return float(np.median(timeit.repeat(fn, number=1, repeat=repeat)))


def kernel_cases(rng):
    x = rng.integers(-300, 300, (1, 28, 28, 1))
    w = rng.integers(-100, 100, (5, 5, 5, 1))
    b = rng.integers(-1000, 1000, 5)
    xc = rng.integers(-300, 300, (1, 32, 32, 3))
    wc = rng.integers(-100, 100, (32, 3, 3, 3))
    bc = rng.integers(-1000, 1000, 32)
    xl = rng.integers(-300, 300, (1, 845))
    wl = rng.integers(-100, 100, (100, 845))
    bl = rng.integers(-1000, 1000, 100)
    xp = rng.integers(-300, 300, (1, 32, 32, 32))
    return {
        "conv2d mnist 5x5/2": ("conv2d", (x, w, b, 2, 1, 6, 32)),
        "conv2d cifar 3x3": ("conv2d", (xc, wc, bc, 1, 1, 8, 32)),
        "linear 845->100": ("linear", (xl, wl, bl, 6, 32)),
        "square 32x32x32": ("square", (xp, 8, 32)),
        "avgpool 2x2": ("avgpool", (xp, 2, 64, 8, 32)),
    }


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    if cq is None:
        print("compiled extension not built; only the numpy backend is available")
        return
    rng = make_rng(0)
    print(f"{'case':28s} {'numpy':>10s} {'cython':>10s} {'speed-up':>9s}")
    for name, (fn, a) in kernel_cases(rng).items():
        ref, fast = getattr(npk, fn)(*a), getattr(cq, fn)(*a)
        assert np.array_equal(ref[0], fast[0]) and ref[1] == fast[1], name
        tn = median_time(lambda: getattr(npk, fn)(*a), args.repeat)
        tc = median_time(lambda: getattr(cq, fn)(*a), args.repeat)
        print(f"{name:28s} {tn * 1e6:8.1f}us {tc * 1e6:8.1f}us {tn / tc:8.2f}x")

    for label, fm, shape in (
        ("forward mnist (1 image)", mnist_cryptonets(make_rng(1)), (1, 28, 28, 1)),
        ("forward cifar (1 image)", cifar_net(make_rng(1)), (1, 32, 32, 3)),
    ):
        m = encode_model(fm, bits=10)
        x = rng.random(shape)
        times = {}
        outs = {}
        for backend, mod in (("numpy", npk), ("cython", cq)):
            for k in ("conv2d", "linear", "square", "avgpool"):
                setattr(kernels, k, getattr(mod, k))
            outs[backend] = forward_batch(m, x)[0]
            times[backend] = median_time(lambda: forward_batch(m, x), args.repeat)
        assert np.array_equal(outs["numpy"], outs["cython"])
        print(f"{label:28s} {times['numpy'] * 1e6:8.1f}us {times['cython'] * 1e6:8.1f}us {times['numpy'] / times['cython']:8.2f}x")


if __name__ == "__main__":
    main()
