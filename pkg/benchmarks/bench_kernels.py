"""Compare the compiled and pure-numpy kernels on representative shapes.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from srpvqa import kernels

SHAPES = [(64 * 4 * 8, 8), (512, 32), (4096, 64)]


def cases(rng, rows, cols):
    x = rng.normal(size=(rows, cols))
    mask = (rng.random((rows, cols)) > 0.2).astype(np.uint8)
    gamma, beta = rng.normal(size=cols), rng.normal(size=cols)
    targets = rng.integers(0, cols, size=rows)

    def build(impl):
        y = impl.softmax_forward(x, mask)
        gy = rng.normal(size=x.shape)
        _, xhat, rstd = impl.layer_norm_forward(x, gamma, beta, 1e-5)
        return {
            "softmax_forward": lambda: impl.softmax_forward(x, mask),
            "softmax_backward": lambda: impl.softmax_backward(y, gy),
            "layer_norm_forward": lambda: impl.layer_norm_forward(x, gamma, beta, 1e-5),
            "layer_norm_backward": lambda: impl.layer_norm_backward(gy, xhat, rstd, gamma),
            "cross_entropy_forward": lambda: impl.cross_entropy_forward(x, targets),
        }

    return build


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=200)
    args = parser.parse_args()
    impls = kernels.implementations()
    if "cython" not in impls:
        print("compiled kernels not built; only the numpy backend is available")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22} {'shape':>10} " + " ".join(f"{name + ' us':>12}" for name in impls) + "   speedup")
    for rows, cols in SHAPES:
        build = cases(rng, rows, cols)
        fns = {name: build(impl) for name, impl in impls.items()}
        for kernel in fns["python"]:
            times = {name: min(timeit.repeat(fns[name][kernel], number=args.repeat, repeat=3)) / args.repeat * 1e6
                     for name in impls}
            speed = f"{times['python'] / times['cython']:8.2f}x" if "cython" in times else ""
            print(f"{kernel:<22} {f'{rows}x{cols}':>10} " + " ".join(f"{times[n]:12.1f}" for n in impls) + "  " + speed)


if __name__ == "__main__":
    main()
