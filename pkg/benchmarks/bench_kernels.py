"""Benchmark the compiled convolution kernels against the NumPy fallback.

Run:  python benchmarks/bench_kernels.py [--repeat 5]

Reports per-call milliseconds for forward / input-gradient / kernel-gradient
at the field shapes the denoiser actually uses, plus a full
denoiser forward+backward comparison driven through the autodiff tape.
"""

import argparse
import os
import time

import numpy as np


def timeit(fn, repeat):
    fn()  # warm up
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best * 1e3


def bench_conv(repeat):
    from flowgen._kernels import numpy_backend

    try:
        from flowgen._kernels import _core
    except ImportError:
        _core = None
        print("compiled core unavailable; showing fallback only")

    rng = np.random.default_rng(0)
    cases = [
        ("stem 64x64x4->32", (4, 64, 64, 4), (3, 3, 4, 32), 1),
        ("mid 16x16x128", (4, 16, 16, 128), (3, 3, 128, 128), 1),
        ("down 32x32x64", (4, 32, 32, 32), (3, 3, 32, 64), 2),
        ("small 8x8x16", (8, 8, 8, 16), (3, 3, 16, 16), 1),
    ]
    header = f"{'case':<22}{'op':<10}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}"
    print(header)
    print("-" * len(header))
    for name, xs, ks, stride in cases:
        x = rng.standard_normal(xs)
        k = rng.standard_normal(ks)
        g = rng.standard_normal(
            (xs[0], xs[1] // stride, xs[2] // stride, ks[3])
        )
        ops = {
            "forward": (
                lambda: numpy_backend.conv2d_forward(x, k, stride),
                (lambda: _core.conv2d_forward(x, k, stride)) if _core else None,
            ),
            "grad_in": (
                lambda: numpy_backend.conv2d_grad_input(g, k, stride, x.shape),
                (lambda: _core.conv2d_grad_input(g, k, stride, x.shape))
                if _core else None,
            ),
            "grad_k": (
                lambda: numpy_backend.conv2d_grad_kernel(x, g, stride, k.shape),
                (lambda: _core.conv2d_grad_kernel(x, g, stride, k.shape))
                if _core else None,
            ),
        }
        for opname, (f_np, f_cy) in ops.items():
            t_np = timeit(f_np, repeat)
            if f_cy is None:
                print(f"{name:<22}{opname:<10}{t_np:>10.3f}{'-':>11}{'-':>9}")
            else:
                t_cy = timeit(f_cy, repeat)
                print(
                    f"{name:<22}{opname:<10}{t_np:>10.3f}{t_cy:>11.3f}"
                    f"{t_np / t_cy:>8.2f}x"
                )


def bench_denoiser(repeat):
    """Forward+backward of the field denoiser under each backend selection
    ("auto" dispatches per conv on the measured channel-product crossover)."""
    import importlib

    results = {}
    for backend in ("numpy", "cython", "auto"):
        os.environ["FLOWGEN_KERNELS"] = backend
        import flowgen._kernels as K

        importlib.reload(K)
        if backend == "cython" and K.BACKEND != "cython":
            print(f"(backend {backend} unavailable, skipping)")
            continue
        import flowgen.nn as nn
        import flowgen.tensor as T
        from flowgen.rng import RngStream

        rng = RngStream(0)
        desc = nn.MiniUvitDescriptor(2, 2, grid=32, base_width=16, levels=2,
                                     res_blocks=1, heads=4, fourier_dim=16)
        lay = desc.layout()
        p = lay.init_params(rng) + 0.02 * rng.normal((lay.total,))
        un = rng.normal((2, 32, 32, 2))
        uc = rng.normal((2, 32, 32, 2))

        def run():
            T.gradient_of(
                lambda q: (nn.mini_uvit_forward(q, desc, T.Tensor(un),
                                                T.Tensor(uc), 0.5, 0.5) ** 2).sum(),
                T.Tensor(p),
            )

        results[backend] = timeit(run, repeat)
    os.environ.pop("FLOWGEN_KERNELS", None)
    print()
    for backend, ms in results.items():
        print(f"denoiser fwd+bwd ({backend:>6}): {ms:8.1f} ms")
    if len(results) == 2:
        print(f"speedup: {results['numpy'] / results['cython']:.2f}x")


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_conv(args.repeat)
    bench_denoiser(args.repeat)
