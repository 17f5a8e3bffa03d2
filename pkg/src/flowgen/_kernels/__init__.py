"""Convolution kernel backends.

A compiled Cython core is used where it measures faster; a pure-NumPy
fallback keeps the package fully functional without a compiler.  The
compiled loops win decisively for thin-channel convolutions (roll-free,
cache-friendly) while the fallback's BLAS-backed tap-GEMMs win once the
channel product grows, so "auto" dispatches on the measured crossover.
Force a backend with

    FLOWGEN_KERNELS = auto | cython | numpy      (default: auto)

The compiled core only handles contiguous float64 arrays; other dtypes are
routed to the NumPy path regardless of the selected backend.
"""

import importlib
import os

import numpy as np

from . import numpy_backend

_choice = os.environ.get("FLOWGEN_KERNELS", "auto").lower()
_core = None
if _choice in ("auto", "cython"):
    try:
        _core = importlib.import_module("._core", __name__)
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "FLOWGEN_KERNELS=cython but the compiled extension is not "
                "available; reinstall with a C compiler or use numpy/auto"
            )

BACKEND = "cython" if _core is not None else "numpy"

# benchmarks/bench_kernels.py: compiled loops beat the BLAS path roughly up
# to this input-channels x output-channels product on commodity x86
_CROSSOVER = 200


def _use_compiled(cin_cout, *arrays):
    if _core is None:
        return False
    if any(a.dtype != np.float64 or not a.flags["C_CONTIGUOUS"] for a in arrays):
        return False
    return _choice == "cython" or cin_cout < _CROSSOVER


def conv2d_forward(x, kernel, stride):
    if _use_compiled(kernel.shape[2] * kernel.shape[3], x, kernel):
        return _core.conv2d_forward(x, kernel, stride)
    return numpy_backend.conv2d_forward(x, kernel, stride)


def conv2d_grad_input(grad_out, kernel, stride, in_shape):
    if _use_compiled(kernel.shape[2] * kernel.shape[3], grad_out, kernel):
        return _core.conv2d_grad_input(grad_out, kernel, stride, tuple(in_shape))
    return numpy_backend.conv2d_grad_input(grad_out, kernel, stride, in_shape)


def conv2d_grad_kernel(x, grad_out, stride, kernel_shape):
    if _use_compiled(kernel_shape[2] * kernel_shape[3], x, grad_out):
        return _core.conv2d_grad_kernel(x, grad_out, stride, tuple(kernel_shape))
    return numpy_backend.conv2d_grad_kernel(x, grad_out, stride, kernel_shape)
