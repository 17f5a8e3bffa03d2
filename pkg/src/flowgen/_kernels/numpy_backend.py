"""Pure-NumPy reference implementations of the convolution kernels.

Layout conventions (shared with the compiled backend):
  x       (N, H, W, Cin)   input batch, channels last
  kernel  (kh, kw, Cin, Cout)
  out     (N, Ho, Wo, Cout)

Boundary handling is periodic (wrap) in both spatial directions.  Stride 2
evaluates the periodic cross-correlation on every other grid point, so
Ho = H // 2.  The kernel is centered: tap (a, b) reads x at offset
(a - kh//2, b - kw//2).
"""

import numpy as np


def conv2d_forward(x, kernel, stride):
    n, h, w, cin = x.shape
    kh, kw, _, cout = kernel.shape
    ca, cb = kh // 2, kw // 2
    out = np.zeros((n, h // stride, w // stride, cout), dtype=x.dtype)
    acc = out.reshape(-1, cout)
    for a in range(kh):
        for b in range(kw):
            xs = np.roll(x, (ca - a, cb - b), axis=(1, 2))
            if stride == 2:
                xs = xs[:, ::2, ::2, :]
            acc += xs.reshape(-1, cin) @ kernel[a, b]
    return out


def conv2d_grad_input(grad_out, kernel, stride, in_shape):
    n, h, w, cin = in_shape
    kh, kw, _, cout = kernel.shape
    ca, cb = kh // 2, kw // 2
    if stride == 2:
        g = np.zeros((n, h, w, cout), dtype=grad_out.dtype)
        g[:, ::2, ::2, :] = grad_out
    else:
        g = grad_out
    gx = np.zeros(in_shape, dtype=grad_out.dtype)
    acc = gx.reshape(-1, cin)
    for a in range(kh):
        for b in range(kw):
            gs = np.roll(g, (a - ca, b - cb), axis=(1, 2))
            acc += gs.reshape(-1, cout) @ kernel[a, b].T
    return gx


def conv2d_grad_kernel(x, grad_out, stride, kernel_shape):
    kh, kw, cin, cout = kernel_shape
    ca, cb = kh // 2, kw // 2
    gk = np.zeros(kernel_shape, dtype=x.dtype)
    go = grad_out.reshape(-1, cout)
    for a in range(kh):
        for b in range(kw):
            xs = np.roll(x, (ca - a, cb - b), axis=(1, 2))
            if stride == 2:
                xs = xs[:, ::2, ::2, :]
            gk[a, b] = xs.reshape(-1, cin).T @ go
    return gk
