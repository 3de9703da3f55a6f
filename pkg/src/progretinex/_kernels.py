"""Fused conv -> max-pool kernels used on the training and inference hot path.

A pointwise conv followed by ReLU and max pooling only ever needs the winning
pixel of each window, so the full ``(n, c_out, h, w)`` activation is never
materialized. Inputs are pixel-major ``(n, h*w, c_in)`` arrays and windows are
given as ``(cells, pixels)`` flat-index tables from ``tensor.pool_windows``.
ReLU commutes with max, so it is applied to the pooled result by the caller.
"""

import numba as nb
import numpy as np


@nb.njit(cache=True, fastmath=True)
def conv_pool_forward(x, wt, bias, windows, out, arg):
    """Pre-activation window maxima ``out[n, o, cell]`` and their local argmax.

    ``wt`` is the transposed kernel ``(c_in, c_out)``. Ties keep the first pixel
    in scan order.
    """
    n = x.shape[0]
    c_in, c_out = wt.shape
    cells, pixels = windows.shape
    best = np.empty(c_out, np.float32)
    barg = np.empty(c_out, np.int32)
    acc = np.empty(c_out, np.float32)
    for s in range(n):
        for cell in range(cells):
            for o in range(c_out):
                best[o] = -np.inf
                barg[o] = 0
            for p in range(pixels):
                q = windows[cell, p]
                for o in range(c_out):
                    acc[o] = bias[o]
                for i in range(c_in):
                    xi = x[s, q, i]
                    for o in range(c_out):
                        acc[o] += wt[i, o] * xi
                for o in range(c_out):
                    if acc[o] > best[o]:
                        best[o] = acc[o]
                        barg[o] = p
            for o in range(c_out):
                out[s, o, cell] = best[o]
                arg[s, o, cell] = barg[o]


@nb.njit(cache=True)
def conv_pool_backward(x, w, windows, arg, grad, grad_w, grad_b, grad_x, need_x):
    """Accumulate gradients of a fused unit given ``grad`` w.r.t. the pooled maxima.

    ``grad_w`` ``(c_out, c_in)`` and ``grad_b`` are float64 accumulators;
    ``grad_x`` (pixel-major, like ``x``) is only touched when ``need_x``.
    """
    n = x.shape[0]
    c_out, c_in = w.shape
    cells = windows.shape[0]
    for s in range(n):
        for cell in range(cells):
            for o in range(c_out):
                g = grad[s, o, cell]
                if g == 0.0:
                    continue
                q = windows[cell, arg[s, o, cell]]
                grad_b[o] += g
                for i in range(c_in):
                    grad_w[o, i] += g * x[s, q, i]
                if need_x:
                    for i in range(c_in):
                        grad_x[s, q, i] += g * w[o, i]
