"""Pure-numpy implementations of the sliding-window kernels.

Every function here has a twin in ``_ckernels.pyx`` with an identical
signature; :mod:`sttree.kernels` picks one at import time.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv1d_forward(x, w):
    """Valid cross-correlation. x: (B, C, L), w: (F, C, K) -> (B, F, L-K+1)."""
    k = w.shape[2]
    win = sliding_window_view(x, k, axis=2)  # (B, C, Lo, K)
    return np.ascontiguousarray(np.einsum("bcjk,fck->bfj", win, w, optimize=True))


def conv1d_grad_input(g, w, length):
    b, f, lo = g.shape
    _, c, k = w.shape
    gx = np.zeros((b, c, length))
    for t in range(k):
        # out[b, f, j] += x[b, c, j + t] * w[f, c, t]
        gx[:, :, t : t + lo] += np.einsum("bfj,fc->bcj", g, w[:, :, t])
    return gx


def conv1d_grad_kernel(g, x, k):
    win = sliding_window_view(x, k, axis=2)  # (B, C, Lo, K)
    return np.ascontiguousarray(np.einsum("bfj,bcjk->fck", g, win, optimize=True))


def argmax_lastaxis(x):
    """Row-wise max and first index attaining it. x: (N, L)."""
    idx = np.argmax(x, axis=1)
    vals = x[np.arange(x.shape[0]), idx]
    return np.ascontiguousarray(vals), idx.astype(np.int64)
