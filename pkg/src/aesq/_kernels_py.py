"""Pure numpy implementations of the row-wise kernels.

Every function takes and returns C-contiguous float64 arrays; "row-wise"
kernels operate along the last axis of a 2-D array. ``_ckernels`` exposes
the same functions compiled with Cython.
"""

import numpy as np
from scipy.special import erf
from scipy.stats import rankdata

_SQRT1_2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_bwd(y, g):
    return y * (g - (g * y).sum(axis=1, keepdims=True))


def layer_norm_fwd(x, gain, bias, eps):
    mu = x.mean(axis=1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd.ravel()


def layer_norm_bwd(g, xhat, rstd, gain):
    dxhat = g * gain
    h = xhat.shape[1]
    mean_d = dxhat.sum(axis=1, keepdims=True) / h
    mean_dx = (dxhat * xhat).sum(axis=1, keepdims=True) / h
    dx = rstd[:, None] * (dxhat - mean_d - xhat * mean_dx)
    return dx, (g * xhat).sum(axis=0), g.sum(axis=0)


def gelu_fwd(x):
    return x * 0.5 * (1.0 + erf(x * _SQRT1_2))


def gelu_bwd(x, g):
    cdf = 0.5 * (1.0 + erf(x * _SQRT1_2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return g * (cdf + x * pdf)


def emd_fwd(target, pred, eps):
    """Per-row EMD loss. Returns (loss, cdf_diff)."""
    diff = np.cumsum(pred, axis=1) - np.cumsum(target, axis=1)
    loss = np.sqrt((diff * diff).mean(axis=1) + eps)
    return loss, diff


def emd_bwd(diff, loss, g):
    k = diff.shape[1]
    dcdf = diff * (g / (k * loss))[:, None]
    # d/dp_j of sum_k f(C_k) is the suffix sum over k >= j
    return np.cumsum(dcdf[:, ::-1], axis=1)[:, ::-1].copy()


def average_ranks(x):
    return rankdata(x, method="average").astype(np.float64)
