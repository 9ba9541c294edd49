"""EMD loss over score-distribution CDFs, and SRCC / PLCC evaluation metrics."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ContractError, UndefinedCorrelationError, ValidationError
from .tensor import Tensor, emd

# Training adds this inside the square root so the gradient stays finite at
# zero loss. It shifts the loss by less than 1e-6.
TRAIN_EPS = 1e-12


def _as_dist(d, name: str) -> np.ndarray:
    arr = np.asarray(d, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] < 2:
        raise ValidationError(f"{name} needs at least 2 bins, got shape {arr.shape}")
    if (arr < 0).any():
        raise ValidationError(f"{name} has a negative bin")
    sums = arr.sum(axis=-1)
    if not np.allclose(sums, 1.0, rtol=0.0, atol=1e-6):
        raise ValidationError(f"{name} does not sum to 1 (sum={np.ravel(sums)[0]!r})")
    return arr


def cdf(d) -> np.ndarray:
    """Cumulative distribution along the last axis: ``CDF(k) = sum_{i<=k} d_i``."""
    return np.cumsum(_as_dist(d, "distribution"), axis=-1)


def emd_loss(d, d_hat, eps: float = 0.0):
    """Root-mean-square difference between the CDFs of ``d`` and ``d_hat``.

    With a :class:`Tensor` ``d_hat`` the result is a differentiable Tensor
    (one loss per distribution); otherwise a float, or an array for
    batched inputs.
    """
    if isinstance(d_hat, Tensor):
        target = _as_dist(d, "target")
        if target.shape != d_hat.shape:
            raise ContractError(f"bin count mismatch: {target.shape} vs {d_hat.shape}")
        return emd(d_hat, target, eps=eps)
    a = _as_dist(d, "target")
    b = _as_dist(d_hat, "prediction")
    if a.shape[-1] != b.shape[-1]:
        raise ContractError(f"bin count mismatch: K={a.shape[-1]} vs K={b.shape[-1]}")
    diff = np.cumsum(a, axis=-1) - np.cumsum(b, axis=-1)
    out = np.sqrt((diff * diff).mean(axis=-1) + eps)
    return float(out) if out.ndim == 0 else out


def _check_pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ContractError(f"length mismatch: {x.size} vs {y.size}")
    if x.size < 2:
        raise ContractError("correlation needs at least 2 samples")
    return x, y


def plcc(x, y) -> float:
    """Pearson linear correlation coefficient."""
    x, y = _check_pair(x, y)
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant input")
    r = float(xc @ yc) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def srcc(x, y) -> float:
    """Spearman rank correlation: Pearson correlation of average ranks."""
    x, y = _check_pair(x, y)
    return plcc(kernels.average_ranks(x), kernels.average_ranks(y))
