"""Backend selection for the hot row-wise kernels.

The compiled ``_ckernels`` extension is used when it was built; otherwise the
numpy implementation in ``_kernels_py`` takes over. Setting the environment
variable ``AESQ_PURE_PYTHON=1`` forces the fallback.

The wrappers here accept arrays of any rank and operate along the last axis.
"""

from __future__ import annotations

import os
from types import ModuleType

import numpy as np

from . import _kernels_py


def _load_compiled() -> ModuleType | None:
    try:
        from . import _ckernels
    except ImportError:
        return None
    return _ckernels


def get_backend(name: str) -> ModuleType:
    """Return a kernel module by name (``"cython"`` or ``"python"``)."""
    if name == "python":
        return _kernels_py
    if name == "cython":
        mod = _load_compiled()
        if mod is None:
            raise ImportError("compiled kernels are not built")
        return mod
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends() -> list[str]:
    names = ["python"]
    if _load_compiled() is not None:
        names.insert(0, "cython")
    return names


_compiled = None if os.environ.get("AESQ_PURE_PYTHON") else _load_compiled()
_impl: ModuleType = _compiled if _compiled is not None else _kernels_py
BACKEND = "cython" if _compiled is not None else "python"


def use_backend(name: str) -> None:
    """Switch the active backend for subsequent calls (benchmarks, tests)."""
    global _impl, BACKEND
    _impl = get_backend(name)
    BACKEND = name


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64).reshape(-1, a.shape[-1])


def softmax_fwd(x):
    return _impl.softmax_fwd(_rows(x)).reshape(x.shape)


def softmax_bwd(y, g):
    return _impl.softmax_bwd(_rows(y), _rows(g)).reshape(y.shape)


def layer_norm_fwd(x, gain, bias, eps):
    y, xhat, rstd = _impl.layer_norm_fwd(
        _rows(x), np.ascontiguousarray(gain), np.ascontiguousarray(bias), float(eps)
    )
    return y.reshape(x.shape), xhat, rstd


def layer_norm_bwd(g, xhat, rstd, gain):
    dx, dgain, dbias = _impl.layer_norm_bwd(_rows(g), xhat, rstd, np.ascontiguousarray(gain))
    return dx.reshape(g.shape), dgain, dbias


def gelu_fwd(x):
    return _impl.gelu_fwd(_rows(x)).reshape(x.shape)


def gelu_bwd(x, g):
    return _impl.gelu_bwd(_rows(x), _rows(g)).reshape(x.shape)


def emd_fwd(target, pred, eps):
    return _impl.emd_fwd(_rows(target), _rows(pred), float(eps))


def emd_bwd(diff, loss, g):
    return _impl.emd_bwd(diff, loss, np.ascontiguousarray(g, dtype=np.float64))


def average_ranks(x):
    return _impl.average_ranks(np.ascontiguousarray(x, dtype=np.float64).ravel())
