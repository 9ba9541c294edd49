"""Dense float64 tensors with reverse-mode differentiation.

A :class:`Tensor` wraps a C-contiguous ``numpy.float64`` array. Operations
are :class:`Function` subclasses; applying one to tensors that require
gradients records a node in the graph, and :meth:`Tensor.backward` replays
the graph in reverse topological order, accumulating (``+=``) into the
``grad`` of every reachable leaf that requires it.
"""

from __future__ import annotations

import contextlib
import threading
from collections.abc import Callable, Iterator, Sequence

import numpy as np

from . import kernels
from .errors import ContractError, DimensionError, EvaluationError

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph recording (inference only)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_ctx", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, _ctx=None):
        arr = np.array(data, dtype=np.float64, copy=True, order="C") if not (
            isinstance(data, np.ndarray) and data.dtype == np.float64 and data.flags.c_contiguous
        ) else data
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._ctx: Function | None = _ctx
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._ctx is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __add__(self, other: Tensor) -> Tensor:
        return add(self, other)

    def __mul__(self, c: float) -> Tensor:
        return scale(self, c)

    __rmul__ = __mul__

    def sum(self) -> Tensor:
        return tsum(self)

    def mean(self) -> Tensor:
        return tmean(self)

    def reshape(self, *shape: int) -> Tensor:
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        return transpose(self, axes)

    def backward(self) -> None:
        backward(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class Function:
    """One differentiable operation.

    ``forward`` receives raw arrays and may stash whatever ``backward`` needs
    on ``self``. ``backward`` maps the output gradient to a tuple of input
    gradients (``None`` for inputs that need none).
    """

    def __init__(self, *inputs: Tensor):
        self.inputs = inputs

    def forward(self, *arrays: np.ndarray, **kwargs) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs: Tensor, **kwargs) -> Tensor:
        fn = cls(*inputs)
        out = fn.forward(*(t.data for t in inputs), **kwargs)
        track = grad_enabled() and any(t.requires_grad for t in inputs)
        return Tensor(out, requires_grad=track, _ctx=fn if track else None)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead > 0:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class MatMul(Function):
    def forward(self, a, b):
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        a, b = self.a, self.b
        ga = np.matmul(grad, np.swapaxes(b, -1, -2))
        gb = np.matmul(np.swapaxes(a, -1, -2), grad)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


class Add(Function):
    def forward(self, a, b):
        try:
            out = a + b
        except ValueError:
            raise DimensionError(f"add shape mismatch: {a.shape} + {b.shape}") from None
        self.shapes = (a.shape, b.shape)
        return out

    def backward(self, grad):
        sa, sb = self.shapes
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Scale(Function):
    def forward(self, x, c):
        self.c = c
        return x * c

    def backward(self, grad):
        return (grad * self.c,)


class Sum(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array(x.sum())

    def backward(self, grad):
        return (np.full(self.shape, float(grad)),)


class Mean(Function):
    def forward(self, x):
        self.shape = x.shape
        return np.array(x.mean())

    def backward(self, grad):
        return (np.full(self.shape, float(grad) / np.prod(self.shape)),)


class Reshape(Function):
    def forward(self, x, shape):
        self.shape = x.shape
        try:
            return x.reshape(shape).copy()
        except ValueError:
            raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from None

    def backward(self, grad):
        return (grad.reshape(self.shape),)


class Transpose(Function):
    def forward(self, x, axes):
        self.axes = tuple(axes)
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(self.axes))),)


class Softmax(Function):
    def forward(self, x, axis=-1):
        self.axis = axis
        y = kernels.softmax_fwd(np.moveaxis(x, axis, -1))
        self.y = y
        return np.ascontiguousarray(np.moveaxis(y, -1, axis))

    def backward(self, grad):
        g = np.moveaxis(grad, self.axis, -1)
        dx = kernels.softmax_bwd(self.y, g)
        return (np.ascontiguousarray(np.moveaxis(dx, -1, self.axis)),)


class LayerNorm(Function):
    def forward(self, x, gain, bias, eps=1e-5):
        h = x.shape[-1]
        if gain.shape != (h,) or bias.shape != (h,):
            raise DimensionError(
                f"layer_norm gain/bias {gain.shape}/{bias.shape} do not match width {h}"
            )
        y, self.xhat, self.rstd = kernels.layer_norm_fwd(x, gain, bias, eps)
        self.gain = gain
        return y

    def backward(self, grad):
        dx, dgain, dbias = kernels.layer_norm_bwd(grad, self.xhat, self.rstd, self.gain)
        return dx, dgain, dbias


class GELU(Function):
    def forward(self, x):
        self.x = x
        return kernels.gelu_fwd(x)

    def backward(self, grad):
        return (kernels.gelu_bwd(self.x, grad),)


class MeanRows(Function):
    def forward(self, x):
        if x.ndim < 2:
            raise DimensionError(f"mean_rows needs at least 2 dims, got {x.shape}")
        if x.shape[-2] == 0:
            raise ContractError("mean_rows of an empty row set")
        self.shape = x.shape
        return x.mean(axis=-2)

    def backward(self, grad):
        m = self.shape[-2]
        return (np.ascontiguousarray(np.broadcast_to(grad[..., None, :] / m, self.shape)),)


class SelectRow(Function):
    def forward(self, x, index):
        self.shape, self.index = x.shape, index
        return np.ascontiguousarray(x[..., index, :])

    def backward(self, grad):
        out = np.zeros(self.shape)
        out[..., self.index, :] = grad
        return (out,)


class EMD(Function):
    """Per-row EMD between ``pred`` (differentiable) and a constant target."""

    def forward(self, pred, target, eps=0.0):
        if pred.shape != target.shape:
            raise ContractError(f"EMD bin mismatch: {pred.shape} vs {target.shape}")
        self.shape = pred.shape
        loss, self.diff = kernels.emd_fwd(target, pred, eps)
        self.loss = loss
        return loss.reshape(pred.shape[:-1])

    def backward(self, grad):
        g = np.ascontiguousarray(grad, dtype=np.float64).reshape(-1)
        return (kernels.emd_bwd(self.diff, self.loss, g).reshape(self.shape), None)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    return MatMul.apply(as_tensor(a), as_tensor(b))


def add(a: Tensor, b: Tensor) -> Tensor:
    return Add.apply(as_tensor(a), as_tensor(b))


def scale(x: Tensor, c: float) -> Tensor:
    return Scale.apply(as_tensor(x), c=float(c))


def tsum(x: Tensor) -> Tensor:
    return Sum.apply(as_tensor(x))


def tmean(x: Tensor) -> Tensor:
    return Mean.apply(as_tensor(x))


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(as_tensor(x), shape=tuple(shape))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    return Transpose.apply(as_tensor(x), axes=tuple(axes))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ContractError("layer_norm eps must be positive")
    return LayerNorm.apply(as_tensor(x), as_tensor(gain), as_tensor(bias), eps=eps)


def gelu(x: Tensor) -> Tensor:
    return GELU.apply(as_tensor(x))


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean over the row axis (``-2``)."""
    return MeanRows.apply(as_tensor(x))


def select_row(x: Tensor, index: int) -> Tensor:
    return SelectRow.apply(as_tensor(x), index=index)


def emd(pred: Tensor, target, eps: float = 0.0) -> Tensor:
    """EMD loss per distribution (last axis = bins); differentiable in ``pred``."""
    return EMD.apply(as_tensor(pred), as_tensor(target), eps=eps)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._ctx is not None:
            for parent in reversed(node._ctx.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if root.data.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if not root.requires_grad:
        raise ContractError("backward root is not on the tape (no input requires grad)")
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape)}
    for node in reversed(_topo_order(root)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._ctx is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._ctx.inputs, node._ctx.backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


@contextlib.contextmanager
def corrupt_backward(op: type[Function], factor: float = 1.1) -> Iterator[None]:
    """Fault-injection hook: scale every gradient produced by ``op``."""
    original = op.backward

    def broken(self, grad):
        return tuple(None if g is None else g * factor for g in original(self, grad))

    op.backward = broken
    try:
        yield
    finally:
        op.backward = original


def finite_diff_check(
    f: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-5
) -> float:
    """Max relative error between backward() and central differences.

    ``f`` is re-evaluated with each element of each param perturbed by ``±h``.
    The relative error uses ``max(|a|, |b|, 1e-8)`` as the denominator.
    """
    if h <= 0:
        raise ContractError("finite-difference step must be positive")
    for p in params:
        p.zero_grad()
    root = f()
    if not np.isfinite(root.data).all():
        raise EvaluationError("f is not finite at the base point")
    root.backward()
    worst = 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros(p.shape)
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f().item()
            flat[i] = orig - h
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise EvaluationError(f"f is not finite near element {i} of {p.name or p.shape}")
            numeric = (up - down) / (2 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
