"""Finite-difference verification of every differentiable op and the full model loss."""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .metrics import TRAIN_EPS, emd_loss
from .qformer import ModelConfig, attention, forward, init_model
from .tensor import Tensor, finite_diff_check

TOLERANCE = 1e-4
STEP = 1e-5
# Entries below this sit at the central-difference roundoff floor (~1e-11 / h), where a
# 1e-4 relative check is meaningless. Points hitting one are redrawn, a bounded number of times.
GRAD_FLOOR = 1e-6
MAX_REDRAWS = 20

# Toy dims for the end-to-end check.
GRADCHECK_MODEL = ModelConfig(m=2, hq=8, hv=12, num_blocks=2, num_heads=2, ffn_mult=4, k=5,
                              n_patches=4, seed=0)

Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]

# Fault-injection targets for --corrupt.
OP_CLASSES: dict[str, type[T.Function]] = {
    "matmul": T.MatMul,
    "add": T.Add,
    "softmax": T.Softmax,
    "layer_norm": T.LayerNorm,
    "gelu": T.GELU,
    "mean_rows": T.MeanRows,
    "reshape": T.Reshape,
    "transpose": T.Transpose,
    "emd": T.EMD,
}


def _leaf(rng: np.random.Generator, *shape: int, std: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _project(x: Tensor, rng: np.random.Generator) -> Tensor:
    # fixed random linear functional, so f is not a plain sum
    n = x.data.size
    c = Tensor(rng.normal(size=(n, 1)))
    return T.tsum(T.matmul(T.reshape(x, (1, n)), c))


def _shape(rng, lo=1, hi=5, n=2):
    return tuple(int(v) for v in rng.integers(lo, hi + 1, size=n))


def case_matmul(rng):
    r, s, t = _shape(rng, n=3)
    a, b = _leaf(rng, r, s), _leaf(rng, s, t)
    c = Tensor(rng.normal(size=(r * t, 1)))
    return (lambda: T.tsum(T.matmul(T.reshape(T.matmul(a, b), (1, r * t)), c))), [a, b]


def case_batched_matmul(rng):
    bsz, r, s, t = _shape(rng, n=4)
    a, b = _leaf(rng, bsz, r, s), _leaf(rng, s, t)
    proj_seed = int(rng.integers(1 << 31))
    return (lambda: _project(T.matmul(a, b), np.random.default_rng(proj_seed))), [a, b]


def _with_projection(rng, build):
    proj_seed = int(rng.integers(1 << 31))
    return lambda: _project(build(), np.random.default_rng(proj_seed))


def case_add(rng):
    r, s = _shape(rng)
    a, b = _leaf(rng, r, s), _leaf(rng, s)
    return _with_projection(rng, lambda: T.add(a, b)), [a, b]


def case_scale(rng):
    x = _leaf(rng, *_shape(rng))
    c = float(rng.normal())
    return _with_projection(rng, lambda: T.scale(x, c)), [x]


def case_softmax(rng):
    r, s = _shape(rng, lo=2)
    x = _leaf(rng, r, s)
    axis = int(rng.integers(0, 2))
    return _with_projection(rng, lambda: T.softmax(x, axis=axis)), [x]


def case_layer_norm(rng):
    # width 2 normalises every row to (+-1, -+1): the x-gradient is ~eps, pure roundoff
    r, s = int(rng.integers(1, 6)), int(rng.integers(3, 6))
    x, g, b = _leaf(rng, r, s), _leaf(rng, s), _leaf(rng, s)
    return _with_projection(rng, lambda: T.layer_norm(x, g, b, 1e-5)), [x, g, b]


def case_gelu(rng):
    x = _leaf(rng, *_shape(rng))
    return _with_projection(rng, lambda: T.gelu(x)), [x]


def case_mean_rows(rng):
    x = _leaf(rng, *_shape(rng))
    return _with_projection(rng, lambda: T.mean_rows(x)), [x]


def case_reshape_transpose(rng):
    r, s, t = _shape(rng, n=3)
    x = _leaf(rng, r, s, t)
    perm = tuple(int(v) for v in rng.permutation(3))
    return _with_projection(rng, lambda: T.transpose(T.reshape(x, (r, s, t)), perm)), [x]


def case_select_row(rng):
    r, s = _shape(rng)
    x = _leaf(rng, r, s)
    i = int(rng.integers(0, r))
    return _with_projection(rng, lambda: T.select_row(x, i)), [x]


def case_emd(rng):
    h, k = int(rng.integers(2, 6)), int(rng.integers(2, 11))
    w, x = _leaf(rng, h, k, std=0.5), _leaf(rng, 1, h, std=0.5)
    d = rng.dirichlet(np.ones(k))[None, :]
    return (lambda: T.tsum(emd_loss(d, T.softmax(T.matmul(x, w), axis=-1)))), [w, x]


def _attention_params(rng, hq, hkv, std=0.5):
    return {
        "wq": _leaf(rng, hq, hq, std=std), "bq": _leaf(rng, hq, std=std),
        "wk": _leaf(rng, hkv, hq, std=std),
        "wv": _leaf(rng, hkv, hq, std=std), "bv": _leaf(rng, hq, std=std),
        "wo": _leaf(rng, hq, hq, std=std), "bo": _leaf(rng, hq, std=std),
    }


def case_self_attention(rng):
    # at least two keys: with a single key the query/key projections get zero gradient
    a, heads = int(rng.integers(2, 4)), int(rng.integers(1, 3))
    hq = heads * int(rng.integers(1, 4))
    x = _leaf(rng, a, hq)
    params = _attention_params(rng, hq, hq)
    return (_with_projection(rng, lambda: attention(x, x, params, heads)),
            [x, *params.values()])


def case_cross_attention(rng):
    a, b, heads = int(rng.integers(1, 4)), int(rng.integers(2, 5)), int(rng.integers(1, 3))
    hq, hkv = heads * int(rng.integers(1, 4)), int(rng.integers(1, 6))
    x, kv = _leaf(rng, 2, a, hq), _leaf(rng, 2, b, hkv)
    params = _attention_params(rng, hq, hkv)
    return (_with_projection(rng, lambda: attention(x, kv, params, heads)),
            [x, kv, *params.values()])


def full_model_case(rng, config: ModelConfig = GRADCHECK_MODEL, batch: int = 2,
                    spread: float = 0.5):
    """Mean training loss of the full model at a random (non-initial) parameter point.

    The point is moved off the N(0, 0.02) initialisation so that gradient
    entries sit well above the finite-difference roundoff floor.
    """
    model = init_model(config)
    for name, p in model.named_parameters():
        base = 1.0 if name.endswith(".gain") else 0.0
        p.data[...] = base + rng.normal(0.0, spread, size=p.shape)
    e_v = Tensor(rng.normal(size=(batch, 1 + config.n_patches, config.hv)))
    d = rng.dirichlet(np.ones(config.k), size=batch)

    def f():
        return T.tmean(emd_loss(d, forward(model, e_v), eps=TRAIN_EPS))

    return f, model.parameters()


OP_CASES: dict[str, Case] = {
    "matmul": case_matmul,
    "matmul_batched": case_batched_matmul,
    "add": case_add,
    "scale": case_scale,
    "softmax": case_softmax,
    "layer_norm": case_layer_norm,
    "gelu": case_gelu,
    "mean_rows": case_mean_rows,
    "reshape_transpose": case_reshape_transpose,
    "select_row": case_select_row,
    "emd": case_emd,
    "self_attention": case_self_attention,
    "cross_attention": case_cross_attention,
}


@dataclass(frozen=True)
class CheckResult:
    name: str
    instances: int
    max_rel_error: float
    passed: bool
    redrawn: int = 0


def check_case(name: str, case: Case, instances: int, seed: int, h: float = STEP,
               tol: float = TOLERANCE, floor: float = GRAD_FLOOR) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst, redrawn = 0.0, 0
    for _ in range(instances):
        for _attempt in range(MAX_REDRAWS):
            f, params = case(rng)
            if floor <= 0 or _min_abs_grad(f, params) >= floor:
                break
            redrawn += 1
        worst = max(worst, finite_diff_check(f, params, h))
    return CheckResult(name, instances, float(worst), bool(worst < tol), redrawn)


def _min_abs_grad(f, params) -> float:
    for p in params:
        p.grad = None
    T.backward(f())
    # exact zeros are structural (unselected rows etc.) and check fine against the 1e-8 floor
    mags = np.concatenate([np.abs(p.grad).ravel() for p in params if p.grad is not None])
    for p in params:
        p.grad = None
    nonzero = mags[mags > 0]
    return float(nonzero.min()) if nonzero.size else np.inf


def run_gradcheck(seed: int = 0, instances: int = 5, h: float = STEP,
                  tol: float = TOLERANCE) -> list[CheckResult]:
    results = []
    for i, (name, case) in enumerate(OP_CASES.items()):
        results.append(check_case(name, case, instances, seed + 7919 * i, h, tol))
    # the full model's point is conditioned by its spread instead; ~2k entries always include a few tiny ones
    results.append(check_case("full_model", full_model_case, 1, seed, h, tol, floor=0.0))
    return results
