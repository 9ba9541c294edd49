"""Learnable queries, the querying transformer and the DOS prediction head.

Blocks are post-norm: ``x = LN(x + sublayer(x))``. Every block runs
self-attention over the queries and a feed-forward layer; blocks 0, 2, 4, ...
additionally cross-attend to the frozen image embeddings between the two.
"""

from __future__ import annotations

import enum
from collections.abc import Iterator
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .tensor import (
    Tensor,
    add,
    as_tensor,
    gelu,
    layer_norm,
    matmul,
    mean_rows,
    reshape,
    scale,
    select_row,
    softmax,
    transpose,
)

INIT_STD = 0.02
LN_EPS = 1e-5


class EmbeddingMode(str, enum.Enum):
    LQ = "LQ"
    CLS = "CLS"
    CLS_P = "CLS+P"


@dataclass(frozen=True)
class ModelConfig:
    m: int = 2
    hq: int = 16
    hv: int = 24
    num_blocks: int = 4
    num_heads: int = 2
    ffn_mult: int = 4
    k: int = 10
    n_patches: int = 16
    seed: int = 0
    mode: EmbeddingMode = EmbeddingMode.LQ

    def validate(self) -> None:
        sizes = {name: getattr(self, name) for name in
                 ("m", "hq", "hv", "num_blocks", "num_heads", "ffn_mult", "n_patches")}
        for name, value in sizes.items():
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value!r}")
        if self.k < 2:
            raise ConfigError(f"k must be at least 2, got {self.k}")
        if self.hq % self.num_heads:
            raise ConfigError(f"hq={self.hq} is not divisible by num_heads={self.num_heads}")
        if self.num_blocks % 2:
            raise ConfigError(f"num_blocks must be even, got {self.num_blocks}")
        EmbeddingMode(self.mode)

    @property
    def head_input(self) -> int:
        return self.hq if EmbeddingMode(self.mode) is EmbeddingMode.LQ else self.hv

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mode"] = EmbeddingMode(self.mode).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        d["mode"] = EmbeddingMode(d.get("mode", "LQ"))
        return cls(**d)


def has_cross_attention(block: int) -> bool:
    return block % 2 == 0


class Model:
    """Parameters of the query bank, querying transformer and prediction head.

    ``params`` maps dotted names to leaf tensors in a fixed order; the
    optimiser and checkpoints rely on that order. In the CLS and CLS+P
    baselines only the head exists.
    """

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        self.config = config
        self.params = params

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield from self.params.items()

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def attention_params(self, block: int, kind: str) -> dict[str, Tensor]:
        prefix = f"blocks.{block}.{kind}."
        return {k[len(prefix):]: v for k, v in self.params.items() if k.startswith(prefix)}

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}


def _param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...], str]]:
    shapes: list[tuple[str, tuple[int, ...], str]] = []
    if EmbeddingMode(cfg.mode) is EmbeddingMode.LQ:
        hq, hv, hf = cfg.hq, cfg.hv, cfg.ffn_mult * cfg.hq
        shapes.append(("q", (cfg.m, hq), "normal"))
        for i in range(cfg.num_blocks):
            sublayers = [("self_attn", hq)]
            if has_cross_attention(i):
                sublayers.append(("cross_attn", hv))
            for kind, hkv in sublayers:
                p = f"blocks.{i}.{kind}."
                # no key bias: it shifts every score of a query equally, so softmax ignores it
                shapes += [
                    (p + "wq", (hq, hq), "normal"), (p + "bq", (hq,), "zeros"),
                    (p + "wk", (hkv, hq), "normal"),
                    (p + "wv", (hkv, hq), "normal"), (p + "bv", (hq,), "zeros"),
                    (p + "wo", (hq, hq), "normal"), (p + "bo", (hq,), "zeros"),
                    (f"blocks.{i}.ln_{kind}.gain", (hq,), "ones"),
                    (f"blocks.{i}.ln_{kind}.bias", (hq,), "zeros"),
                ]
            p = f"blocks.{i}.ffn."
            shapes += [
                (p + "w1", (hq, hf), "normal"), (p + "b1", (hf,), "zeros"),
                (p + "w2", (hf, hq), "normal"), (p + "b2", (hq,), "zeros"),
                (f"blocks.{i}.ln_ffn.gain", (hq,), "ones"),
                (f"blocks.{i}.ln_ffn.bias", (hq,), "zeros"),
            ]
    shapes += [("head.w", (cfg.head_input, cfg.k), "normal"), ("head.b", (cfg.k,), "zeros")]
    return shapes


def init_model(config: ModelConfig) -> Model:
    """Seeded initialisation: weights ~ N(0, 0.02^2), biases 0, layer-norm gains 1."""
    config.validate()
    rng = np.random.default_rng(config.seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in _param_shapes(config):
        if kind == "normal":
            data = rng.normal(0.0, INIT_STD, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return Model(config, params)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, n, h = x.shape
    return transpose(reshape(x, (b, n, heads, h // heads)), (0, 2, 1, 3))


def attention(
    queries_in: Tensor,
    keys_vals_in: Tensor,
    params: dict[str, Tensor],
    num_heads: int,
    return_weights: bool = False,
):
    """Multi-head scaled dot-product attention.

    ``queries_in`` is ``(A, H_q)`` or ``(B, A, H_q)``; ``keys_vals_in`` is
    ``(L, H_kv)`` or ``(B, L, H_kv)``. Returns ``(A, H_q)`` (or batched), and
    the ``(B, heads, A, L)`` attention weights when asked.
    """
    x, kv = as_tensor(queries_in), as_tensor(keys_vals_in)
    single = x.ndim == 2
    if single:
        x = reshape(x, (1,) + x.shape)
    if kv.ndim == 2:
        kv = reshape(kv, (1,) + kv.shape)
    if x.ndim != 3 or kv.ndim != 3 or x.shape[0] != kv.shape[0]:
        raise DimensionError(f"attention inputs {x.shape} / {kv.shape} are not aligned")
    hq = params["wq"].shape[1]
    if hq % num_heads:
        raise DimensionError(f"width {hq} cannot split into {num_heads} heads")
    if x.shape[-1] != params["wq"].shape[0] or kv.shape[-1] != params["wk"].shape[0]:
        raise DimensionError(
            f"attention inputs {x.shape} / {kv.shape} do not match projections "
            f"{params['wq'].shape} / {params['wk'].shape}"
        )
    b, a, _ = x.shape
    q = _split_heads(add(matmul(x, params["wq"]), params["bq"]), num_heads)
    k = _split_heads(matmul(kv, params["wk"]), num_heads)
    v = _split_heads(add(matmul(kv, params["wv"]), params["bv"]), num_heads)
    scores = scale(matmul(q, transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(hq // num_heads))
    weights = softmax(scores, axis=-1)
    ctx = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (b, a, hq))
    out = add(matmul(ctx, params["wo"]), params["bo"])
    if single:
        out = reshape(out, (a, hq))
    return (out, weights) if return_weights else out


def _feed_forward(x: Tensor, model: Model, block: int) -> Tensor:
    p = f"blocks.{block}.ffn."
    h = gelu(add(matmul(x, model[p + "w1"]), model[p + "b1"]))
    return add(matmul(h, model[p + "w2"]), model[p + "b2"])


def _residual_norm(x: Tensor, update: Tensor, model: Model, name: str) -> Tensor:
    return layer_norm(add(x, update), model[name + ".gain"], model[name + ".bias"], LN_EPS)


def _batched_embeddings(e_v, cfg: ModelConfig) -> tuple[Tensor, bool]:
    e_v = as_tensor(e_v)
    single = e_v.ndim == 2
    if single:
        e_v = reshape(e_v, (1,) + e_v.shape)
    expected = (1 + cfg.n_patches, cfg.hv)
    if e_v.ndim != 3 or e_v.shape[1:] != expected:
        raise DimensionError(f"image embeddings {e_v.shape} do not match config {expected}")
    return e_v, single


def qformer_forward(model: Model, e_v, trace: list[int] | None = None) -> Tensor:
    """Output query embeddings ``(M, H_q)`` (``(B, M, H_q)`` for a batch).

    When ``trace`` is a list, the index of every block that runs
    cross-attention is appended to it.
    """
    cfg = model.config
    if EmbeddingMode(cfg.mode) is not EmbeddingMode.LQ:
        raise ContractError(f"{cfg.mode.value} model has no querying transformer")
    e_v, single = _batched_embeddings(e_v, cfg)
    b = e_v.shape[0]
    q = model["q"]
    x = add(Tensor(np.zeros((b,) + q.shape)), q)
    for i in range(cfg.num_blocks):
        sa = attention(x, x, model.attention_params(i, "self_attn"), cfg.num_heads)
        x = _residual_norm(x, sa, model, f"blocks.{i}.ln_self_attn")
        if has_cross_attention(i):
            if trace is not None:
                trace.append(i)
            ca = attention(x, e_v, model.attention_params(i, "cross_attn"), cfg.num_heads)
            x = _residual_norm(x, ca, model, f"blocks.{i}.ln_cross_attn")
        x = _residual_norm(x, _feed_forward(x, model, i), model, f"blocks.{i}.ln_ffn")
    return reshape(x, q.shape) if single else x


def aesthetic_embedding(e_q, e_v, mode: EmbeddingMode) -> Tensor:
    """Pool to one vector: mean of query embeddings (LQ), CLS row, or mean of all rows."""
    mode = EmbeddingMode(mode)
    if mode is EmbeddingMode.LQ:
        if e_q is None:
            raise ContractError("LQ mode needs query embeddings")
        return mean_rows(e_q)
    if e_v is None:
        raise ContractError(f"{mode.value} mode needs image embeddings")
    e_v = as_tensor(e_v)
    if e_v.ndim < 2 or e_v.shape[-2] < 1:
        raise ContractError(f"image embeddings have shape {e_v.shape}")
    if mode is EmbeddingMode.CLS:
        return select_row(e_v, 0)
    return mean_rows(e_v)


def predict_dos(e_a, head_w: Tensor, head_b: Tensor) -> Tensor:
    """softmax(e_a W + b): the predicted K-bin distribution."""
    e_a = as_tensor(e_a)
    if e_a.shape[-1] != head_w.shape[0]:
        raise ContractError(f"embedding width {e_a.shape[-1]} does not match head {head_w.shape}")
    single = e_a.ndim == 1
    x = reshape(e_a, (1, e_a.shape[0])) if single else e_a
    out = softmax(add(matmul(x, head_w), head_b), axis=-1)
    return reshape(out, (head_w.shape[1],)) if single else out


def forward(model: Model, e_v, trace: list[int] | None = None) -> Tensor:
    """Frozen embeddings to predicted DOS, for one image or a batch."""
    mode = EmbeddingMode(model.config.mode)
    e_v, single = _batched_embeddings(e_v, model.config)
    e_q = qformer_forward(model, e_v, trace) if mode is EmbeddingMode.LQ else None
    e_a = aesthetic_embedding(e_q, e_v, mode)
    d_hat = predict_dos(e_a, model["head.w"], model["head.b"])
    return reshape(d_hat, (model.config.k,)) if single else d_hat
