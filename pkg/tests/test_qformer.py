from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aesq.errors import ConfigError, ContractError, DimensionError
from aesq.qformer import (
    EmbeddingMode,
    Model,
    ModelConfig,
    aesthetic_embedding,
    attention,
    forward,
    has_cross_attention,
    init_model,
    predict_dos,
    qformer_forward,
)
from aesq.tensor import Tensor, tsum

seeds = st.integers(0, 2**32 - 1)
SMALL = ModelConfig(m=3, hq=8, hv=6, num_blocks=2, num_heads=2, k=5, n_patches=4)


def _e_v(cfg, rng, batch=None):
    shape = (1 + cfg.n_patches, cfg.hv) if batch is None else (batch, 1 + cfg.n_patches, cfg.hv)
    return rng.normal(size=shape)


def _spread(model, rng, std=0.3):
    # move off the tiny initialisation so differences are visible
    for name, p in model.named_parameters():
        p.data[...] = (1.0 if name.endswith(".gain") else 0.0) + rng.normal(0, std, size=p.shape)
    return model


def _attn_params(rng, hq, hkv):
    shapes = {"wq": (hq, hq), "bq": (hq,), "wk": (hkv, hq), "wv": (hkv, hq), "bv": (hq,),
              "wo": (hq, hq), "bo": (hq,)}
    return {k: Tensor(rng.normal(size=s)) for k, s in shapes.items()}


# -- parameters


def test_init_is_seeded():
    a, b = init_model(ModelConfig(seed=3)), init_model(ModelConfig(seed=3))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = init_model(ModelConfig(seed=4))
    assert any(not np.array_equal(pa.data, pc.data) for pa, pc in zip(a.parameters(), c.parameters()))


def test_query_shape_and_head():
    model = init_model(ModelConfig(m=2, hq=16))
    assert model["q"].shape == (2, 16)
    assert model["head.w"].shape == (16, 10)


def test_baselines_have_only_a_head():
    model = init_model(ModelConfig(mode=EmbeddingMode.CLS, hv=24))
    assert sorted(model.params) == ["head.b", "head.w"]
    assert model["head.w"].shape == (24, 10)


@pytest.mark.parametrize("bad", [
    dict(num_blocks=3), dict(hq=15, num_heads=2), dict(m=0), dict(k=1), dict(mode="avg"),
])
def test_config_validation(bad):
    with pytest.raises((ConfigError, ValueError)):
        init_model(replace(ModelConfig(), **bad))


def test_config_dict_roundtrip():
    cfg = ModelConfig(m=4, mode=EmbeddingMode.CLS_P)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


# -- attention


def test_attention_weights_normalised():
    rng = np.random.default_rng(0)
    p = _attn_params(rng, 4, 3)
    _, w = attention(Tensor(rng.normal(size=(5, 4))), Tensor(rng.normal(size=(7, 3))), p, 2,
                     return_weights=True)
    assert w.shape == (1, 2, 5, 7)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_single_key_collapses():
    rng = np.random.default_rng(1)
    p = _attn_params(rng, 4, 3)
    key = rng.normal(size=(1, 3))
    out = attention(Tensor(rng.normal(size=(6, 4))), Tensor(key), p, 2).data
    expected = (key @ p["wv"].data + p["bv"].data) @ p["wo"].data + p["bo"].data
    np.testing.assert_allclose(out, np.repeat(expected, 6, axis=0), rtol=0, atol=1e-12)


@settings(max_examples=25)
@given(seeds)
def test_attention_key_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    p = _attn_params(rng, 4, 3)
    x, kv = rng.normal(size=(3, 4)), rng.normal(size=(6, 3))
    perm = rng.permutation(6)
    a = attention(Tensor(x), Tensor(kv), p, 2).data
    b = attention(Tensor(x), Tensor(kv[perm]), p, 2).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-9)


def test_attention_shape_errors():
    rng = np.random.default_rng(2)
    p = _attn_params(rng, 4, 3)
    with pytest.raises(DimensionError):
        attention(Tensor(np.ones((2, 5))), Tensor(np.ones((3, 3))), p, 2)
    with pytest.raises(DimensionError):
        attention(Tensor(np.ones((2, 4))), Tensor(np.ones((3, 3))), p, 3)


# -- querying transformer


def test_cross_attention_on_even_blocks():
    assert [i for i in range(6) if has_cross_attention(i)] == [0, 2, 4]
    model = init_model(ModelConfig(num_blocks=6, n_patches=4))
    trace = []
    forward(model, _e_v(model.config, np.random.default_rng(0)), trace)
    assert trace == [0, 2, 4]


def test_qformer_output_shape():
    model = init_model(SMALL)
    rng = np.random.default_rng(0)
    assert qformer_forward(model, _e_v(SMALL, rng)).shape == (3, 8)
    assert qformer_forward(model, _e_v(SMALL, rng, batch=4)).shape == (4, 3, 8)


@settings(max_examples=20, deadline=None)
@given(seeds)
def test_query_permutation_equivariance(seed):
    rng = np.random.default_rng(seed)
    model = _spread(init_model(SMALL), rng)
    e_v = _e_v(SMALL, rng)
    out = qformer_forward(model, e_v).data
    perm = rng.permutation(SMALL.m)
    model["q"].data = model["q"].data[perm].copy()
    np.testing.assert_allclose(qformer_forward(model, e_v).data, out[perm], rtol=0, atol=1e-9)
    pooled = aesthetic_embedding(Tensor(out), None, EmbeddingMode.LQ).data
    np.testing.assert_allclose(aesthetic_embedding(Tensor(out[perm]), None, "LQ").data, pooled,
                               rtol=0, atol=1e-9)


def test_batched_matches_single():
    rng = np.random.default_rng(5)
    model = _spread(init_model(SMALL), rng)
    batch = _e_v(SMALL, rng, batch=3)
    together = forward(model, batch).data
    for i in range(3):
        np.testing.assert_allclose(forward(model, batch[i]).data, together[i], rtol=0, atol=1e-12)


def test_frozen_embeddings_get_no_grad():
    rng = np.random.default_rng(0)
    model = init_model(SMALL)
    e_v = Tensor(_e_v(SMALL, rng))
    tsum(forward(model, e_v)).backward()
    assert e_v.grad is None and not e_v.requires_grad
    assert all(p.grad is not None for p in model.parameters())


def test_wrong_embedding_shape():
    with pytest.raises(DimensionError):
        forward(init_model(SMALL), np.zeros((4, SMALL.hv)))


# -- pooling and head


def test_lq_single_query_is_identity():
    row = np.random.default_rng(0).normal(size=(1, 5))
    np.testing.assert_array_equal(aesthetic_embedding(Tensor(row), None, "LQ").data, row[0])


def test_cls_ignores_patch_rows():
    rng = np.random.default_rng(1)
    e_v = rng.normal(size=(5, 4))
    moved = e_v.copy()
    moved[1:] += rng.normal(size=(4, 4))
    np.testing.assert_array_equal(aesthetic_embedding(None, e_v, "CLS").data,
                                  aesthetic_embedding(None, moved, "CLS").data)
    assert not np.allclose(aesthetic_embedding(None, e_v, "CLS+P").data,
                           aesthetic_embedding(None, moved, "CLS+P").data)


def test_cls_p_constant_rows():
    r = np.array([0.5, -1.0, 2.0])
    np.testing.assert_allclose(aesthetic_embedding(None, np.tile(r, (6, 1)), "CLS+P").data, r,
                               rtol=0, atol=1e-15)


def test_pooling_errors():
    with pytest.raises(ContractError):
        aesthetic_embedding(None, None, "LQ")
    with pytest.raises(ContractError):
        aesthetic_embedding(None, None, "CLS")


def test_zero_head_gives_uniform():
    out = predict_dos(Tensor(np.ones(4)), Tensor(np.zeros((4, 10))), Tensor(np.zeros(10))).data
    assert out.shape == (10,)
    np.testing.assert_array_equal(out, np.full(10, 0.1))


@settings(max_examples=30, deadline=None)
@given(seeds, st.sampled_from(list(EmbeddingMode)))
def test_prediction_is_a_distribution(seed, mode):
    rng = np.random.default_rng(seed)
    cfg = replace(SMALL, mode=mode, k=10)
    model = _spread(init_model(cfg), rng, std=2.0)
    d = forward(model, _e_v(cfg, rng, batch=4) * 5).data
    assert d.shape == (4, 10) and (d >= 0).all()
    np.testing.assert_allclose(d.sum(axis=1), 1.0, rtol=0, atol=1e-12)


def test_head_width_mismatch():
    with pytest.raises(ContractError):
        predict_dos(Tensor(np.ones(3)), Tensor(np.zeros((4, 10))), Tensor(np.zeros(10)))


def test_model_attention_params_view():
    model = init_model(SMALL)
    assert isinstance(model, Model)
    p = model.attention_params(0, "cross_attn")
    assert p["wk"].shape == (SMALL.hv, SMALL.hq)
    assert "bk" not in p
