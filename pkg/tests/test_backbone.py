import numpy as np
import pytest

from ermoe import tensor as tn
from ermoe.backbone import (Model, ModelConfig, age_expectation, age_expectation_head, ermoe_block,
                            patchify, tokenize)
from ermoe.expert import expert_forward
from ermoe.router import eigenbasis_score
from ermoe.tensor import DimensionError, Tensor

SMALL = dict(depth=2, heads=2, d=8, E=4, k=2, T=0.5, n_patches=4, patch_dim=12, num_classes=3)


def test_patchify_2d_counts_and_order():
    img = np.arange(4 * 4 * 3, dtype=float).reshape(1, 4, 4, 3)
    p = patchify(img, 2)
    assert p.shape == (1, 4, 12)
    # patch 1 is the top-right 2x2 block, flattened row-major with channels last
    assert np.array_equal(p[0, 1], img[0, 0:2, 2:4].reshape(-1))
    assert np.array_equal(p[0, 2], img[0, 2:4, 0:2].reshape(-1))


def test_patchify_3d_and_errors():
    vol = np.random.default_rng(0).standard_normal((2, 4, 4, 4, 1))
    p = patchify(vol, 2)
    assert p.shape == (2, 8, 8)
    assert np.array_equal(p[1, 7], vol[1, 2:, 2:, 2:].reshape(-1))
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 5, 4, 3)), 2)
    with pytest.raises(DimensionError):
        patchify(np.zeros((1, 4, 3)), 2)


def test_tokenize_prepends_cls():
    m = Model(ModelConfig(**SMALL), 0)
    tokens = tokenize(m.tokenizer, np.zeros((3, 4, 12)))
    assert tokens.shape == (3, 5, 8)
    # a zero image gives bias + position for patches and cls + position for slot 0
    assert np.allclose(tokens.data[0, 1:], m.tokenizer.pos.data[1:] + m.tokenizer.b.data)
    assert np.allclose(tokens.data[2, 0], m.tokenizer.cls.data + m.tokenizer.pos.data[0])
    with pytest.raises(DimensionError):
        tokenize(m.tokenizer, np.zeros((1, 3, 12)))


def test_attention_rows_are_distributions():
    m = Model(ModelConfig(**SMALL), 1)
    x = np.random.default_rng(1).standard_normal((2, 4, 12))
    att = m.blocks[0].attn(m.embed(x))
    a = att.alpha.data
    assert a.shape == (2, 5, 5)
    assert np.all(a >= 0) and np.allclose(a.sum(-1), 1.0, atol=1e-12)


def test_zero_s_expert_is_passthrough():
    m = Model(ModelConfig(**SMALL), 2)
    blk = m.blocks[0]
    for e in blk.bank.experts:
        e.s.data = np.zeros_like(e.s.data)
    tokens = m.embed(np.random.default_rng(2).standard_normal((2, 4, 12)))
    out, _ = ermoe_block(blk, tokens)
    assert np.array_equal(out.data, blk.attn(tokens).z.data)


def test_single_expert_block_reduces_to_residual_expert():
    m = Model(ModelConfig(**{**SMALL, "E": 1, "k": 1}), 3)
    blk = m.blocks[0]
    tokens = m.embed(np.random.default_rng(3).standard_normal((2, 4, 12)))
    out, decisions = ermoe_block(blk, tokens)
    z = blk.attn(tokens).z.data
    ref = z + expert_forward(blk.bank[0], tokens.data).data
    assert np.max(np.abs(out.data - ref)) < 1e-12
    assert np.all(decisions.weights == 1.0)


def test_forward_matches_manual_composition():
    m = Model(ModelConfig(**SMALL), 4)
    x = np.random.default_rng(4).standard_normal((2, 4, 12))
    res = m.forward(x)
    h = m.embed(x).data
    for layer, blk in enumerate(m.blocks):
        att = blk.attn(Tensor(h))
        z, alpha = att.z.data, att.alpha.data
        new = np.empty_like(h)
        for b in range(2):
            for t in range(5):
                c = alpha[b, t] @ z[b]
                scores = np.array([eigenbasis_score(e, h[b, t], c)[0] for e in blk.bank.experts])
                assert np.allclose(res.routing[layer].scores[b * 5 + t], scores, atol=1e-12)
                sel = sorted(range(4), key=lambda e: (-scores[e], e))[:2]
                w = np.maximum(scores[sel], 0)
                w = w / w.sum() if w.sum() > 0 else np.full(2, 0.5)
                y = sum(wi * expert_forward(blk.bank[e], h[b, t]).data for e, wi in zip(sel, w))
                new[b, t] = z[b, t] + y
        h = new
    cls = h[:, 0]
    mu, var = cls.mean(-1, keepdims=True), cls.var(-1, keepdims=True)
    feat = (cls - mu) / np.sqrt(var + 1e-5) * m.norm_g.data + m.norm_b.data
    ref = feat @ m.head_W.data + m.head_b.data
    assert np.max(np.abs(res.output.data - ref)) < 1e-9


def test_age_expectation_examples():
    p, age = age_expectation([0.0, 0.0], [20.0, 40.0], tau=1.0)
    assert age.item() == 30.0
    _, age = age_expectation([0.3, 0.5, 0.6], [10.0, 20.0, 30.0], tau=1e-3)
    assert abs(age.item() - 30.0) < 1e-12
    with pytest.raises(ValueError):
        age_expectation([0.0], [1.0], tau=0.0)


def test_age_head_in_bin_range():
    rng = np.random.default_rng(5)
    bins = np.linspace(0, 90, 10)
    for _ in range(50):
        p, age = age_expectation_head(rng.standard_normal((4, 6)), rng.standard_normal((6, 10)) * 5,
                                      rng.standard_normal(10), bins, tau=float(rng.uniform(0.1, 3)))
        assert np.allclose(p.data.sum(-1), 1.0)
        assert np.all(age.data >= 0) and np.all(age.data <= 90)


def test_age_model_forward():
    cfg = ModelConfig(**{**SMALL, "head": "age", "age_bins": (10.0, 20.0, 30.0), "tau": 0.5})
    res = Model(cfg, 0).forward(np.zeros((2, 4, 12)))
    assert res.output.shape == (2,) and res.probs.shape == (2, 3)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, "k": 5})
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, "heads": 3})
    with pytest.raises(ValueError):
        ModelConfig(**{**SMALL, "head": "age"})


def test_seeded_init_is_reproducible():
    a, b = Model(ModelConfig(**SMALL), 9), Model(ModelConfig(**SMALL), 9)
    for (n1, p1), (n2, p2) in zip(a.named_params(), b.named_params()):
        assert n1 == n2 and np.array_equal(p1.data, p2.data)
