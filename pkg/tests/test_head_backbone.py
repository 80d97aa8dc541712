import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vct import head
from vct import numerics as nx
from vct.backbone import EncoderConfig, encode, init_encoder
from vct.numerics import ShapeError, Tensor, grad_check, ops


def encoder(channels=(4, 8, 8), out=8, seed=0):
    cfg = EncoderConfig(list(channels), out)
    reg = nx.ParameterRegistry()
    init_encoder(reg, cfg, np.random.default_rng(seed))
    return reg, cfg


# -- backbone -----------------------------------------------------------------


def test_encoder_shapes():
    reg, cfg = encoder((16, 32, 32), 32)
    img = np.random.default_rng(0).random((64, 64, 3))
    assert encode(img, reg, cfg).shape == (8, 8, 32)
    assert cfg.downsample_factor == 8


def test_encoder_256_matches_token_count():
    reg, cfg = encoder((4, 4, 4), 6)
    img = np.random.default_rng(1).random((256, 256, 3))
    fm = encode(img, reg, cfg)
    assert fm.shape == (256 // 8, 256 // 8, 6)
    assert fm.shape[0] * fm.shape[1] == 1024


def test_encoder_rejects_indivisible():
    reg, cfg = encoder()
    with pytest.raises(ShapeError):
        encode(np.zeros((60, 64, 3)), reg, cfg)


def test_siamese_weight_sharing_and_swap():
    reg, cfg = encoder()
    rng = np.random.default_rng(2)
    a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
    assert np.array_equal(encode(a, reg, cfg, 1).data.data, encode(a, reg, cfg, 2).data.data)
    x1, x2 = encode(a, reg, cfg, 1).data.data, encode(b, reg, cfg, 2).data.data
    y1, y2 = encode(b, reg, cfg, 1).data.data, encode(a, reg, cfg, 2).data.data
    assert np.array_equal(x1, y2) and np.array_equal(x2, y1)


def test_shared_gradient_is_sum_of_branches():
    reg, cfg = encoder((2, 3, 3), 3, seed=3)
    rng = np.random.default_rng(4)
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    pa, pb = Tensor(rng.standard_normal((1, 1, 3))), Tensor(rng.standard_normal((1, 1, 3)))
    w = reg["enc.s1.down.w"]

    def branch(img, probe):
        return ops.sum(nx.mul(encode(img, reg, cfg).data, probe))

    grads = []
    for f in (lambda: branch(a, pa), lambda: branch(b, pb)):
        reg.zero_grad()
        f().backward()
        grads.append(w.grad.copy())
    both = lambda: nx.add(branch(a, pa), branch(b, pb))  # noqa: E731
    reg.zero_grad()
    both().backward()
    assert np.allclose(w.grad, grads[0] + grads[1], atol=1e-12)
    assert grad_check(both, w, tol=1e-4).passed


# -- prediction head ----------------------------------------------------------


def test_difference_features():
    x = Tensor(np.random.default_rng(5).standard_normal((2, 2, 3)))
    y = Tensor(np.random.default_rng(6).standard_normal((2, 2, 3)))
    assert np.array_equal(head.difference_features(x, x).data, np.zeros((2, 2, 3)))
    assert np.array_equal(head.difference_features(x, y).data, head.difference_features(y, x).data)
    assert head.difference_features(Tensor([[[2.0]]]), Tensor([[[5.0]]])).data.tolist() == [[[3.0]]]
    with pytest.raises(ShapeError):
        head.difference_features(x, Tensor(np.ones((2, 3, 3))))


def head_params(c=8, seed=0):
    reg = nx.ParameterRegistry()
    head.init_head(reg, c, np.random.default_rng(seed))
    return reg


def test_decode_zero_input_is_uniform():
    reg = head_params()
    out = head.decode(Tensor(np.zeros((4, 4, 8))), reg, 8)
    assert out.shape == (32, 32, 2)
    assert np.allclose(out.prob.data, 0.5)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 2, 4]), st.integers(0, 2**31))
def test_decode_is_distribution(h, w, f, seed):
    reg = head_params(seed=seed % 1000)
    d = Tensor(np.abs(np.random.default_rng(seed).standard_normal((h, w, 8))))
    out = head.decode(d, reg, f)
    assert out.shape == (h * f, w * f, 2)
    assert np.all(out.prob.data >= 0)
    assert np.allclose(out.prob.data.sum(-1), 1.0, atol=1e-6)


def test_decode_factor_mismatch():
    with pytest.raises(ShapeError):
        head.decode(Tensor(np.zeros((4, 4, 8))), head_params(), 8, out_hw=(64, 64))


def probs(rows):
    return Tensor(np.asarray(rows, dtype=float).reshape(1, -1, 2))


def test_bce_examples():
    g = head.GroundTruth.from_mask(np.array([[1, 0]]))
    assert g.one_hot.tolist() == [[[0, 1], [1, 0]]]
    assert float(head.bce_loss(g, probs([[0, 1], [1, 0]])).data) == 0.0
    assert float(head.bce_loss(g, probs([[0.5, 0.5], [0.5, 0.5]])).data) == pytest.approx(math.log(2))
    g2 = head.GroundTruth.from_mask(np.array([[0, 1]]))
    val = float(head.bce_loss(g2, probs([[0.9, 0.1], [0.2, 0.8]])).data)
    expected = (-math.log(0.9) - math.log(0.8)) / 2
    assert expected == pytest.approx(0.16425, abs=1e-5)
    assert val == pytest.approx(expected, abs=1e-12)


def test_bce_gradient_wrt_logits_is_p_minus_g():
    rng = np.random.default_rng(7)
    logits = Tensor(rng.standard_normal((3, 4, 2)), requires_grad=True)
    mask = rng.integers(0, 2, (3, 4))
    g = head.GroundTruth.from_mask(mask)
    f = lambda: head.bce_loss(g, nx.softmax_rows(logits))  # noqa: E731
    f().backward()
    p = nx.softmax_rows(logits).data
    assert np.allclose(logits.grad, (p - g.one_hot) / 12, atol=1e-12)
    assert grad_check(f, logits, samples=None).passed


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_bce_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p = nx.softmax_rows(Tensor(rng.standard_normal((4, 4, 2)) * 5))
    g = head.GroundTruth.from_mask(rng.integers(0, 2, (4, 4)))
    assert float(head.bce_loss(g, p).data) >= 0


def test_head_gradients():
    reg = head_params(c=4, seed=8)
    rng = np.random.default_rng(9)
    d = Tensor(np.abs(rng.standard_normal((2, 2, 4))), requires_grad=True)
    g = head.GroundTruth.from_mask(rng.integers(0, 2, (8, 8)))
    f = lambda: head.bce_loss(g, head.decode(d, reg, 4))  # noqa: E731
    for t in [d] + [p.tensor for p in reg]:
        assert grad_check(f, t, tol=1e-4, samples=20).passed, t.name
