import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from coeloc.align import (
    combine_maps,
    cosine_map,
    fuse_video_text,
    pool_support_time,
    predict_foreground,
    similarity_map,
    support_background_mask,
)

D64 = torch.float64


def _t(a):
    return torch.as_tensor(np.asarray(a), dtype=D64)


def _cos_oracle(q, s):
    out = np.zeros((s.shape[0], q.shape[0], s.shape[1]))
    for k in range(s.shape[0]):
        for i in range(q.shape[0]):
            for j in range(s.shape[1]):
                nq, ns = np.linalg.norm(q[i]), np.linalg.norm(s[k, j])
                out[k, i, j] = 0.0 if nq == 0 or ns == 0 else q[i] @ s[k, j] / (nq * ns)
    return out


# --- cosine maps


def test_self_similarity_diagonal(rng):
    q = rng.standard_normal((6, 8))
    m = cosine_map(_t(q), _t(q[None]))
    np.testing.assert_allclose(np.diag(m[0].numpy()), 1.0, atol=1e-12)
    # symmetric when the single support is the query itself
    np.testing.assert_allclose(m[0].numpy(), m[0].numpy().T, atol=1e-12)


def test_orthogonal_rows_and_zero_rows():
    q = _t([[1.0, 0.0], [0.0, 0.0]])
    s = _t([[[0.0, 3.0]]])
    assert cosine_map(q, s).abs().max().item() == 0.0


def test_cosine_matches_loop_oracle(rng):
    q, s = rng.standard_normal((5, 8)), rng.standard_normal((2, 5, 8))
    np.testing.assert_allclose(cosine_map(_t(q), _t(s)).numpy(), _cos_oracle(q, s), atol=1e-12, rtol=0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), lam=st.floats(0.01, 100))
def test_cosine_scale_invariance(seed, lam):
    g = np.random.default_rng(seed)
    q, s = g.standard_normal((4, 3)), g.standard_normal((2, 5, 3))
    base = cosine_map(_t(q), _t(s))
    q2 = q.copy()
    q2[1] *= lam
    np.testing.assert_allclose(cosine_map(_t(q2), _t(s)).numpy(), base.numpy(), atol=1e-12)
    assert base.abs().max() <= 1 + 1e-12


def test_distance_metrics(rng):
    q, s = rng.standard_normal((3, 4)), rng.standard_normal((2, 5, 4))
    eu = similarity_map(_t(q), _t(s), "euclidean").numpy()
    ma = similarity_map(_t(q), _t(s), "manhattan").numpy()
    for k in range(2):
        for i in range(3):
            for j in range(5):
                d = s[k, j] - q[i]
                assert abs(eu[k, i, j] - 1 / (1 + np.sqrt(d @ d + 1e-12))) < 1e-12
                assert abs(ma[k, i, j] - 1 / (1 + np.abs(d).sum())) < 1e-12
    with pytest.raises(ValueError):
        similarity_map(_t(q), _t(s), "chebyshev")


# --- fusion


def test_fusion_zero_weights():
    f = torch.randn(2, 4, 3, dtype=D64)
    z2, z0 = torch.zeros(6, 3, dtype=D64), torch.zeros(3, dtype=D64)
    out = fuse_video_text(f, f, z2, z0, torch.zeros(3, 3, dtype=D64), z0)
    assert out.shape == (2, 4, 3) and out.abs().max() == 0


def test_fusion_matches_per_snippet_oracle(rng):
    k, t, d = 2, 5, 4
    fs, ft = rng.standard_normal((k, t, d)), rng.standard_normal((k, t, d))
    w1, b1, w2, b2 = rng.standard_normal((2 * d, d)), rng.standard_normal(d), rng.standard_normal((d, d)), rng.standard_normal(d)
    got = fuse_video_text(*(map(_t, (fs, ft, w1, b1, w2, b2)))).numpy()
    for a in range(k):
        for i in range(t):
            h = np.maximum(0, np.concatenate([ft[a, i], fs[a, i]]) @ w1 + b1)
            assert np.abs(got[a, i] - (h @ w2 + b2)).max() < 1e-12


def test_fusion_shape_mismatch():
    with pytest.raises(ValueError):
        fuse_video_text(torch.zeros(2, 3, 4), torch.zeros(2, 4, 4), *[torch.zeros(1)] * 4)


# --- masks and combination


def test_mask_examples():
    assert support_background_mask(_t([[1, 1, 1]]), 2).min() == 1
    assert support_background_mask(_t([[0, 0]]), 3).max() == 0
    m = support_background_mask(_t([[1, 0, 1]]), 2)
    assert m[0].tolist() == [[1, 0, 1], [1, 0, 1]]


def test_mask_idempotent(rng):
    masks = _t(rng.integers(0, 2, size=(3, 6)))
    once = support_background_mask(masks, 4)
    twice = once * support_background_mask(masks, 4)
    assert torch.equal(once, twice)


def test_combine_maps(rng):
    a, b = _t(rng.standard_normal((2, 3, 4))), _t(rng.standard_normal((2, 3, 4)))
    ones, zeros = torch.ones(2, 3, 4, dtype=D64), torch.zeros(2, 3, 4, dtype=D64)
    assert torch.equal(combine_maps(a, b, ones), a * b)
    assert combine_maps(a, zeros, ones).abs().max() == 0
    c = _t(rng.integers(0, 2, size=(2, 3, 4)))
    got = combine_maps(a, b, c)
    for k in range(2):
        for i in range(3):
            for j in range(4):
                assert got[k, i, j] == a[k, i, j] * b[k, i, j] * c[k, i, j]
    with pytest.raises(ValueError):
        combine_maps(a, b, torch.ones(2, 3, 5))


def test_background_support_annihilates(rng):
    m_v = _t(rng.standard_normal((2, 3, 4)))
    mask = support_background_mask(torch.zeros(2, 4), 3)
    assert combine_maps(m_v, m_v, mask).abs().max() == 0


# --- head


def _head(rng, k, h=16, scale=1.0):
    return (
        _t(rng.standard_normal((h, k, 3)) * scale),
        _t(rng.standard_normal(h) * scale),
        _t(rng.standard_normal((1, h, 3)) * scale),
        _t(rng.standard_normal(1) * scale),
    )


def test_zero_head_gives_half():
    p = predict_foreground(torch.zeros(2, 5, 5, dtype=D64), torch.zeros(16, 2, 3, dtype=D64), torch.zeros(16, dtype=D64), torch.zeros(1, 16, 3, dtype=D64), torch.zeros(1, dtype=D64))
    assert p.tolist() == [0.5] * 5


def test_head_matches_explicit_convolution(rng):
    k, t, h = 2, 7, 5
    m = rng.standard_normal((k, t, 6))
    w1, b1, w2, b2 = (a.numpy() for a in _head(rng, k, h))
    s = m.max(axis=2)
    sp = np.pad(s, ((0, 0), (1, 1)))
    hidden = np.array([[max(0.0, b1[c] + sum(w1[c, a, r] * sp[a, i + r] for a in range(k) for r in range(3))) for i in range(t)] for c in range(h)])
    hp = np.pad(hidden, ((0, 0), (1, 1)))
    logits = np.array([b2[0] + sum(w2[0, c, r] * hp[c, i + r] for c in range(h) for r in range(3)) for i in range(t)])
    got = predict_foreground(_t(m), *map(_t, (w1, b1, w2, b2))).numpy()
    np.testing.assert_allclose(got, 1 / (1 + np.exp(-logits)), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_head_range_and_pool_dominance(seed):
    g = np.random.default_rng(seed)
    m = g.standard_normal((2, 6, 4))
    p = predict_foreground(_t(m), *_head(g, 2, scale=0.3))
    assert ((p > 0) & (p < 1)).all()
    bumped = m.copy()
    k, i, j = g.integers(2), g.integers(6), g.integers(4)
    bumped[k, i, j] += abs(g.standard_normal()) + 0.1
    assert (pool_support_time(_t(bumped)) >= pool_support_time(_t(m))).all()


def test_head_rejects_non_finite(rng):
    m = torch.zeros(2, 4, 4, dtype=D64)
    m[0, 0, 0] = float("nan")
    with pytest.raises(FloatingPointError):
        predict_foreground(m, *_head(rng, 2))


def test_head_gradients_match_finite_differences(rng):
    m = _t(rng.standard_normal((2, 8, 5)))
    params = [p.requires_grad_() for p in _head(rng, 2, h=4, scale=0.5)]
    predict_foreground(m, *params).sum().backward()
    h = 1e-5
    for p in params:
        numeric = torch.zeros_like(p)
        flat, nflat = p.data.view(-1), numeric.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + h
            plus = predict_foreground(m, *params).sum().item()
            flat[i] = orig - h
            minus = predict_foreground(m, *params).sum().item()
            flat[i] = orig
            nflat[i] = (plus - minus) / (2 * h)
        scale = max(p.grad.abs().max().item(), numeric.abs().max().item(), 1e-8)
        assert (p.grad - numeric).abs().max().item() / scale < 1e-4
