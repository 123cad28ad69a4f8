import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.special import expit

from backend.attention import CbamParams, cbam, channel_attention, init_cbam, spatial_attention, zero_cbam
from backend.errors import ShapeError
from backend.numerics import grad_check_named


def reference_channel_mask(F, p):
    n, c, h, w = F.shape
    mask = np.zeros((n, c, 1, 1))
    for b in range(n):
        avg = np.array([F[b, k].sum() / (h * w) for k in range(c)])
        mx = np.array([F[b, k].max() for k in range(c)])

        def mlp(v):
            hidden = [max(0.0, sum(p.mlp_w0[j, k] * v[k] for k in range(c))) for j in range(p.mlp_w0.shape[0])]
            return np.array([sum(p.mlp_w1[k, j] * hidden[j] for j in range(len(hidden))) for k in range(c)])

        mask[b, :, 0, 0] = expit(mlp(avg) + mlp(mx))
    return mask


def reference_spatial_mask(F, p):
    n, c, h, w = F.shape
    k = p.kernel_size
    r = (k - 1) // 2
    maps = np.stack([F.mean(axis=1), F.max(axis=1)], axis=1)
    padded = np.pad(maps, ((0, 0), (0, 0), (r, r), (r, r)))
    mask = np.zeros((n, 1, h, w))
    for b in range(n):
        for i in range(h):
            for j in range(w):
                total = p.spatial_bias[0]
                for ch in range(2):
                    for u in range(k):
                        for v in range(k):
                            total += padded[b, ch, i + u, j + v] * p.spatial_kernel[0, ch, u, v]
                mask[b, 0, i, j] = expit(total)
    return mask


def as_dict(p: CbamParams):
    return {"mlp_w0": p.mlp_w0, "mlp_w1": p.mlp_w1, "spatial_kernel": p.spatial_kernel,
            "spatial_bias": p.spatial_bias}


def random_cbam(rng, channels, ratio, k):
    p = init_cbam(channels, ratio, k, rng)
    p.spatial_bias[:] = rng.standard_normal(1)
    return p


@pytest.mark.parametrize("seed", range(20))
def test_masks_match_reference(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((2, 4, 5, 6))
    p = random_cbam(rng, 4, 2, 3)
    mc, _ = channel_attention(F, p)
    ms, _ = spatial_attention(F, p)
    assert np.allclose(mc, reference_channel_mask(F, p), rtol=0, atol=1e-10)
    assert np.allclose(ms, reference_spatial_mask(F, p), rtol=0, atol=1e-10)


def test_cbam_reference_example(rng):
    F = rng.standard_normal((1, 4, 6, 6))
    p = random_cbam(rng, 4, 2, 3)
    assert grad_check_named(lambda x, prm: cbam(x, CbamParams(**prm)), F, as_dict(p)) <= 1e-5


@pytest.mark.parametrize("seed", range(20))
def test_attention_gradients(seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((2, 4, 4, 4))
    p = random_cbam(rng, 4, 2, 3)
    for module in (channel_attention, spatial_attention, cbam):
        forward = lambda x, prm, module=module: module(x, CbamParams(**prm))
        assert grad_check_named(forward, F, as_dict(p), seed=seed) <= 1e-5


@settings(max_examples=25, deadline=None)
@given(n=st.integers(1, 2), c=st.sampled_from([2, 4, 8]), h=st.integers(1, 6), w=st.integers(1, 6),
       seed=st.integers(0, 10_000))
def test_cbam_preserves_shape_and_bounds_masks(n, c, h, w, seed):
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((n, c, h, w))
    p = random_cbam(rng, c, 2, 3)
    out, _ = cbam(F, p)
    assert out.shape == F.shape
    for mask in (channel_attention(F, p)[0], spatial_attention(F, p)[0]):
        assert np.all(mask > 0) and np.all(mask < 1)


def test_zero_parameters_scale_by_a_quarter(rng):
    F = rng.standard_normal((2, 8, 5, 5))
    out, _ = cbam(F, zero_cbam(8, 4, 7))
    assert np.array_equal(out, F * 0.25)


def test_ratio_must_divide_channels(rng):
    with pytest.raises(ShapeError):
        init_cbam(6, 4, 3, rng)
    with pytest.raises(ShapeError):
        cbam(rng.standard_normal((1, 6, 3, 3)), zero_cbam(4, 2, 3))
