import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from lvo.regularization import (
    RegularizerWeights,
    apply_random_transform,
    moment_penalty,
    range_penalty,
    smooth_gradient,
    spectral_filter,
    total_penalty,
    transform_latent,
    tv_penalty,
)


# ---- element-wise brute-force oracles -------------------------------------

def tv_oracle(z):
    c, h, w = z.shape
    per_channel = []
    for k in range(c):
        s = 0.0
        for i in range(h):
            for j in range(w):
                if i + 1 < h:
                    s += abs(z[k, i + 1, j] - z[k, i, j])
                if j + 1 < w:
                    s += abs(z[k, i, j + 1] - z[k, i, j])
        per_channel.append(s / (h * w))
    return sum(per_channel) / c


def range_oracle(z):
    vals = [max(abs(v) - 3.0, 0.0) ** 2 for v in z.ravel().tolist()]
    return sum(vals) / len(vals)


def moment_oracle(z):
    vals = z.ravel().tolist()
    n = len(vals)
    mean = sum(vals) / n
    var = sum((v - mean) ** 2 for v in vals) / n
    return abs(mean) + abs(math.sqrt(var) - 1.0)


finite_latents = arrays(np.float64, (2, 5, 6), elements=st.floats(-10, 10))


# ---- penalties ------------------------------------------------------------

def test_penalties_match_brute_force_on_random_latents():
    rng = np.random.default_rng(0)
    for _ in range(100):
        z = rng.normal(scale=rng.uniform(0.5, 3.0), size=(4, 8, 8)) + rng.normal()
        assert tv_penalty(z) == pytest.approx(tv_oracle(z), rel=1e-6)
        assert range_penalty(z) == pytest.approx(range_oracle(z), rel=1e-6, abs=1e-12)
        assert moment_penalty(z) == pytest.approx(moment_oracle(z), rel=1e-6)


def test_tv_worked_example():
    assert tv_penalty(np.array([[[0.0, 1.0], [2.0, 3.0]]])) == 1.5


@pytest.mark.parametrize("shape", [(1, 1, 1), (3, 4, 5), (4, 8, 8)])
def test_tv_zero_on_constant(shape):
    assert tv_penalty(np.full(shape, 2.7)) == 0.0


def test_tv_rejects_non_finite():
    z = np.zeros((1, 3, 3))
    z[0, 1, 1] = np.nan
    with pytest.raises(ValueError):
        tv_penalty(z)


@given(finite_latents)
def test_tv_symmetric_under_negation(z):
    assert tv_penalty(-z) == pytest.approx(tv_penalty(z), rel=1e-12, abs=1e-12)


@settings(max_examples=50)
@given(finite_latents)
def test_tv_zero_iff_spatially_constant(z):
    constant = bool(np.all(z == z[:, :1, :1]))
    assert (tv_penalty(z) == 0.0) == constant
    assert tv_penalty(z) >= 0


def test_range_examples():
    assert range_penalty(np.full((4, 8, 8), 4.0)) == 1.0
    assert range_penalty(np.full((4, 8, 8), -5.0)) == 4.0
    assert range_penalty(np.linspace(-3, 3, 64).reshape(1, 8, 8)) == 0.0


@given(arrays(np.float64, (3, 4, 4), elements=st.floats(-3, 3)))
def test_range_zero_inside_working_range(z):
    assert range_penalty(z) == 0.0


def test_moment_examples():
    assert moment_penalty(np.array([-2.0, 2.0])) == 1.0
    assert moment_penalty(np.full((2, 3, 3), 1.5)) == pytest.approx(2.5)
    z = np.array([-1.0, 1.0, -1.0, 1.0])
    assert moment_penalty(z) == 0.0


def test_moment_needs_two_elements():
    with pytest.raises(ValueError):
        moment_penalty(np.array([1.0]))


def test_penalties_are_differentiable():
    z = torch.randn(4, 8, 8, dtype=torch.float64, requires_grad=True)
    total_penalty(z * 3, RegularizerWeights(tv_weight=1, range_weight=1, moment_weight=1)).backward()
    assert z.grad is not None and torch.isfinite(z.grad).all()


# ---- aggregation ----------------------------------------------------------

def test_total_penalty_all_zero_weights():
    z = np.random.default_rng(1).normal(size=(4, 8, 8)) * 5
    assert total_penalty(z, RegularizerWeights()) == 0.0


def test_total_penalty_sae_bundle_on_constant_four():
    # 0.5 * range(=1) + 0.5 * moment(=|4| + |0 - 1|) ; tv weight is 0
    assert total_penalty(np.full((4, 8, 8), 4.0), RegularizerWeights.sae_default()) == pytest.approx(3.0)


def test_total_penalty_raw_bundle_on_inrange_constant():
    assert total_penalty(np.full((4, 8, 8), 1.2), RegularizerWeights.raw_default()) == 0.0


def test_total_penalty_is_weighted_sum():
    z = np.random.default_rng(2).normal(size=(4, 8, 8)) * 2.5
    w = RegularizerWeights(tv_weight=0.3, range_weight=1.7, moment_weight=0.9)
    expected = 0.3 * tv_oracle(z) + 1.7 * range_oracle(z) + 0.9 * moment_oracle(z)
    assert total_penalty(z, w) == pytest.approx(expected, rel=1e-9)


# ---- weights bundle -------------------------------------------------------

def test_default_bundles():
    raw = RegularizerWeights.raw_default()
    assert (raw.tv_weight, raw.range_weight, raw.moment_weight, raw.smoothing_sigma0) == (0.5, 0.5, 0.0, 0.5)
    assert (raw.spectral_filter, raw.jitter_px, raw.rotation_deg, raw.scale_factor) == (True, 1, 5.0, 1.1)
    sae = RegularizerWeights.sae_default()
    assert (sae.tv_weight, sae.range_weight, sae.moment_weight, sae.smoothing_sigma0) == (0.0, 0.5, 0.5, 0.0)
    assert (sae.spectral_filter, sae.jitter_px, sae.rotation_deg, sae.scale_factor) == (True, 1, 5.0, 1.1)


@pytest.mark.parametrize("kwargs", [
    {"tv_weight": -0.1}, {"range_weight": float("nan")}, {"scale_factor": 0.9}, {"jitter_px": -1},
    {"rotation_deg": -5},
])
def test_weights_validation(kwargs):
    with pytest.raises((ValueError, TypeError)):
        RegularizerWeights(**kwargs)


def test_weights_dict_round_trip():
    w = RegularizerWeights.raw_default()
    assert RegularizerWeights.from_dict(w.to_dict()) == w
    with pytest.raises(ValueError):
        RegularizerWeights.from_dict({"bogus": 1})


# ---- spectral filter ------------------------------------------------------

def test_spectral_filter_zero_and_constant():
    assert np.array_equal(spectral_filter(np.zeros((2, 8, 8))), np.zeros((2, 8, 8)))
    const = np.full((3, 8, 6), 1.7)
    np.testing.assert_allclose(spectral_filter(const), const, atol=1e-12)


def _amplitude(field, basis):
    return float((field * basis).sum() / (basis * basis).sum())


@pytest.mark.parametrize("f_lo,f_hi", [(1, 4), (2, 3), (1, 7)])
def test_spectral_filter_amplitude_ratio(f_lo, f_hi):
    n = 16
    x = np.arange(n)
    lo = np.tile(np.cos(2 * np.pi * f_lo * x / n), (n, 1))[None]
    hi = np.tile(np.cos(2 * np.pi * f_hi * x / n), (n, 1))[None]
    out = spectral_filter(lo + hi)
    ratio = _amplitude(out, lo) / _amplitude(out, hi)
    assert ratio == pytest.approx(f_hi / f_lo, rel=1e-9)


def test_spectral_filter_is_linear():
    rng = np.random.default_rng(3)
    g1, g2 = rng.normal(size=(2, 4, 8, 8))
    a, b = 1.7, -0.3
    np.testing.assert_allclose(spectral_filter(a * g1 + b * g2),
                               a * spectral_filter(g1) + b * spectral_filter(g2), atol=1e-6)


def test_spectral_filter_monotone_attenuation():
    n = 16
    x = np.arange(n)
    gains = []
    for f in range(1, n // 2 + 1):
        basis = np.tile(np.cos(2 * np.pi * f * x / n), (n, 1))[None]
        gains.append(_amplitude(spectral_filter(basis), basis))
    assert all(a >= b - 1e-12 for a, b in zip(gains, gains[1:]))
    assert gains[0] == pytest.approx(1.0)


def test_spectral_filter_shape_and_grad_type():
    g = torch.randn(4, 8, 8)
    out = spectral_filter(g)
    assert isinstance(out, torch.Tensor) and out.shape == g.shape and out.dtype == g.dtype


# ---- gradient smoothing ---------------------------------------------------

def test_smooth_identity_when_sigma_zero():
    g = np.random.default_rng(4).normal(size=(4, 8, 8))
    for step in (0, 10, 99):
        assert smooth_gradient(g, step, 100, 0.0) is g


def test_smooth_constant_unchanged():
    g = np.full((2, 8, 8), -0.4)
    for sigma0 in (0.5, 1.0, 5.0):
        np.testing.assert_allclose(smooth_gradient(g, 0, 100, sigma0), g, atol=1e-12)


@pytest.mark.parametrize("sigma0,step", [(0.5, 0), (1.0, 30), (5.0, 0), (2.0, 50)])
def test_smooth_matches_explicit_kernel_oracle(sigma0, step):
    g = np.random.default_rng(5).normal(size=(4, 8, 8))
    sigma = sigma0 * (1 - step / 100)
    expected = ndimage.gaussian_filter(g, sigma=(0, sigma, sigma), mode="reflect", truncate=4.0)
    np.testing.assert_allclose(smooth_gradient(g, step, 100, sigma0), expected, atol=1e-12)


def test_smooth_last_step_is_near_identity():
    g = np.random.default_rng(6).normal(size=(4, 8, 8))
    out = smooth_gradient(g, 99, 100, 0.5)
    assert np.max(np.abs(out - g)) < 1e-3


@settings(max_examples=40)
@given(arrays(np.float64, (2, 7, 9), elements=st.floats(-5, 5)), st.floats(0.01, 8.0))
def test_smooth_preserves_mean(g, sigma0):
    out = smooth_gradient(g, 0, 10, sigma0)
    np.testing.assert_allclose(out.mean(axis=(-2, -1)), g.mean(axis=(-2, -1)), atol=1e-6)


def test_smooth_rejects_bad_step():
    with pytest.raises(ValueError):
        smooth_gradient(np.zeros((1, 4, 4)), 10, 10, 0.5)


# ---- random transforms ----------------------------------------------------

def _gen(seed):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


def test_transform_identity_when_disabled():
    z = torch.randn(4, 8, 8)
    out, rec = apply_random_transform(z, RegularizerWeights(), _gen(0))
    assert torch.equal(out, z)
    assert (rec.shift_x, rec.shift_y, rec.angle_deg, rec.scale) == (0, 0, 0.0, 1.0)


def test_transform_draw_ranges():
    w = RegularizerWeights.raw_default()
    gen = _gen(1)
    shifts, angles, scales = set(), [], []
    for _ in range(300):
        _, rec = apply_random_transform(torch.zeros(1, 4, 4), w, gen)
        shifts.update([rec.shift_x, rec.shift_y])
        angles.append(rec.angle_deg)
        scales.append(rec.scale)
    assert shifts == {-1, 0, 1}
    assert -5 <= min(angles) and max(angles) <= 5
    assert 1 / 1.1 <= min(scales) and max(scales) <= 1.1


def test_transform_constant_invariant():
    z = torch.full((4, 8, 8), 2.3, dtype=torch.float64)
    w = RegularizerWeights(jitter_px=16, rotation_deg=45, scale_factor=1.8)
    gen = _gen(2)
    for _ in range(20):
        out, _ = apply_random_transform(z, w, gen)
        assert torch.allclose(out, z, atol=1e-6)


def test_integer_shift_is_exact_translation():
    from lvo.regularization import TransformRecord

    z = torch.arange(64, dtype=torch.float64).reshape(1, 8, 8)
    out = transform_latent(z, TransformRecord(1, 0, 0.0, 1.0))
    # content moves one pixel right; leftmost column reflects the old first column
    torch.testing.assert_close(out[0, :, 1:], z[0, :, :-1])
    torch.testing.assert_close(out[0, :, 0], z[0, :, 0])


def test_transform_reproducible_with_seed():
    z = torch.randn(4, 8, 8)
    w = RegularizerWeights.raw_default()
    a, ra = apply_random_transform(z, w, _gen(7))
    b, rb = apply_random_transform(z, w, _gen(7))
    assert ra == rb and torch.equal(a, b)


def test_transform_gradient_matches_finite_differences():
    w = RegularizerWeights(jitter_px=2, rotation_deg=20, scale_factor=1.3)
    for seed in range(3):
        rng = np.random.default_rng(seed)
        z0 = rng.normal(size=(2, 6, 6))
        probe = torch.as_tensor(rng.normal(size=(2, 6, 6)))

        def f(z_np):
            out, _ = apply_random_transform(torch.as_tensor(z_np), w, _gen(100 + seed))
            return float((out * probe).sum())

        z = torch.as_tensor(z0).requires_grad_(True)
        out, _ = apply_random_transform(z, w, _gen(100 + seed))
        (out * probe).sum().backward()
        h = 1e-3
        fd = np.zeros_like(z0)
        for idx in np.ndindex(z0.shape):
            zp, zm = z0.copy(), z0.copy()
            zp[idx] += h
            zm[idx] -= h
            fd[idx] = (f(zp) - f(zm)) / (2 * h)
        err = np.linalg.norm(z.grad.numpy() - fd) / np.linalg.norm(fd)
        assert err < 1e-3
