import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftgs.cloud import TemporalOffsets
from ftgs.losses import (LossWeights, d_ssim, d_ssim_grad, ftgs_loss, ftgs_loss_grad,
                         gs_loss, gs_loss_grad, l1, l1_grad, psnr, reg_offsets,
                         reg_offsets_grad, ssim, ssim_grad)

from oracles import fd_gradient, oracle_ssim, rel_err


def _imgs(seed, h=8, w=8):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.1, 0.9, (h, w, 3)), rng.uniform(0.1, 0.9, (h, w, 3))


def test_identical_images_zero_losses():
    a, _ = _imgs(0)
    assert l1(a, a) == 0.0
    assert d_ssim(a, a) == pytest.approx(0.0, abs=1e-12)
    assert gs_loss(a, a) == pytest.approx(0.0, abs=1e-12)
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)
    assert psnr(a, a) == 100.0


def test_l1_constant_difference():
    a = np.full((4, 4, 3), 0.6)
    b = np.full((4, 4, 3), 0.5)
    assert l1(a, b) == pytest.approx(0.1)


def test_psnr_analytic():
    a = np.zeros((10, 10))
    b = np.full((10, 10), 0.1)   # mse = 0.01
    assert psnr(a, b) == pytest.approx(20.0)


def test_shape_mismatch_raises():
    with pytest.raises(ValueError):
        l1(np.zeros((2, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        ssim(np.zeros((2, 2)), np.zeros((3, 2)))


def test_ssim_matches_literal_oracle():
    rng = np.random.default_rng(42)
    a = rng.uniform(0, 1, (32, 32))
    b = np.clip(a + rng.normal(0, 0.1, (32, 32)), 0, 1)
    assert abs(ssim(a, b) - oracle_ssim(a, b)) < 1e-6


def test_ssim_in_range_and_symmetricish():
    a, b = _imgs(3, 16, 16)
    v = ssim(a, b)
    assert -1.0 <= v <= 1.0
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_l1_gradient_matches_fd():
    a, b = _imgs(1)
    _, g = l1_grad(a, b)
    fd = fd_gradient(lambda x: l1(x, b), a, h=1e-6)
    # sign() is flat between kinks; exact match away from zero diffs
    assert np.abs(g - fd).max() < 1e-9


@pytest.mark.parametrize("seed", [0, 1])
def test_ssim_gradient_matches_fd(seed):
    a, b = _imgs(seed)
    _, g = ssim_grad(a, b)
    fd = fd_gradient(lambda x: ssim(x, b), a, h=1e-5)
    assert rel_err(g, fd).max() < 1e-3


def test_d_ssim_and_gs_loss_gradients_match_fd():
    a, b = _imgs(5)
    _, g = d_ssim_grad(a, b)
    fd = fd_gradient(lambda x: d_ssim(x, b), a, h=1e-5)
    assert rel_err(g, fd).max() < 1e-3
    v, g2 = gs_loss_grad(a, b, 0.2)
    fd2 = fd_gradient(lambda x: gs_loss(x, b, 0.2), a, h=1e-5)
    assert rel_err(g2, fd2).max() < 1e-3
    assert v == pytest.approx(0.8 * l1(a, b) + 0.2 * d_ssim(a, b))


def test_reg_offsets_zero_and_analytic():
    off = TemporalOffsets(np.zeros((3, 4, 3)), canonical_frame=2)
    assert reg_offsets(off) == 0.0
    table = np.zeros((1, 2, 3))
    table[0, 1] = [3.0, 4.0, 0.0]
    off2 = TemporalOffsets(table, canonical_frame=1)
    assert reg_offsets(off2) == pytest.approx(5.0)


def test_reg_offsets_matches_bruteforce_mean_of_norms(rng):
    table = rng.normal(0, 0.1, (7, 5, 3))
    off = TemporalOffsets(table.copy(), canonical_frame=3)
    expected = []
    for i in range(7):
        for t in range(5):
            if t != 2:
                expected.append(np.sqrt((off.offsets[i, t] ** 2).sum()))
    assert abs(reg_offsets(off) - np.mean(expected)) < 1e-7


def test_reg_offsets_gradient_matches_fd(rng):
    table = rng.normal(0, 0.2, (4, 3, 3))
    off = TemporalOffsets(table.copy(), canonical_frame=2)
    _, g = reg_offsets_grad(off)

    def f(x):
        return reg_offsets(TemporalOffsets(x.copy(), canonical_frame=2))

    fd = fd_gradient(f, off.offsets, h=1e-6)
    assert rel_err(g, fd).max() < 1e-3
    assert np.all(g[:, 1, :] == 0.0)


def test_ftgs_loss_degenerates_to_gs_loss():
    a, b = _imgs(7)
    w = LossWeights(ssim_weight=0.2, offset_reg_weight=1.0)
    # identity correction, zero offsets
    off = TemporalOffsets(np.zeros((3, 4, 3)), canonical_frame=2)
    assert ftgs_loss(a, b, a, off, w) == pytest.approx(gs_loss(a, b, 0.2))
    assert ftgs_loss(a, b, a, None, w) == pytest.approx(gs_loss(a, b, 0.2))


def test_ftgs_loss_lambda_zero_is_corrected_l1():
    a, b = _imgs(8)
    corrected = a * 0.9
    w = LossWeights(ssim_weight=0.0)
    assert ftgs_loss(a, b, corrected, None, w) == pytest.approx(l1(corrected, b))


def test_ftgs_loss_term_decomposition(rng):
    render = rng.uniform(0, 1, (8, 8, 3))
    target = rng.uniform(0, 1, (8, 8, 3))
    corrected = render * rng.uniform(0.8, 1.2, (8, 8, 3))
    table = rng.normal(0, 0.05, (5, 4, 3))
    off = TemporalOffsets(table.copy(), canonical_frame=2)
    w = LossWeights(ssim_weight=0.3, offset_reg_weight=1.7)
    total = ftgs_loss(render, target, corrected, off, w)
    expected = (0.7 * l1(corrected, target) + 0.3 * d_ssim(render, target)
                + 1.7 * reg_offsets(off))
    assert abs(total - expected) < 1e-7


def test_ftgs_loss_grad_paths(rng):
    render = rng.uniform(0.2, 0.8, (8, 8, 3))
    target = rng.uniform(0.2, 0.8, (8, 8, 3))
    corrected = render * 1.05
    w = LossWeights(ssim_weight=0.25)
    _, g_corr, g_rend, _, _ = ftgs_loss_grad(render, target, corrected, None, w)
    fd_c = fd_gradient(
        lambda x: ftgs_loss(render, target, x, None, w), corrected, h=1e-6)
    assert np.abs(g_corr - fd_c).max() < 1e-9
    fd_r = fd_gradient(
        lambda x: (0.25 * d_ssim(x, target)), render, h=1e-5)
    assert rel_err(g_rend, fd_r).max() < 1e-3


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_losses_nonnegative_property(seed):
    rng = np.random.default_rng(seed)
    a = rng.uniform(0, 1, (6, 6, 3))
    b = rng.uniform(0, 1, (6, 6, 3))
    assert l1(a, b) >= 0.0
    assert d_ssim(a, b) >= 0.0
    assert gs_loss(a, b) >= 0.0
