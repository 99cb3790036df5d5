"""Training losses and image metrics.

The photometric loss is a blend of mean absolute error and structural
dissimilarity; the full training loss adds an L2 penalty on the temporal
offset table. All losses come with hand-written gradients w.r.t. their
first argument so the trainer can chain them through the renderer.

SSIM uses the standard 11x11 Gaussian window (sigma 1.5), zero-padded
'same' filtering, and population statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .cloud import TemporalOffsets

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP_DB = 100.0


@dataclass(frozen=True)
class LossWeights:
    ssim_weight: float = 0.2       # blend factor on the D-SSIM term
    offset_reg_weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError(f"ssim_weight must be in [0, 1], got {self.ssim_weight}")
        if self.offset_reg_weight < 0.0:
            raise ValueError(f"offset_reg_weight must be >= 0, got {self.offset_reg_weight}")


def _check_shapes(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.mean(np.abs(a - b)))


def l1_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    diff = a - b
    return float(np.mean(np.abs(diff))), np.sign(diff) / diff.size


def _gauss_kernel() -> np.ndarray:
    half = SSIM_WINDOW // 2
    xs = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(xs**2) / (2.0 * SSIM_SIGMA**2))
    return k / k.sum()


_KERNEL = _gauss_kernel()


def _filt(img: np.ndarray) -> np.ndarray:
    """Separable Gaussian filter over the two leading (H, W) axes, zero padded.

    Zero padding is also its own adjoint here (symmetric kernel), which the
    backward pass relies on.
    """
    out = correlate1d(img, _KERNEL, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _KERNEL, axis=1, mode="constant", cval=0.0)


def _ssim_fields(a, b):
    mu_a = _filt(a)
    mu_b = _filt(b)
    e_aa = _filt(a * a)
    e_bb = _filt(b * b)
    e_ab = _filt(a * b)
    var_a = e_aa - mu_a**2
    var_b = e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    num1 = 2.0 * mu_a * mu_b + SSIM_C1
    num2 = 2.0 * cov + SSIM_C2
    den1 = mu_a**2 + mu_b**2 + SSIM_C1
    den2 = var_a + var_b + SSIM_C2
    return mu_a, mu_b, num1, num2, den1, den2


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity, in [-1, 1]; ssim(x, x) == 1."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    _, _, num1, num2, den1, den2 = _ssim_fields(a, b)
    return float(np.mean(num1 * num2 / (den1 * den2)))


def ssim_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """SSIM value and d(ssim)/da via the adjoint of the window filtering."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mu_a, mu_b, num1, num2, den1, den2 = _ssim_fields(a, b)
    smap = num1 * num2 / (den1 * den2)
    w = np.full(a.shape, 1.0 / a.size)

    # partials of the map w.r.t. the filtered fields mu_a, E[a^2], E[ab]
    inv = 1.0 / (den1 * den2)
    d_mu = (2.0 * mu_b * num2 - 2.0 * mu_b * num1) * inv \
        - smap * (2.0 * mu_a / den1 - 2.0 * mu_a / den2)
    d_eaa = -smap / den2
    d_eab = 2.0 * num1 * inv

    grad = _filt(w * d_mu) + _filt(w * d_eaa) * 2.0 * a + _filt(w * d_eab) * b
    return float(np.mean(smap)), grad


def d_ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Structural dissimilarity (1 - SSIM) / 2."""
    return (1.0 - ssim(a, b)) / 2.0


def d_ssim_grad(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    s, g = ssim_grad(a, b)
    return (1.0 - s) / 2.0, -0.5 * g


def gs_loss(render: np.ndarray, target: np.ndarray, ssim_weight: float = 0.2) -> float:
    """(1 - w) L1 + w D-SSIM."""
    return (1.0 - ssim_weight) * l1(render, target) + ssim_weight * d_ssim(render, target)


def gs_loss_grad(render: np.ndarray, target: np.ndarray, ssim_weight: float = 0.2
                 ) -> tuple[float, np.ndarray]:
    v1, g1 = l1_grad(render, target)
    v2, g2 = d_ssim_grad(render, target)
    w = ssim_weight
    return (1.0 - w) * v1 + w * v2, (1.0 - w) * g1 + w * g2


def reg_offsets(offsets: TemporalOffsets) -> float:
    """Mean Euclidean norm of the per-Gaussian offset vectors at t != t_C."""
    rows = _noncanonical(offsets)
    if rows.size == 0:
        return 0.0
    return float(np.mean(np.linalg.norm(rows, axis=-1)))


def reg_offsets_grad(offsets: TemporalOffsets) -> tuple[float, np.ndarray]:
    """Value and gradient on the full (N, T, D) table (zero at t_C)."""
    table = offsets.offsets
    grad = np.zeros_like(table)
    rows = _noncanonical(offsets)
    if rows.size == 0:
        return 0.0, grad
    norms = np.linalg.norm(table, axis=-1)
    count = rows.shape[0] * rows.shape[1]
    safe = np.maximum(norms, 1e-30)
    grad[:] = table / safe[..., None] / count
    grad[norms == 0.0] = 0.0
    grad[:, offsets.canonical_frame - 1, :] = 0.0
    value = float(np.mean(np.linalg.norm(rows, axis=-1)))
    return value, grad


def _noncanonical(offsets: TemporalOffsets) -> np.ndarray:
    keep = np.ones(offsets.n_frames, dtype=bool)
    keep[offsets.canonical_frame - 1] = False
    return offsets.offsets[:, keep, :]


def reg_offsets_frame(offsets: TemporalOffsets, t: int):
    """Per-step form of the offset regularizer: frame t's share of the
    flat mean-of-norms over the whole table. Returns (value, gradient on
    that frame's rows); both are zero at the canonical frame.

    Summing this over all frames reproduces :func:`reg_offsets` exactly.
    Touching only the rendered frame's rows keeps the regularizer's
    sparsity aligned with the photometric gradient (a dense every-step
    pull would dominate moment-based optimizers and pin the table at 0).
    """
    rows = offsets.at_frame(t)
    grad = np.zeros_like(rows)
    if t == offsets.canonical_frame or rows.size == 0 or offsets.n_frames < 2:
        return 0.0, grad
    count = len(rows) * (offsets.n_frames - 1)
    norms = np.linalg.norm(rows, axis=1)
    safe = np.maximum(norms, 1e-30)
    grad[:] = rows / safe[:, None] / count
    grad[norms == 0.0] = 0.0
    return float(norms.sum() / count), grad


def ftgs_loss(render: np.ndarray, target: np.ndarray, corrected: np.ndarray,
              offsets: TemporalOffsets | None, weights: LossWeights) -> float:
    """Full training loss: L1 on the appearance-corrected render, D-SSIM on
    the raw render, plus the offset regularizer."""
    w = weights.ssim_weight
    value = (1.0 - w) * l1(corrected, target) + w * d_ssim(render, target)
    if offsets is not None:
        value += weights.offset_reg_weight * reg_offsets(offsets)
    return value


def ftgs_loss_grad(render: np.ndarray, target: np.ndarray, corrected: np.ndarray,
                   offsets: TemporalOffsets | None, weights: LossWeights):
    """Returns (value, d/d corrected, d/d raw render, d/d offset table, terms)."""
    w = weights.ssim_weight
    v1, g_corr = l1_grad(corrected, target)
    v2, g_rend = d_ssim_grad(render, target)
    value = (1.0 - w) * v1 + w * v2
    g_corr = (1.0 - w) * g_corr
    g_rend = w * g_rend
    g_off = None
    v3 = 0.0
    if offsets is not None:
        v3, g_off = reg_offsets_grad(offsets)
        value += weights.offset_reg_weight * v3
        g_off = weights.offset_reg_weight * g_off
    terms = {"l1": v1, "d_ssim": v2, "reg_offsets": v3}
    return value, g_corr, g_rend, g_off, terms


def mse(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images, capped at 100."""
    err = mse(a, b)
    if err <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / err), PSNR_CAP_DB))
