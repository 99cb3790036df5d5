"""Real spherical-harmonics basis up to degree 3, with direction gradients.

Coefficient ordering matches the de-facto Gaussian-splatting layout:
index 0 is the DC term, 1..3 degree 1, 4..8 degree 2, 9..15 degree 3.
Colors are stored as ``clip(sh_eval + 0.5, 0, 1)``.
"""

from __future__ import annotations

import numpy as np

C0 = 0.28209479177387814
C1 = 0.4886025119029199
C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
      -1.0925484305920792, 0.5462742152960396)
C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
      0.3731763325901154, -0.4570457994644658, 1.445305721320277,
      -0.5900435899266435)

N_COEFFS_BY_DEGREE = (1, 4, 9, 16)
MAX_DEGREE = 3


def n_coeffs(degree: int) -> int:
    return N_COEFFS_BY_DEGREE[degree]


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Evaluate the basis at unit directions (..., 3) -> (..., n_coeffs)."""
    if not 0 <= degree <= MAX_DEGREE:
        raise ValueError(f"sh degree must be in [0, {MAX_DEGREE}], got {degree}")
    dirs = np.asarray(dirs, dtype=np.float64)
    n = n_coeffs(degree)
    out = np.empty(dirs.shape[:-1] + (n,))
    out[..., 0] = C0
    if degree < 1:
        return out
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out[..., 1] = -C1 * y
    out[..., 2] = C1 * z
    out[..., 3] = -C1 * x
    if degree < 2:
        return out
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    out[..., 4] = C2[0] * xy
    out[..., 5] = C2[1] * yz
    out[..., 6] = C2[2] * (2.0 * zz - xx - yy)
    out[..., 7] = C2[3] * xz
    out[..., 8] = C2[4] * (xx - yy)
    if degree < 3:
        return out
    out[..., 9] = C3[0] * y * (3.0 * xx - yy)
    out[..., 10] = C3[1] * xy * z
    out[..., 11] = C3[2] * y * (4.0 * zz - xx - yy)
    out[..., 12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
    out[..., 13] = C3[4] * x * (4.0 * zz - xx - yy)
    out[..., 14] = C3[5] * z * (xx - yy)
    out[..., 15] = C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction), shape (..., n_coeffs, 3).

    Derivatives of the raw polynomials; the unit-norm constraint is the
    caller's chain rule (project through (I - d d^T)/r).
    """
    dirs = np.asarray(dirs, dtype=np.float64)
    n = n_coeffs(degree)
    g = np.zeros(dirs.shape[:-1] + (n, 3))
    if degree < 1:
        return g
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    g[..., 1, 1] = -C1
    g[..., 2, 2] = C1
    g[..., 3, 0] = -C1
    if degree < 2:
        return g
    g[..., 4, 0] = C2[0] * y
    g[..., 4, 1] = C2[0] * x
    g[..., 5, 1] = C2[1] * z
    g[..., 5, 2] = C2[1] * y
    g[..., 6, 0] = C2[2] * (-2.0 * x)
    g[..., 6, 1] = C2[2] * (-2.0 * y)
    g[..., 6, 2] = C2[2] * (4.0 * z)
    g[..., 7, 0] = C2[3] * z
    g[..., 7, 2] = C2[3] * x
    g[..., 8, 0] = C2[4] * (2.0 * x)
    g[..., 8, 1] = C2[4] * (-2.0 * y)
    if degree < 3:
        return g
    xx, yy, zz = x * x, y * y, z * z
    g[..., 9, 0] = C3[0] * (6.0 * x * y)
    g[..., 9, 1] = C3[0] * (3.0 * xx - 3.0 * yy)
    g[..., 10, 0] = C3[1] * (y * z)
    g[..., 10, 1] = C3[1] * (x * z)
    g[..., 10, 2] = C3[1] * (x * y)
    g[..., 11, 0] = C3[2] * (-2.0 * x * y)
    g[..., 11, 1] = C3[2] * (4.0 * zz - xx - 3.0 * yy)
    g[..., 11, 2] = C3[2] * (8.0 * y * z)
    g[..., 12, 0] = C3[3] * (-6.0 * x * z)
    g[..., 12, 1] = C3[3] * (-6.0 * y * z)
    g[..., 12, 2] = C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
    g[..., 13, 0] = C3[4] * (4.0 * zz - 3.0 * xx - yy)
    g[..., 13, 1] = C3[4] * (-2.0 * x * y)
    g[..., 13, 2] = C3[4] * (8.0 * x * z)
    g[..., 14, 0] = C3[5] * (2.0 * x * z)
    g[..., 14, 1] = C3[5] * (-2.0 * y * z)
    g[..., 14, 2] = C3[5] * (xx - yy)
    g[..., 15, 0] = C3[6] * (3.0 * xx - 3.0 * yy)
    g[..., 15, 1] = C3[6] * (-6.0 * x * y)
    return g


def rgb_to_dc(rgb: np.ndarray) -> np.ndarray:
    """Invert the DC term of the color convention ``C0 * dc + 0.5``."""
    return (np.asarray(rgb, dtype=np.float64) - 0.5) / C0


def dc_to_rgb(dc: np.ndarray) -> np.ndarray:
    return np.asarray(dc, dtype=np.float64) * C0 + 0.5
