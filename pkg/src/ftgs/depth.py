"""Affine alignment of monocular depth maps and depth back-projection.

Monocular depth arrives in arbitrary units; each view gets an affine map
``z = s * d + b`` (meters). The coarse fit solves least squares against a
sparse point cloud projected into the view, with one pass of 3xMAD outlier
rejection. The fine stage (driven by the trainer) treats back-projected
Gaussian centers as a differentiable function of (s, b).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cameras import CameraView, project, pixel_rays


class DepthAlignError(RuntimeError):
    pass


@dataclass
class DepthMap:
    values: np.ndarray      # (H, W) float, raw monocular units
    valid_mask: np.ndarray  # (H, W) bool

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.values.shape != self.valid_mask.shape:
            raise ValueError("depth values and mask shapes differ")

    @staticmethod
    def from_values(values: np.ndarray) -> "DepthMap":
        values = np.asarray(values, dtype=np.float64)
        return DepthMap(values, values > 0.0)


@dataclass
class DepthAlign:
    scale: float
    offset: float
    view_id: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.scale <= 0:
            raise DepthAlignError(f"depth scale must be positive, got {self.scale}")

    def apply(self, depth: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(depth, dtype=np.float64) + self.offset


@dataclass
class SparsePointCloud:
    points: np.ndarray              # (N, 3) world meters
    colors: np.ndarray | None = None  # (N, 3) in [0, 1]

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)


def bilinear_sample(img: np.ndarray, uv: np.ndarray):
    """Sample (H, W) or (H, W, C) at pixel coords; (values, in_bounds_mask).

    Pixel (i, j) has coordinates (j + 0.5, i + 0.5); samples within half a
    pixel of the border clamp to the edge texel.
    """
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    x = np.asarray(uv[..., 0], dtype=np.float64) - 0.5
    y = np.asarray(uv[..., 1], dtype=np.float64) - 0.5
    inside = (uv[..., 0] >= 0) & (uv[..., 0] <= w) & (uv[..., 1] >= 0) & (uv[..., 1] <= h)
    x = np.clip(x, 0.0, w - 1.0)
    y = np.clip(y, 0.0, h - 1.0)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    val = (img[y0, x0] * (1 - fx) * (1 - fy) + img[y0, x1] * fx * (1 - fy)
           + img[y1, x0] * (1 - fx) * fy + img[y1, x1] * fx * fy)
    return val, inside


def fit_scale_offset(depth: DepthMap, pcd: SparsePointCloud, camera: CameraView,
                     near_clip: float = 0.2) -> DepthAlign:
    """Least-squares (s, b) with z_sparse ~ s * d_mono + b over projected points.

    One pass of 3xMAD residual rejection guards against sparse-cloud
    outliers. Raises :class:`DepthAlignError` when fewer than two usable
    correspondences remain or the monocular depths are degenerate.
    """
    uv, z, in_front = project(camera.intrinsics, camera.extrinsics, pcd.points,
                              near_clip=near_clip)
    d_mono, inside = bilinear_sample(depth.values, uv)
    mask_val, _ = bilinear_sample(depth.valid_mask.astype(np.float64), uv)
    usable = in_front & inside & (mask_val > 0.999)
    if usable.sum() < 2:
        raise DepthAlignError(
            f"only {int(usable.sum())} usable sparse correspondences (need >= 2)")
    d = d_mono[usable]
    zz = z[usable]
    s, b = _solve_affine(d, zz)
    resid = zz - (s * d + b)
    med = np.median(resid)
    mad = np.median(np.abs(resid - med))
    if mad > 1e-12:
        keep = np.abs(resid - med) <= 3.0 * 1.4826 * mad
        if keep.sum() >= 2 and np.ptp(d[keep]) > 1e-12:
            s, b = _solve_affine(d[keep], zz[keep])
    if s <= 0:
        raise DepthAlignError(f"fit produced non-positive scale s={s:.4g}")
    return DepthAlign(scale=float(s), offset=float(b), view_id=camera.view_id)


def _solve_affine(d: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    if np.ptp(d) <= 1e-12:
        raise DepthAlignError("monocular depths are constant; (s, b) underdetermined")
    a = np.stack([d, np.ones_like(d)], axis=1)
    sol, *_ = np.linalg.lstsq(a, z, rcond=None)
    return float(sol[0]), float(sol[1])


@dataclass
class BackprojectedPoints:
    """Back-projected pixels plus the birth metadata that makes centers a
    differentiable function of the view's (s, b)."""

    points: np.ndarray      # (N, 3) world
    colors: np.ndarray      # (N, 3)
    rays: np.ndarray        # (N, 3) world rays, z-normalized
    mono_depth: np.ndarray  # (N,) raw monocular values
    origin: np.ndarray      # (3,) camera center
    view_id: tuple[int, int]


def backproject(depth: DepthMap, align: DepthAlign, camera: CameraView,
                image: np.ndarray | None = None, stride: int = 1
                ) -> BackprojectedPoints:
    """Lift every stride-th valid pixel to a world point at depth s*d + b."""
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    h, w = depth.values.shape
    ii, jj = np.meshgrid(np.arange(0, h, stride), np.arange(0, w, stride), indexing="ij")
    ii = ii.ravel()
    jj = jj.ravel()
    valid = depth.valid_mask[ii, jj]
    ii, jj = ii[valid], jj[valid]
    d = depth.values[ii, jj]
    z = align.apply(d)
    pos = z > 0
    ii, jj, d, z = ii[pos], jj[pos], d[pos], z[pos]
    uv = np.stack([jj + 0.5, ii + 0.5], axis=1)
    origin, rays = pixel_rays(camera.intrinsics, camera.extrinsics, uv)
    points = origin + z[:, None] * rays
    if image is not None:
        colors = np.asarray(image, dtype=np.float64)[ii, jj]
    else:
        colors = np.full((len(ii), 3), 0.5)
    return BackprojectedPoints(points=points, colors=colors, rays=rays,
                               mono_depth=d, origin=origin, view_id=camera.view_id)
