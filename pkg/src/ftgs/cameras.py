"""Camera intrinsics/extrinsics, SE(3) algebra, and pinhole projection.

Conventions used throughout the package:

* World frame: the ego frame of the first trajectory frame (x forward,
  y left, z up for the synthetic rigs, but nothing here depends on that).
* Camera frame: x right, y down, z forward (OpenCV).
* Extrinsics map world -> camera: ``x_cam = R @ x_world + t``.
* Pixel (row i, col j) has continuous image coordinates
  ``(u, v) = (j + 0.5, i + 0.5)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

ORTHONORMAL_TOL = 1e-6


class FrameTag(Enum):
    """Coordinate frame an extrinsics matrix is expressed in."""

    FRAME_LOCAL = "frame_local"
    WORLD_FRAME_0 = "world_frame_0"


class CameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise CameraError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.width < 1 or self.height < 1:
            raise CameraError(f"image size must be >= 1, got {self.width}x{self.height}")

    @staticmethod
    def from_fov(fov_x_deg: float, width: int, height: int) -> "Intrinsics":
        """Square-pixel intrinsics with the given horizontal field of view."""
        fx = 0.5 * width / np.tan(np.deg2rad(fov_x_deg) / 2.0)
        return Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                          width=width, height=height)


def _check_rotation(rotation: np.ndarray) -> None:
    err = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if err > ORTHONORMAL_TOL:
        raise CameraError(f"rotation is not orthonormal (max deviation {err:.2e})")
    if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL:
        raise CameraError("rotation has determinant != +1 (improper rotation)")


@dataclass(frozen=True)
class Extrinsics:
    """World->camera rigid transform with a coordinate-frame tag."""

    rotation: np.ndarray           # (3, 3)
    translation: np.ndarray        # (3,)
    frame_tag: FrameTag = FrameTag.WORLD_FRAME_0

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        _check_rotation(self.rotation)

    @property
    def camera_center(self) -> np.ndarray:
        """Camera origin expressed in the tag's coordinate frame."""
        return -self.rotation.T @ self.translation

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray, frame_tag: FrameTag = FrameTag.WORLD_FRAME_0) -> "Extrinsics":
        m = np.asarray(m, dtype=np.float64)
        return Extrinsics(rotation=m[:3, :3], translation=m[:3, 3], frame_tag=frame_tag)

    @staticmethod
    def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0),
                frame_tag: FrameTag = FrameTag.WORLD_FRAME_0) -> "Extrinsics":
        """Camera at ``center`` looking toward ``target`` (camera z axis)."""
        center = np.asarray(center, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - center
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-12:
            raise CameraError("look_at direction is parallel to the up vector")
        right /= nr
        down = np.cross(fwd, right)
        r_cam_from_world = np.stack([right, down, fwd], axis=0)
        return Extrinsics(rotation=r_cam_from_world, translation=-r_cam_from_world @ center,
                          frame_tag=frame_tag)


@dataclass(frozen=True)
class EgoTransform:
    """SE(3) map taking frame-t coordinates into frame-0 coordinates."""

    rotation: np.ndarray       # (3, 3)
    translation: np.ndarray    # (3,)

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))
        _check_rotation(self.rotation)

    @staticmethod
    def identity() -> "EgoTransform":
        return EgoTransform(np.eye(3), np.zeros(3))

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def from_matrix(m: np.ndarray) -> "EgoTransform":
        m = np.asarray(m, dtype=np.float64)
        return EgoTransform(rotation=m[:3, :3], translation=m[:3, 3])

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class CameraView:
    """One camera at one trajectory frame."""

    intrinsics: Intrinsics
    extrinsics: Extrinsics
    camera_index: int = 0
    frame_index: int = 1

    @property
    def view_id(self) -> tuple[int, int]:
        return (self.camera_index, self.frame_index)


def to_world_frame(extrinsics: Extrinsics, ego: EgoTransform) -> Extrinsics:
    """Re-express frame-local extrinsics in the frame-0 world coordinates.

    With ``x_cam = R x_t + t`` and ``x_0 = R_e x_t + t_e`` the composed
    world->camera map is ``R' = R R_e^T``, ``t' = t - R' t_e``.
    """
    if extrinsics.frame_tag is not FrameTag.FRAME_LOCAL:
        raise CameraError("extrinsics are already in world_frame_0; refusing double conversion")
    r_new = extrinsics.rotation @ ego.rotation.T
    t_new = extrinsics.translation - r_new @ ego.translation
    return Extrinsics(rotation=r_new, translation=t_new, frame_tag=FrameTag.WORLD_FRAME_0)


# --- projection ---------------------------------------------------------

DEFAULT_NEAR_CLIP = 0.2  # meters


def project(intr: Intrinsics, extr: Extrinsics, x_world: np.ndarray,
            near_clip: float = DEFAULT_NEAR_CLIP):
    """Pinhole-project world points.

    Args:
        x_world: (..., 3) points.

    Returns:
        (uv, z_cam, valid): pixel coordinates (..., 2), camera-space depth
        (...,), and a mask that is False for points at or behind the near
        clip (culled, not an error).
    """
    x_world = np.asarray(x_world, dtype=np.float64)
    x_cam = x_world @ extr.rotation.T + extr.translation
    z = x_cam[..., 2]
    valid = z > near_clip
    zs = np.where(valid, z, 1.0)  # avoid divide warnings on culled points
    u = intr.fx * x_cam[..., 0] / zs + intr.cx
    v = intr.fy * x_cam[..., 1] / zs + intr.cy
    return np.stack([u, v], axis=-1), z, valid


def projection_jacobian(intr: Intrinsics, x_cam: np.ndarray) -> np.ndarray:
    """d(u, v)/d(x_cam) for camera-space points, shape (..., 2, 3)."""
    x_cam = np.asarray(x_cam, dtype=np.float64)
    x, y, z = x_cam[..., 0], x_cam[..., 1], x_cam[..., 2]
    jac = np.zeros(x_cam.shape[:-1] + (2, 3))
    jac[..., 0, 0] = intr.fx / z
    jac[..., 0, 2] = -intr.fx * x / z**2
    jac[..., 1, 1] = intr.fy / z
    jac[..., 1, 2] = -intr.fy * y / z**2
    return jac


def pixel_rays(intr: Intrinsics, extr: Extrinsics, uv: np.ndarray):
    """World-space rays through pixels: origin (camera center) and direction.

    The direction is scaled so that ``origin + z * dir`` has camera-space
    depth ``z`` (z-normalized, not unit-normalized).
    """
    uv = np.asarray(uv, dtype=np.float64)
    d_cam = np.stack([(uv[..., 0] - intr.cx) / intr.fx,
                      (uv[..., 1] - intr.cy) / intr.fy,
                      np.ones(uv.shape[:-1])], axis=-1)
    d_world = d_cam @ extr.rotation  # R^T applied to rows
    return extr.camera_center, d_world


# --- SE(3) exponential and retraction -----------------------------------

def so3_hat(phi: np.ndarray) -> np.ndarray:
    x, y, z = phi
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def so3_exp(phi: np.ndarray) -> np.ndarray:
    """Rodrigues' formula, stable near zero via series for the coefficients."""
    phi = np.asarray(phi, dtype=np.float64)
    theta = np.linalg.norm(phi)
    k = so3_hat(phi)
    if theta < 1e-8:
        a = 1.0 - theta**2 / 6.0
        b = 0.5 - theta**2 / 24.0
    else:
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def se3_exp(xi: np.ndarray) -> np.ndarray:
    """Exponential of a twist (rho, phi) -> 4x4 rigid transform."""
    xi = np.asarray(xi, dtype=np.float64)
    rho, phi = xi[:3], xi[3:]
    theta = np.linalg.norm(phi)
    k = so3_hat(phi)
    if theta < 1e-8:
        b = 0.5 - theta**2 / 24.0
        c = 1.0 / 6.0 - theta**2 / 120.0
    else:
        b = (1.0 - np.cos(theta)) / theta**2
        c = (theta - np.sin(theta)) / theta**3
    v = np.eye(3) + b * k + c * (k @ k)
    m = np.eye(4)
    m[:3, :3] = so3_exp(phi)
    m[:3, 3] = v @ rho
    return m


def se3_retract(extr: Extrinsics, tangent: np.ndarray) -> Extrinsics:
    """Left-multiplicative retraction: ``T_new = exp(tangent) @ T``.

    The tangent is a 6-vector (rho, phi); the perturbation acts in camera
    coordinates. ``se3_retract(pose, 0) == pose`` exactly.
    """
    tangent = np.asarray(tangent, dtype=np.float64)
    if not np.any(tangent):
        return extr
    m = se3_exp(tangent) @ extr.matrix()
    # Re-orthonormalize against drift from repeated retractions.
    u, _, vt = np.linalg.svd(m[:3, :3])
    r = u @ vt
    return replace(extr, rotation=r, translation=m[:3, 3])
