"""Scene data model: 3D Gaussians, per-frame temporal offsets, editing ops.

The cloud is stored struct-of-arrays (float64). Temporal offsets live in a
dense ``(N, T, D)`` table where ``D`` is the dimensionality of the offset
target's unconstrained parameter space:

* ``position``:   D = 3, added to the center (meters).
* ``covariance``: D = 6, first 3 added to log_scale, last 3 a rotation
  tangent applied as ``q_eff = exp_quat(w) * q``.
* ``opacity``:    D = 1, added to the opacity logit.
* ``features``:   D = 3 * n_coeffs, added to the SH coefficients.

Row ``t_canonical`` is pinned to zero and never updated.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import sh


class OffsetTarget(Enum):
    POSITION = "position"
    COVARIANCE = "covariance"
    OPACITY = "opacity"
    FEATURES = "features"


def offset_dim(target: OffsetTarget, sh_degree: int) -> int:
    return {
        OffsetTarget.POSITION: 3,
        OffsetTarget.COVARIANCE: 6,
        OffsetTarget.OPACITY: 1,
        OffsetTarget.FEATURES: 3 * sh.n_coeffs(sh_degree),
    }[target]


class CloudError(ValueError):
    pass


@dataclass
class TemporalOffsets:
    """Per-Gaussian, per-frame offsets with a pinned canonical frame.

    ``offsets[p, t - 1]`` applies at frame ``t`` (frames are 1-based,
    ``1 <= t <= n_frames``). All camera views of a frame share the row.
    """

    offsets: np.ndarray     # (N, T, D)
    canonical_frame: int    # t_C, 1-based

    def __post_init__(self):
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        if self.offsets.ndim != 3:
            raise CloudError(f"offsets must be (N, T, D), got shape {self.offsets.shape}")
        if not 1 <= self.canonical_frame <= self.n_frames:
            raise CloudError(
                f"canonical frame {self.canonical_frame} outside 1..{self.n_frames}")
        self.pin_canonical()

    @property
    def n_frames(self) -> int:
        return self.offsets.shape[1]

    @property
    def dim(self) -> int:
        return self.offsets.shape[2]

    def pin_canonical(self) -> None:
        self.offsets[:, self.canonical_frame - 1, :] = 0.0

    def at_frame(self, t: int) -> np.ndarray:
        if not 1 <= t <= self.n_frames:
            raise CloudError(f"frame {t} outside 1..{self.n_frames}")
        return self.offsets[:, t - 1, :]

    @staticmethod
    def zeros(n_gaussians: int, n_frames: int, canonical_frame: int, dim: int = 3
              ) -> "TemporalOffsets":
        return TemporalOffsets(np.zeros((n_gaussians, n_frames, dim)), canonical_frame)


def default_canonical_frame(n_frames: int) -> int:
    """Middle of the trajectory: ceil(T / 2)."""
    return (n_frames + 1) // 2


@dataclass
class GaussianCloud:
    """A set of anisotropic 3D Gaussians, optionally with temporal offsets."""

    positions: np.ndarray       # (N, 3) centers, world meters
    log_scales: np.ndarray      # (N, 3) per-axis log stddev
    rotations: np.ndarray       # (N, 4) quaternions (w, x, y, z)
    opacity_logits: np.ndarray  # (N,)
    sh_coeffs: np.ndarray       # (N, n_coeffs, 3)
    sh_degree: int = 3
    temporal_offsets: TemporalOffsets | None = None
    offset_target: OffsetTarget = OffsetTarget.POSITION

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        n = len(self.positions)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.rotations = np.asarray(self.rotations, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh_coeffs = np.asarray(self.sh_coeffs, dtype=np.float64).reshape(
            n, sh.n_coeffs(self.sh_degree), 3)
        if isinstance(self.offset_target, str):
            self.offset_target = OffsetTarget(self.offset_target)
        self.check_lockstep()

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def n_frames(self) -> int | None:
        return None if self.temporal_offsets is None else self.temporal_offsets.n_frames

    def check_lockstep(self) -> None:
        if self.temporal_offsets is not None:
            if len(self.temporal_offsets.offsets) != len(self):
                raise CloudError(
                    f"offset table has {len(self.temporal_offsets.offsets)} rows "
                    f"for {len(self)} Gaussians")
            want = offset_dim(self.offset_target, self.sh_degree)
            if self.temporal_offsets.dim != want:
                raise CloudError(
                    f"offset dim {self.temporal_offsets.dim} != {want} required "
                    f"for target {self.offset_target.value}")

    def normalized_rotations(self) -> np.ndarray:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        return self.rotations / norms

    def renormalize_rotations(self) -> None:
        self.rotations = self.normalized_rotations()

    def opacities(self) -> np.ndarray:
        return 1.0 / (1.0 + np.exp(-self.opacity_logits))

    def covariances(self) -> np.ndarray:
        """(N, 3, 3) world covariances R diag(exp(2 ls)) R^T."""
        r = quat_to_rotmat(self.normalized_rotations())
        s2 = np.exp(2.0 * self.log_scales)
        return np.einsum("nij,nj,nkj->nik", r, s2, r)

    def effective_position(self, index: int, t: int | None) -> np.ndarray:
        """Center used when rendering frame t (offset-shifted if applicable)."""
        if not 0 <= index < len(self):
            raise CloudError(f"gaussian index {index} out of range 0..{len(self) - 1}")
        mu = self.positions[index]
        if self.temporal_offsets is None or t is None:
            return mu.copy()
        if self.offset_target is not OffsetTarget.POSITION:
            self.temporal_offsets.at_frame(t)  # still validates t
            return mu.copy()
        return mu + self.temporal_offsets.at_frame(t)[index]

    def effective_positions(self, t: int | None) -> np.ndarray:
        if (self.temporal_offsets is None or t is None
                or self.offset_target is not OffsetTarget.POSITION):
            if self.temporal_offsets is not None and t is not None:
                self.temporal_offsets.at_frame(t)
            return self.positions
        return self.positions + self.temporal_offsets.at_frame(t)

    def attach_offsets(self, n_frames: int, canonical_frame: int | None = None,
                       target: OffsetTarget = OffsetTarget.POSITION) -> None:
        if canonical_frame is None:
            canonical_frame = default_canonical_frame(n_frames)
        self.offset_target = target
        self.temporal_offsets = TemporalOffsets.zeros(
            len(self), n_frames, canonical_frame, offset_dim(target, self.sh_degree))

    def strip_offsets(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(), log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(), opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(), sh_degree=self.sh_degree)

    def copy(self) -> "GaussianCloud":
        off = None
        if self.temporal_offsets is not None:
            off = TemporalOffsets(self.temporal_offsets.offsets.copy(),
                                  self.temporal_offsets.canonical_frame)
        return GaussianCloud(
            positions=self.positions.copy(), log_scales=self.log_scales.copy(),
            rotations=self.rotations.copy(), opacity_logits=self.opacity_logits.copy(),
            sh_coeffs=self.sh_coeffs.copy(), sh_degree=self.sh_degree,
            temporal_offsets=off, offset_target=self.offset_target)

    def select(self, keep: np.ndarray) -> "GaussianCloud":
        """Subset cloud by boolean mask or index array (offsets in lockstep)."""
        off = None
        if self.temporal_offsets is not None:
            off = TemporalOffsets(self.temporal_offsets.offsets[keep].copy(),
                                  self.temporal_offsets.canonical_frame)
        return GaussianCloud(
            positions=self.positions[keep], log_scales=self.log_scales[keep],
            rotations=self.rotations[keep], opacity_logits=self.opacity_logits[keep],
            sh_coeffs=self.sh_coeffs[keep], sh_degree=self.sh_degree,
            temporal_offsets=off, offset_target=self.offset_target)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (..., 4) wxyz -> rotation matrices (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product (..., 4) x (..., 4), wxyz."""
    aw, ax, ay, az = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    bw, bx, by, bz = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def quat_exp(w: np.ndarray) -> np.ndarray:
    """Rotation-vector tangent (..., 3) -> unit quaternion (..., 4).

    exp(w) rotates by |w| radians about w. Series-stable near zero.
    """
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1, keepdims=True)
    half = 0.5 * theta
    small = theta[..., 0] < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        s = np.where(small[..., None], 0.5 - theta**2 / 48.0, np.sin(half) / np.where(theta == 0, 1.0, theta))
    return np.concatenate([np.cos(half), s * w], axis=-1)


# --- densification ------------------------------------------------------

@dataclass
class DensifyConfig:
    grad_threshold: float = 2e-4      # on NDC-scaled screen gradients, 3DGS convention
    prune_opacity: float = 0.005
    percent_dense: float = 0.01       # split when scale > percent_dense * extent
    scene_extent: float = 10.0
    max_gaussians: int = 200_000
    split_factor: float = 1.6
    n_split: int = 2
    prune_scale3d: float | None = None  # prune when max scale > this * extent


@dataclass
class DensifyStats:
    n_cloned: int = 0
    n_split: int = 0
    n_pruned: int = 0
    # row bookkeeping so optimizer moments can mirror the edit: the merged
    # layout is [original rows | appended rows], filtered by keep_mask
    n_appended: int = 0
    keep_mask: np.ndarray | None = None


def densify_and_prune(cloud: GaussianCloud, grad_norms: np.ndarray,
                      config: DensifyConfig, rng: np.random.Generator
                      ) -> tuple[GaussianCloud, DensifyStats]:
    """Clone small / split large high-gradient Gaussians, prune faint ones.

    ``grad_norms`` is the per-Gaussian mean accumulated screen-space
    gradient norm (NDC-scaled). Cloned/split children copy the parent's
    full temporal-offset row so both tables stay in lockstep.
    """
    n = len(cloud)
    grad_norms = np.asarray(grad_norms, dtype=np.float64).reshape(n)
    stats = DensifyStats()

    max_scale = np.exp(cloud.log_scales).max(axis=1)
    high_grad = grad_norms >= config.grad_threshold
    if n >= config.max_gaussians:
        high_grad[:] = False
    clone_mask = high_grad & (max_scale <= config.percent_dense * config.scene_extent)
    split_mask = high_grad & (max_scale > config.percent_dense * config.scene_extent)

    parts = [cloud]
    offset_parts = []
    if cloud.temporal_offsets is not None:
        offset_parts.append(cloud.temporal_offsets.offsets)

    if np.any(clone_mask):
        clones = cloud.select(clone_mask)
        parts.append(clones)
        if cloud.temporal_offsets is not None:
            offset_parts.append(clones.temporal_offsets.offsets)
        stats.n_cloned = int(clone_mask.sum())

    if np.any(split_mask):
        parents = cloud.select(split_mask)
        k = config.n_split
        cov = parents.covariances()
        chol = np.linalg.cholesky(cov + 1e-12 * np.eye(3))
        for _ in range(k):
            noise = rng.standard_normal((len(parents), 3))
            child = parents.copy()
            child.positions = parents.positions + np.einsum("nij,nj->ni", chol, noise)
            child.log_scales = parents.log_scales - np.log(config.split_factor)
            parts.append(child)
            if cloud.temporal_offsets is not None:
                offset_parts.append(parents.temporal_offsets.offsets)
        stats.n_split = int(split_mask.sum())

    merged = GaussianCloud(
        positions=np.concatenate([p.positions for p in parts]),
        log_scales=np.concatenate([p.log_scales for p in parts]),
        rotations=np.concatenate([p.rotations for p in parts]),
        opacity_logits=np.concatenate([p.opacity_logits for p in parts]),
        sh_coeffs=np.concatenate([p.sh_coeffs for p in parts]),
        sh_degree=cloud.sh_degree,
        temporal_offsets=None if not offset_parts else TemporalOffsets(
            np.concatenate(offset_parts), cloud.temporal_offsets.canonical_frame),
        offset_target=cloud.offset_target)

    # Split parents are replaced by their children; drop them, then prune.
    drop = np.zeros(len(merged), dtype=bool)
    drop[:n] = split_mask
    drop |= merged.opacities() < config.prune_opacity
    if config.prune_scale3d is not None:
        drop |= np.exp(merged.log_scales).max(axis=1) > config.prune_scale3d * config.scene_extent
    stats.n_pruned = int((drop[:n] & ~split_mask).sum())
    stats.n_appended = len(merged) - n
    stats.keep_mask = ~drop
    out = merged.select(~drop)
    return out, stats


# --- object-level editing ------------------------------------------------

@dataclass(frozen=True)
class Box3:
    """Oriented 3D box: |R^T (p - center)| <= half_extents, axis-aligned if R=I."""

    center: np.ndarray
    half_extents: np.ndarray
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        object.__setattr__(self, "half_extents",
                           np.asarray(self.half_extents, dtype=np.float64).reshape(3))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        if np.any(self.half_extents <= 0):
            raise CloudError(f"box extents must be positive, got {self.half_extents}")


def segment_by_box(cloud: GaussianCloud, box: Box3) -> np.ndarray:
    """Indices of Gaussians whose centers lie inside the box."""
    local = (cloud.positions - box.center) @ box.rotation
    inside = np.all(np.abs(local) <= box.half_extents, axis=1)
    return np.flatnonzero(inside)


def translate_subset(cloud: GaussianCloud, indices: np.ndarray, delta: np.ndarray
                     ) -> GaussianCloud:
    """Shift the centers of the selected Gaussians by ``delta`` (offsets untouched)."""
    out = cloud.copy()
    out.positions[np.asarray(indices, dtype=np.intp)] += np.asarray(delta, dtype=np.float64)
    return out
