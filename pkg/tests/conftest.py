import numpy as np
import pytest

from ftgs.cameras import CameraView, Extrinsics, FrameTag, Intrinsics
from ftgs.cloud import GaussianCloud, OffsetTarget, TemporalOffsets, offset_dim


def make_camera(width=16, height=16, fx=20.0, yaw=0.0, center=(0.0, 0.0, 0.0)):
    """Camera at ``center`` looking along +z (world = camera axes for yaw=0)."""
    c, s = np.cos(yaw), np.sin(yaw)
    rot = np.array([[c, 0.0, -s], [0.0, 1.0, 0.0], [s, 0.0, c]])
    center = np.asarray(center, dtype=float)
    extr = Extrinsics(rotation=rot, translation=-rot @ center,
                      frame_tag=FrameTag.WORLD_FRAME_0)
    intr = Intrinsics(fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                      width=width, height=height)
    return CameraView(intrinsics=intr, extrinsics=extr)


def make_scene(seed=0, n=5, degree=3, n_frames=0, canonical=None,
               offset_target=OffsetTarget.POSITION, offset_scale=0.05,
               width=16, height=16):
    """A small well-conditioned scene in front of a +z facing camera.

    Depths are distinct, opacities moderate (no alpha clamping), and colors
    stay inside (0, 1) so clamping subgradients never bite in FD checks.
    """
    rng = np.random.default_rng(seed)
    z = np.linspace(3.0, 6.0, n) + rng.uniform(-0.2, 0.2, n)
    xy = rng.uniform(-0.9, 0.9, (n, 2))
    positions = np.column_stack([xy * z[:, None] / 5.0, z])
    cloud = GaussianCloud(
        positions=positions,
        log_scales=np.log(rng.uniform(0.15, 0.45, (n, 3))),
        rotations=rng.normal(0.0, 1.0, (n, 4)) + np.array([2.0, 0, 0, 0]),
        opacity_logits=rng.uniform(-1.0, 1.0, n),
        sh_coeffs=rng.normal(0.0, 0.15, (n, (degree + 1) ** 2, 3)),
        sh_degree=degree)
    if n_frames:
        if canonical is None:
            canonical = (n_frames + 1) // 2
        dim = offset_dim(offset_target, degree)
        table = offset_scale * rng.standard_normal((n, n_frames, dim))
        cloud.offset_target = offset_target
        cloud.temporal_offsets = TemporalOffsets(table, canonical)
    camera = make_camera(width=width, height=height)
    return cloud, camera


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
