import numpy as np
import pytest

from ftgs.cloud import GaussianCloud, OffsetTarget, TemporalOffsets
from ftgs.rasterize import RenderConfig, RenderError, render, render_backward

from conftest import make_camera, make_scene
from oracles import oracle_render


def test_empty_cloud_returns_background():
    cloud = GaussianCloud(positions=np.zeros((0, 3)), log_scales=np.zeros((0, 3)),
                          rotations=np.zeros((0, 4)), opacity_logits=np.zeros(0),
                          sh_coeffs=np.zeros((0, 16, 3)))
    cam = make_camera()
    out = render(cloud, None, cam, background=(0.5, 0.5, 0.5))
    assert np.array_equal(out.image, np.full((16, 16, 3), 0.5))
    assert out.alpha_map.max() == 0.0


def test_single_opaque_gaussian_center_pixel_red():
    # degree-0 red color, nearly opaque, centered on the optical axis
    n = 1
    sh_dc = (np.array([1.0, 0.0, 0.0]) - 0.5) / 0.28209479177387814
    shc = np.zeros((n, 16, 3))
    shc[0, 0] = sh_dc
    cloud = GaussianCloud(positions=[[0.0, 0.0, 3.0]],
                          log_scales=np.log([[0.5, 0.5, 0.5]]),
                          rotations=[[1.0, 0, 0, 0]],
                          opacity_logits=[12.0],   # alpha ~ 1
                          sh_coeffs=shc)
    cam = make_camera(width=17, height=17, fx=30.0)
    # raise the stability ceiling so alpha can actually approach 1
    out = render(cloud, None, cam, background=(0.0, 0.0, 0.0),
                 config=RenderConfig(alpha_clamp=0.99999))
    center = out.image[8, 8]
    assert np.abs(center - [1.0, 0.0, 0.0]).max() < 1e-3


def test_requires_world_frame_camera():
    from ftgs.cameras import Extrinsics, FrameTag, Intrinsics, CameraView
    cloud, cam = make_scene(0)
    local = CameraView(
        intrinsics=cam.intrinsics,
        extrinsics=Extrinsics(rotation=np.eye(3), translation=np.zeros(3),
                              frame_tag=FrameTag.FRAME_LOCAL))
    with pytest.raises(RenderError):
        render(cloud, None, local)


@pytest.mark.parametrize("seed", range(10))
def test_compositing_matches_scalar_oracle(seed):
    n = 4 + (seed % 4)
    cloud, cam = make_scene(seed, n=n, degree=min(seed % 4, 3))
    config = RenderConfig()
    out = render(cloud, None, cam, background=(0.2, 0.3, 0.4), config=config)
    ref = oracle_render(cloud, None, cam, (0.2, 0.3, 0.4),
                        near_clip=config.near_clip, lowpass=config.lowpass_px2,
                        cutoff_q=config.cutoff_q, t_min=config.t_min,
                        alpha_clamp=config.alpha_clamp)
    assert np.abs(out.image - ref).max() < 1e-6


def test_compositing_oracle_with_position_offsets():
    cloud, cam = make_scene(3, n=6, n_frames=4, offset_scale=0.1)
    out = render(cloud, 2, cam, background=(0.1, 0.1, 0.1))
    ref = oracle_render(cloud, 2, cam, (0.1, 0.1, 0.1))
    assert np.abs(out.image - ref).max() < 1e-6


def test_order_invariance_distinct_depths(rng):
    cloud, cam = make_scene(7, n=8)
    out1 = render(cloud, None, cam, background=(0, 0, 0), with_tape=False)
    perm = rng.permutation(len(cloud))
    shuffled = cloud.select(perm)
    out2 = render(shuffled, None, cam, background=(0, 0, 0), with_tape=False)
    assert np.abs(out1.image - out2.image).max() < 1e-12


def test_alpha_map_in_unit_range_and_blend_identity():
    cloud, cam = make_scene(9, n=10)
    bg = np.array([0.25, 0.5, 0.75])
    out = render(cloud, None, cam, background=bg)
    assert out.alpha_map.min() >= 0.0
    assert out.alpha_map.max() <= 1.0 + 1e-12
    # foreground/background decomposition: image = fg + bg * (1 - alpha)
    black = render(cloud, None, cam, background=(0.0, 0.0, 0.0))
    recon = black.image + bg * (1.0 - out.alpha_map[..., None])
    assert np.abs(recon - out.image).max() < 1e-12


def test_canonical_frame_render_is_bitwise_offset_free():
    cloud, cam = make_scene(11, n=6, n_frames=5, offset_scale=0.2)
    t_c = cloud.temporal_offsets.canonical_frame
    with_offsets = render(cloud, t_c, cam, background=(0.3, 0.1, 0.2), with_tape=False)
    stripped = render(cloud.strip_offsets(), None, cam, background=(0.3, 0.1, 0.2),
                      with_tape=False)
    assert np.array_equal(with_offsets.image, stripped.image)


def test_noncanonical_render_differs():
    cloud, cam = make_scene(11, n=6, n_frames=5, offset_scale=0.2)
    t_c = cloud.temporal_offsets.canonical_frame
    t_other = t_c + 1
    a = render(cloud, t_c, cam, background=(0, 0, 0), with_tape=False)
    b = render(cloud, t_other, cam, background=(0, 0, 0), with_tape=False)
    assert np.abs(a.image - b.image).max() > 1e-4


def test_resolution_doubling_consistency():
    # a large smooth splat rendered at 2x resolution and box-downsampled
    # matches the base render
    shc = np.zeros((1, 1, 3))
    shc[0, 0] = (np.array([0.6, 0.4, 0.3]) - 0.5) / 0.28209479177387814
    cloud = GaussianCloud(positions=[[0.0, 0.0, 4.0]],
                          log_scales=np.log([[1.2, 1.2, 1.2]]),
                          rotations=[[1.0, 0, 0, 0]], opacity_logits=[1.5],
                          sh_coeffs=shc, sh_degree=0)
    lo = make_camera(width=24, height=24, fx=12.0)
    hi = make_camera(width=48, height=48, fx=24.0)
    img_lo = render(cloud, None, lo, background=(0.1, 0.1, 0.1), with_tape=False).image
    img_hi = render(cloud, None, hi, background=(0.1, 0.1, 0.1), with_tape=False).image
    down = img_hi.reshape(24, 2, 24, 2, 3).mean(axis=(1, 3))
    assert np.abs(down - img_lo).max() < 1e-2


def test_depth_map_single_splat():
    shc = np.zeros((1, 1, 3))
    cloud = GaussianCloud(positions=[[0.0, 0.0, 5.0]], log_scales=np.log([[0.8] * 3]),
                          rotations=[[1.0, 0, 0, 0]], opacity_logits=[8.0],
                          sh_coeffs=shc, sh_degree=0)
    cam = make_camera(width=17, height=17, fx=25.0)
    out = render(cloud, None, cam)
    assert abs(out.depth_map[8, 8] - 5.0) < 1e-6


def test_stale_tape_detection():
    cloud, cam = make_scene(2)
    out = render(cloud, None, cam)
    cloud.positions[0, 0] += 0.5
    with pytest.raises(RenderError, match="stale"):
        render_backward(out, np.zeros((16, 16, 3)))


def test_zero_upstream_gradient_gives_zero_grads():
    cloud, cam = make_scene(4, n_frames=3)
    out = render(cloud, 1, cam)
    g = render_backward(out, np.zeros((16, 16, 3)), want_camera_gradient=True)
    assert np.all(g.positions == 0.0)
    assert np.all(g.sh_coeffs == 0.0)
    assert np.all(g.camera_tangent == 0.0)
    assert np.all(g.offsets_frame == 0.0)


def test_transmittance_monotone_under_compositing():
    # compositing only ever reduces transmittance; adding an extra splat
    # cannot increase alpha anywhere
    cloud, cam = make_scene(6, n=7)
    full = render(cloud, None, cam, with_tape=False)
    fewer = render(cloud.select(np.arange(6)), None, cam, with_tape=False)
    assert np.all(full.alpha_map >= fewer.alpha_map - 1e-12)
