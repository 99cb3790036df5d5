import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ftgs.cameras import project
from ftgs.cloud import (Box3, CloudError, DensifyConfig, GaussianCloud, OffsetTarget,
                        TemporalOffsets, default_canonical_frame, densify_and_prune,
                        offset_dim, quat_exp, quat_multiply, quat_to_rotmat,
                        segment_by_box, translate_subset)

from conftest import make_camera, make_scene


def test_default_canonical_frame():
    assert default_canonical_frame(16) == 8
    assert default_canonical_frame(7) == 4
    assert default_canonical_frame(1) == 1


def test_canonical_row_pinned_to_zero(rng):
    table = rng.normal(0, 1, (4, 6, 3))
    off = TemporalOffsets(table, canonical_frame=3)
    assert np.all(off.offsets[:, 2, :] == 0.0)
    assert np.linalg.norm(off.at_frame(3)) == 0.0


def test_effective_position_vector_addition():
    cloud, _ = make_scene(0, n=3, n_frames=4)
    cloud.positions[0] = [1.0, 2.0, 3.0]
    cloud.temporal_offsets.offsets[0, 0, :] = [0.1, 0.0, 0.0]
    assert np.allclose(cloud.effective_position(0, 1), [1.1, 2.0, 3.0])
    # canonical frame returns the base position exactly
    t_c = cloud.temporal_offsets.canonical_frame
    assert np.array_equal(cloud.effective_position(0, t_c), cloud.positions[0])


def test_effective_position_without_offsets():
    cloud, _ = make_scene(0, n=3)
    for t in (None, 1, 99):
        assert np.array_equal(cloud.effective_position(1, None), cloud.positions[1])


def test_effective_position_bounds():
    cloud, _ = make_scene(0, n=3, n_frames=4)
    with pytest.raises(CloudError):
        cloud.effective_position(10, 1)
    with pytest.raises(CloudError):
        cloud.effective_position(0, 7)


def test_offset_dim_per_target():
    assert offset_dim(OffsetTarget.POSITION, 3) == 3
    assert offset_dim(OffsetTarget.COVARIANCE, 3) == 6
    assert offset_dim(OffsetTarget.OPACITY, 3) == 1
    assert offset_dim(OffsetTarget.FEATURES, 3) == 48
    assert offset_dim(OffsetTarget.FEATURES, 1) == 12


def test_lockstep_validation():
    cloud, _ = make_scene(0, n=4)
    with pytest.raises(CloudError):
        cloud.temporal_offsets = TemporalOffsets(np.zeros((3, 2, 3)), 1)
        cloud.check_lockstep()


def test_covariance_eigenvalues_match_scales(rng):
    cloud, _ = make_scene(3, n=8)
    cov = cloud.covariances()
    for i in range(len(cloud)):
        eig = np.sort(np.linalg.eigvalsh(cov[i]))
        expected = np.sort(np.exp(2.0 * cloud.log_scales[i]))
        assert np.abs(eig - expected).max() < 1e-6 * expected.max()
        # symmetric positive definite
        assert np.abs(cov[i] - cov[i].T).max() < 1e-12
        assert eig.min() > 0


def test_quat_exp_multiply_against_rotmat(rng):
    w = rng.normal(0, 0.5, 3)
    q = quat_exp(w)
    assert abs(np.linalg.norm(q) - 1.0) < 1e-12
    base = rng.normal(0, 1, 4)
    base /= np.linalg.norm(base)
    combined = quat_multiply(q, base)
    r1 = quat_to_rotmat(combined)
    r2 = quat_to_rotmat(q) @ quat_to_rotmat(base)
    assert np.abs(r1 - r2).max() < 1e-12


# --- densification ------------------------------------------------------------

def _densify_setup(seed=0, n=6, n_frames=4):
    cloud, _ = make_scene(seed, n=n, n_frames=n_frames, offset_scale=0.1)
    config = DensifyConfig(grad_threshold=0.5, prune_opacity=0.005,
                           percent_dense=0.01, scene_extent=10.0)
    return cloud, config


def test_densify_noop_below_thresholds(rng):
    cloud, config = _densify_setup()
    before = cloud.positions.copy()
    out, stats = densify_and_prune(cloud, np.zeros(len(cloud)), config, rng)
    assert len(out) == len(cloud)
    assert np.array_equal(out.positions, before)
    assert stats.n_cloned == stats.n_split == stats.n_pruned == 0


def test_densify_prunes_low_opacity(rng):
    cloud, config = _densify_setup()
    cloud.opacity_logits[2] = -12.0   # alpha ~ 6e-6, below the floor
    out, stats = densify_and_prune(cloud, np.zeros(len(cloud)), config, rng)
    assert len(out) == len(cloud) - 1
    assert stats.n_pruned == 1
    assert len(out.temporal_offsets.offsets) == len(out)


def test_densify_clone_copies_offset_row(rng):
    cloud, config = _densify_setup()
    grads = np.zeros(len(cloud))
    grads[1] = 1.0   # high gradient; small scale -> clone
    cloud.log_scales[1] = np.log([0.05, 0.05, 0.05])
    out, stats = densify_and_prune(cloud, grads, config, rng)
    assert stats.n_cloned == 1
    assert len(out) == len(cloud) + 1
    parent_row = cloud.temporal_offsets.offsets[1]
    child_row = out.temporal_offsets.offsets[len(cloud)]
    assert np.array_equal(parent_row, child_row)
    assert np.array_equal(out.positions[len(cloud)], cloud.positions[1])


def test_densify_split_replaces_parent(rng):
    cloud, config = _densify_setup()
    grads = np.zeros(len(cloud))
    grads[0] = 1.0
    cloud.log_scales[0] = np.log([1.0, 1.0, 1.0])   # large -> split
    n0 = len(cloud)
    parent_offsets = cloud.temporal_offsets.offsets[0].copy()
    out, stats = densify_and_prune(cloud, grads, config, rng)
    assert stats.n_split == 1
    assert len(out) == n0 + 1   # parent removed, two children added
    for child in (n0 - 1, n0):
        assert np.array_equal(out.temporal_offsets.offsets[child], parent_offsets)
        assert np.allclose(out.log_scales[child], np.log(1.0 / 1.6))
    # moments bookkeeping is consistent
    assert stats.keep_mask.sum() == len(out)
    assert stats.keep_mask.size == n0 + stats.n_appended


@settings(max_examples=15, deadline=None)
@given(st.integers(min_value=0, max_value=1000))
def test_densify_lockstep_property(seed):
    rng = np.random.default_rng(seed)
    cloud, config = _densify_setup(seed % 7, n=10)
    grads = rng.uniform(0, 1.0, len(cloud))
    cloud.opacity_logits[rng.integers(0, 10)] = -10.0
    out, _ = densify_and_prune(cloud, grads, config, rng)
    assert len(out.temporal_offsets.offsets) == len(out)
    assert np.all(out.temporal_offsets.offsets[
        :, out.temporal_offsets.canonical_frame - 1, :] == 0.0)


# --- editing --------------------------------------------------------------------

def test_segment_empty_box():
    cloud, _ = make_scene(0, n=5)
    box = Box3(center=[100.0, 100, 100], half_extents=[0.5, 0.5, 0.5])
    assert segment_by_box(cloud, box).size == 0


def test_segment_axis_aligned_and_oriented():
    cloud, _ = make_scene(0, n=5)
    cloud.positions[2] = [0.0, 0.0, 5.0]
    box = Box3(center=[0, 0, 5.0], half_extents=[0.2, 0.2, 0.2])
    assert 2 in segment_by_box(cloud, box)
    # rotate the box 45 degrees; a point on the former corner direction exits
    yaw = np.pi / 4
    rot = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0],
                    [0, 0, 1.0]])
    cloud.positions[3] = [0.19, 0.19, 5.0]
    aa_hit = segment_by_box(cloud, box)
    rot_hit = segment_by_box(cloud, Box3([0, 0, 5.0], [0.2, 0.2, 0.2], rot))
    assert 3 in aa_hit
    assert 3 not in rot_hit


def test_translate_inverse_recovers_positions():
    cloud, _ = make_scene(1, n=6)
    idx = np.array([0, 2, 4])
    moved = translate_subset(cloud, idx, np.array([1.0, 0, 0]))
    back = translate_subset(moved, idx, np.array([-1.0, 0, 0]))
    # recoverable up to the rounding of the add/subtract pair
    assert np.allclose(back.positions, cloud.positions, rtol=0, atol=1e-12)
    untouched = np.setdiff1d(np.arange(6), idx)
    assert np.array_equal(moved.positions[untouched], cloud.positions[untouched])
    if cloud.temporal_offsets is not None:
        assert np.array_equal(moved.temporal_offsets.offsets,
                              cloud.temporal_offsets.offsets)


def test_translated_cluster_projected_shift_matches_pinhole():
    # compact cluster at 6 m; shift 1 m laterally; projected centroid motion
    # must match the pinhole prediction within a pixel
    rng = np.random.default_rng(9)
    n = 30
    center = np.array([0.3, -0.2, 6.0])
    pts = center + rng.normal(0, 0.15, (n, 3))
    shc = np.zeros((n, 1, 3))
    shc[:, 0] = (rng.uniform(0.4, 0.9, (n, 3)) - 0.5) / 0.28209479177387814
    cloud = GaussianCloud(positions=pts, log_scales=np.log(np.full((n, 3), 0.08)),
                          rotations=np.tile([1.0, 0, 0, 0], (n, 1)),
                          opacity_logits=np.full(n, 1.5), sh_coeffs=shc, sh_degree=0)
    cam = make_camera(width=64, height=64, fx=60.0)
    delta = np.array([1.0, 0.0, 0.0])

    from ftgs.rasterize import render

    def centroid(img):
        lum = img.sum(axis=2)
        total = lum.sum()
        jj, ii = np.meshgrid(np.arange(64) + 0.5, np.arange(64) + 0.5)
        return np.array([(jj * lum).sum() / total, (ii * lum).sum() / total])

    img0 = render(cloud, None, cam, background=(0, 0, 0), with_tape=False).image
    moved = translate_subset(cloud, np.arange(n), delta)
    img1 = render(moved, None, cam, background=(0, 0, 0), with_tape=False).image
    shift_px = centroid(img1) - centroid(img0)
    uv0, _, _ = project(cam.intrinsics, cam.extrinsics, center)
    uv1, _, _ = project(cam.intrinsics, cam.extrinsics, center + delta)
    assert np.abs(shift_px - (uv1 - uv0)).max() < 1.0
