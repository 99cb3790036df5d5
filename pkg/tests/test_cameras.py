import numpy as np
import pytest
from scipy.linalg import expm

from ftgs.cameras import (CameraError, CameraView, EgoTransform, Extrinsics, FrameTag,
                          Intrinsics, pixel_rays, project, projection_jacobian,
                          se3_exp, se3_retract, so3_exp, to_world_frame)

from conftest import make_camera


def test_intrinsics_validation():
    with pytest.raises(CameraError):
        Intrinsics(fx=-1, fy=1, cx=0, cy=0, width=10, height=10)
    with pytest.raises(CameraError):
        Intrinsics(fx=1, fy=1, cx=0, cy=0, width=0, height=10)


def test_extrinsics_requires_orthonormal_rotation():
    with pytest.raises(CameraError):
        Extrinsics(rotation=np.eye(3) * 1.01, translation=np.zeros(3))
    # improper rotation (reflection) rejected
    m = np.diag([1.0, 1.0, -1.0])
    with pytest.raises(CameraError):
        Extrinsics(rotation=m, translation=np.zeros(3))


def test_project_on_axis():
    intr = Intrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    extr = Extrinsics(rotation=np.eye(3), translation=np.zeros(3))
    uv, z, valid = project(intr, extr, np.array([0.0, 0.0, 2.0]))
    assert valid
    assert z == pytest.approx(2.0)
    assert uv == pytest.approx([50.0, 50.0])
    uv, _, _ = project(intr, extr, np.array([1.0, 0.0, 2.0]))
    assert uv[0] == pytest.approx(100.0)


def test_project_culls_behind_camera():
    intr = Intrinsics(fx=100, fy=100, cx=50, cy=50, width=100, height=100)
    extr = Extrinsics(rotation=np.eye(3), translation=np.zeros(3))
    _, _, valid = project(intr, extr, np.array([[0, 0, -1.0], [0, 0, 0.1], [0, 0, 1.0]]))
    assert valid.tolist() == [False, False, True]


def test_projection_jacobian_matches_finite_differences():
    intr = Intrinsics(fx=120, fy=95, cx=48, cy=31, width=100, height=64)
    rng = np.random.default_rng(3)
    for _ in range(10):
        x = rng.uniform([-1, -1, 2.0], [1, 1, 8.0])
        jac = projection_jacobian(intr, x)
        h = 1e-6
        for k in range(3):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h

            def pix(p):
                return np.array([intr.fx * p[0] / p[2] + intr.cx,
                                 intr.fy * p[1] / p[2] + intr.cy])

            fd = (pix(xp) - pix(xm)) / (2 * h)
            assert np.abs(jac[:, k] - fd).max() < 1e-5 * max(1.0, np.abs(fd).max())


def test_to_world_frame_identity_is_noop():
    extr = Extrinsics(rotation=np.eye(3), translation=np.array([1.0, 2, 3]),
                      frame_tag=FrameTag.FRAME_LOCAL)
    out = to_world_frame(extr, EgoTransform.identity())
    assert np.allclose(out.rotation, extr.rotation)
    assert np.allclose(out.translation, extr.translation)
    assert out.frame_tag is FrameTag.WORLD_FRAME_0


def test_to_world_frame_rejects_double_conversion():
    extr = Extrinsics(rotation=np.eye(3), translation=np.zeros(3))
    with pytest.raises(CameraError):
        to_world_frame(extr, EgoTransform.identity())


def test_to_world_frame_pure_translation():
    # camera at frame-local origin; ego moved 5 m along +x
    extr = Extrinsics(rotation=np.eye(3), translation=np.zeros(3),
                      frame_tag=FrameTag.FRAME_LOCAL)
    ego = EgoTransform(rotation=np.eye(3), translation=np.array([5.0, 0, 0]))
    out = to_world_frame(extr, ego)
    assert np.allclose(out.camera_center, [5.0, 0, 0])
    # matrix oracle: world->cam = local->cam o (frame0->frame_t)
    expected = extr.matrix() @ np.linalg.inv(ego.matrix())
    assert np.allclose(out.matrix(), expected)


def test_to_world_frame_yaw_oracle():
    yaw = np.pi / 2
    rot = np.array([[np.cos(yaw), -np.sin(yaw), 0], [np.sin(yaw), np.cos(yaw), 0],
                    [0, 0, 1.0]])
    ego = EgoTransform(rotation=rot, translation=np.array([1.0, -2.0, 0.5]))
    rng = np.random.default_rng(5)
    q = rng.normal(0, 1, 3)
    local = Extrinsics.from_matrix(se3_exp(rng.normal(0, 0.3, 6)),
                                   frame_tag=FrameTag.FRAME_LOCAL)
    out = to_world_frame(local, ego)
    expected = local.matrix() @ np.linalg.inv(ego.matrix())
    assert np.abs(out.matrix() - expected).max() < 1e-12
    # equivariance: projecting the world point through the converted pose
    # equals projecting the pulled-back point through the original pose
    intr = Intrinsics(fx=80, fy=80, cx=32, cy=32, width=64, height=64)
    x_world = q + np.array([0, 0, 6.0])
    x_local = np.linalg.inv(ego.matrix())[:3] @ np.append(x_world, 1.0)
    uv_a, z_a, va = project(intr, out, x_world)
    uv_b, z_b, vb = project(intr, Extrinsics(local.rotation, local.translation), x_local)
    if va and vb:
        assert np.abs(uv_a - uv_b).max() < 1e-6
        assert abs(z_a - z_b) < 1e-9


def test_so3_exp_matches_scipy_expm():
    rng = np.random.default_rng(11)
    for scale in (1e-10, 1e-4, 0.5, 3.0):
        phi = rng.normal(0, 1, 3) * scale
        hat = np.array([[0, -phi[2], phi[1]], [phi[2], 0, -phi[0]],
                        [-phi[1], phi[0], 0]])
        assert np.abs(so3_exp(phi) - expm(hat)).max() < 1e-9


def test_se3_exp_matches_scipy_expm():
    rng = np.random.default_rng(12)
    for scale in (1e-8, 0.3, 2.0):
        xi = rng.normal(0, 1, 6) * scale
        mat = np.zeros((4, 4))
        mat[:3, :3] = [[0, -xi[5], xi[4]], [xi[5], 0, -xi[3]], [-xi[4], xi[3], 0]]
        mat[:3, 3] = xi[:3]
        assert np.abs(se3_exp(xi) - expm(mat)).max() < 1e-9


def test_se3_retract_zero_is_identity():
    cam = make_camera(yaw=0.4, center=(1.0, 2.0, -0.5))
    out = se3_retract(cam.extrinsics, np.zeros(6))
    assert np.array_equal(out.rotation, cam.extrinsics.rotation)
    assert np.array_equal(out.translation, cam.extrinsics.translation)


def test_se3_retract_translation_moves_center():
    # pure camera-frame translation rho shifts the center by -R^T rho
    cam = make_camera(yaw=0.0)
    eps = 1e-3
    out = se3_retract(cam.extrinsics, np.array([eps, 0, 0, 0, 0, 0]))
    delta = out.camera_center - cam.extrinsics.camera_center
    expected = -cam.extrinsics.rotation.T @ np.array([eps, 0, 0])
    assert np.abs(delta - expected).max() < 1e-12


def test_se3_retract_orthonormal_and_near_inverse():
    rng = np.random.default_rng(7)
    cam = make_camera(yaw=0.9, center=(0.3, -1.0, 2.0))
    for _ in range(5):
        v = rng.normal(0, 1e-3, 6)
        a = se3_retract(cam.extrinsics, v)
        b = se3_retract(a, -v)
        assert np.abs(a.rotation.T @ a.rotation - np.eye(3)).max() < 1e-9
        assert np.abs(b.matrix() - cam.extrinsics.matrix()).max() < 1e-8


def test_pixel_rays_roundtrip():
    cam = make_camera(width=32, height=24, fx=40.0, yaw=0.7, center=(1.0, 0.5, -2.0))
    uv = np.array([[3.5, 10.5], [16.0, 12.0], [31.5, 0.5]])
    origin, rays = pixel_rays(cam.intrinsics, cam.extrinsics, uv)
    pts = origin + 4.2 * rays
    uv2, z, valid = project(cam.intrinsics, cam.extrinsics, pts)
    assert valid.all()
    assert np.abs(z - 4.2).max() < 1e-9
    assert np.abs(uv2 - uv).max() < 1e-9
