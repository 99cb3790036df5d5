"""Differentiable point-based volume rendering of a Gaussian cloud.

Forward: project each Gaussian (EWA linearization of the perspective map),
evaluate view-dependent color from spherical harmonics, and alpha-composite
depth-sorted 2D splats front-to-back.

Backward: an analytic chain from the per-splat screen-space gradients
(produced by the back-to-front replay kernel) to every optimizable
quantity: centers, per-frame offsets, log scales, quaternions, opacity
logits, SH coefficients, and an SE(3) camera tangent. The tangent matches
the left-multiplicative convention of :func:`ftgs.cameras.se3_retract`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import sh
from ._kernels import composite_backward, composite_forward
from .cameras import CameraView, FrameTag
from .cloud import GaussianCloud, OffsetTarget, quat_exp, quat_multiply, quat_to_rotmat


class RenderError(RuntimeError):
    pass


@dataclass(frozen=True)
class RenderConfig:
    near_clip: float = 0.2
    lowpass_px2: float = 0.3        # added to the 2D covariance diagonal
    cutoff_q: float = 9.0           # max Mahalanobis^2 of a contributing pixel
    t_min: float = 1e-4             # compositing termination transmittance
    alpha_clamp: float = 0.999
    frustum_margin: float = 0.3     # cull when the center projects outside
                                    # the image grown by this fraction


@dataclass
class RenderOutput:
    image: np.ndarray        # (H, W, 3) in [0, 1]
    alpha_map: np.ndarray    # (H, W)
    depth_map: np.ndarray    # (H, W) alpha-normalized expected depth; 0 where uncovered
    surface_depth: np.ndarray  # (H, W) z of the opacity-0.5 crossing; 0 where none
    tape: "RenderTape | None"


@dataclass
class RenderTape:
    """Intermediates cached by the forward pass for the backward pass."""

    cloud: GaussianCloud
    fingerprint: tuple
    camera: CameraView
    t: int | None
    config: RenderConfig
    active_degree: int
    background: np.ndarray
    # visible splats, depth-sorted
    src_index: np.ndarray        # (M,) indices into the cloud
    x_cam: np.ndarray            # (M, 3)
    jproj: np.ndarray            # (M, 2, 3)
    cov_cam: np.ndarray          # (M, 3, 3)
    cov_world: np.ndarray        # (M, 3, 3) (unused by backward but handy)
    rot_world: np.ndarray        # (M, 3, 3) gaussian rotation matrices
    s2: np.ndarray               # (M, 3) exp(2 * log_scale_eff)
    q_eff: np.ndarray            # (M, 4) effective unit quaternions
    q_hat: np.ndarray            # (M, 4) normalized stored quaternions
    q_norm: np.ndarray           # (M,) norms of stored quaternions
    e_quat: np.ndarray | None    # (M, 4) covariance-offset rotation quaternions
    w_off: np.ndarray | None     # (M, 3) covariance-offset rotation tangents
    means2d: np.ndarray          # (M, 2)
    conics: np.ndarray           # (M, 3)
    colors: np.ndarray           # (M, 3) post-clamp
    color_interior: np.ndarray   # (M, 3) bool, inside (0, 1)
    basis: np.ndarray            # (M, n_active_coeffs)
    dirs: np.ndarray             # (M, 3)
    dir_norms: np.ndarray        # (M,)
    alphas: np.ndarray           # (M,)
    opac: np.ndarray             # (M,)
    bboxes: np.ndarray           # (M, 4) int32
    trans: np.ndarray            # (H, W) final transmittance
    last_contrib: np.ndarray     # (H, W) int32


@dataclass
class ParamGradients:
    """Gradients on the full cloud (zeros for Gaussians off screen)."""

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    sh_coeffs: np.ndarray
    offsets_frame: np.ndarray | None   # (N, D) gradient on the frame-t offset row
    frame: int | None
    camera_tangent: np.ndarray | None  # (6,) rho, phi
    background: np.ndarray
    # screen-space diagnostics for densification
    mean2d_grad_norm: np.ndarray       # (N,) NDC-scaled |dL/d mean2d|
    seen: np.ndarray                   # (N,) bool, splat touched the image


def _cloud_fingerprint(cloud: GaussianCloud) -> tuple:
    off = cloud.temporal_offsets
    return (len(cloud),
            float(cloud.positions.sum()), float(cloud.log_scales.sum()),
            float(cloud.rotations.sum()), float(cloud.opacity_logits.sum()),
            float(cloud.sh_coeffs.sum()),
            0.0 if off is None else float(off.offsets.sum()))


def _effective_params(cloud: GaussianCloud, t: int | None):
    """Apply the frame-t offset row to the targeted attribute."""
    pos = cloud.positions
    ls = cloud.log_scales
    logits = cloud.opacity_logits
    shc = cloud.sh_coeffs
    w_off = None
    if cloud.temporal_offsets is not None and t is not None:
        row = cloud.temporal_offsets.at_frame(t)
        tgt = cloud.offset_target
        if tgt is OffsetTarget.POSITION:
            pos = pos + row
        elif tgt is OffsetTarget.COVARIANCE:
            ls = ls + row[:, :3]
            w_off = row[:, 3:]
        elif tgt is OffsetTarget.OPACITY:
            logits = logits + row[:, 0]
        elif tgt is OffsetTarget.FEATURES:
            shc = shc + row.reshape(shc.shape)
    return pos, ls, logits, shc, w_off


def render(cloud: GaussianCloud, t: int | None, camera: CameraView,
           background=(0.0, 0.0, 0.0), active_sh_degree: int | None = None,
           config: RenderConfig = RenderConfig(), with_tape: bool = True
           ) -> RenderOutput:
    """Render the cloud at frame ``t`` through ``camera``.

    ``t=None`` (or a cloud without offsets) renders the base Gaussians.
    """
    intr, extr = camera.intrinsics, camera.extrinsics
    if extr.frame_tag is not FrameTag.WORLD_FRAME_0:
        raise RenderError("camera extrinsics must be in world_frame_0 before rendering")
    if active_sh_degree is None:
        active_sh_degree = cloud.sh_degree
    active_sh_degree = min(active_sh_degree, cloud.sh_degree)
    height, width = intr.height, intr.width
    background = np.asarray(background, dtype=np.float64).reshape(3)

    pos, ls, logits, shc, w_off = _effective_params(cloud, t)
    n = len(cloud)
    if n == 0:
        image = np.ones((height, width, 3)) * background
        zero = np.zeros((height, width))
        return RenderOutput(image=image, alpha_map=zero, depth_map=zero.copy(),
                            surface_depth=zero.copy(), tape=None)

    w_rot = extr.rotation
    x_cam = pos @ w_rot.T + extr.translation
    z = x_cam[:, 2]
    in_front = z > config.near_clip

    # 2D covariance via the EWA linearization.
    q_norm = np.linalg.norm(cloud.rotations, axis=1)
    q_hat = cloud.rotations / q_norm[:, None]
    if w_off is not None:
        e_quat = quat_exp(w_off)
        q_eff = quat_multiply(e_quat, q_hat)
    else:
        e_quat = None
        q_eff = q_hat
    rot = quat_to_rotmat(q_eff)
    s2 = np.exp(2.0 * ls)
    cov_world = np.einsum("nij,nj,nkj->nik", rot, s2, rot)
    cov_cam = np.einsum("ij,njk,lk->nil", w_rot, cov_world, w_rot)

    zs = np.where(in_front, z, 1.0)
    u = intr.fx * x_cam[:, 0] / zs + intr.cx
    v = intr.fy * x_cam[:, 1] / zs + intr.cy
    # the EWA linearization degrades for centers far outside the frustum;
    # cull them like the reference splatting implementations do
    mx = config.frustum_margin * width
    my = config.frustum_margin * height
    in_frustum = (u >= -mx) & (u <= width + mx) & (v >= -my) & (v <= height + my)
    jproj = np.zeros((n, 2, 3))
    jproj[:, 0, 0] = intr.fx / zs
    jproj[:, 0, 2] = -intr.fx * x_cam[:, 0] / zs**2
    jproj[:, 1, 1] = intr.fy / zs
    jproj[:, 1, 2] = -intr.fy * x_cam[:, 1] / zs**2
    cov2d = np.einsum("nij,njk,nlk->nil", jproj, cov_cam, jproj)
    cov2d[:, 0, 0] += config.lowpass_px2
    cov2d[:, 1, 1] += config.lowpass_px2

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    ok = in_front & in_frustum & (det > 1e-12)

    # conservative pixel bounds from the marginal stddevs
    r_sigma = np.sqrt(config.cutoff_q)
    rx = r_sigma * np.sqrt(np.maximum(cov2d[:, 0, 0], 0.0))
    ry = r_sigma * np.sqrt(np.maximum(cov2d[:, 1, 1], 0.0))
    x0 = np.maximum(np.floor(u - rx).astype(np.int64) - 1, 0)
    x1 = np.minimum(np.ceil(u + rx).astype(np.int64) + 1, width)
    y0 = np.maximum(np.floor(v - ry).astype(np.int64) - 1, 0)
    y1 = np.minimum(np.ceil(v + ry).astype(np.int64) + 1, height)
    ok &= (x1 > x0) & (y1 > y0)

    vis = np.flatnonzero(ok)
    if len(vis) == 0:
        image = np.ones((height, width, 3)) * background
        zero = np.zeros((height, width))
        return RenderOutput(image=image, alpha_map=zero, depth_map=zero.copy(),
                            surface_depth=zero.copy(), tape=None)

    # depth-ascending order, stable tie-break on the source index
    order = vis[np.lexsort((vis, z[vis]))]

    inv_det = 1.0 / det[order]
    conics = np.stack([cov2d[order, 1, 1] * inv_det,
                       -cov2d[order, 0, 1] * inv_det,
                       cov2d[order, 0, 0] * inv_det], axis=1)
    means2d = np.stack([u[order], v[order]], axis=1)
    bboxes = np.stack([x0[order], x1[order], y0[order], y1[order]], axis=1).astype(np.int32)

    ccam = extr.camera_center
    dvec = pos[order] - ccam
    dnorm = np.linalg.norm(dvec, axis=1)
    dnorm = np.maximum(dnorm, 1e-12)
    dirs = dvec / dnorm[:, None]
    basis = sh.sh_basis(dirs, active_sh_degree)
    nc = sh.n_coeffs(active_sh_degree)
    raw = np.einsum("mk,mkc->mc", basis, shc[order, :nc, :]) + 0.5
    colors = np.clip(raw, 0.0, 1.0)
    interior = (raw > 0.0) & (raw < 1.0)

    opac = 1.0 / (1.0 + np.exp(-logits[order]))

    image, trans, last_contrib, wdepth, sdepth = composite_forward(
        means2d, conics, colors, opac, z[order], bboxes, height, width,
        background, config.t_min, config.alpha_clamp, config.cutoff_q)

    alpha_map = 1.0 - trans
    with np.errstate(invalid="ignore", divide="ignore"):
        depth_map = np.where(alpha_map > 1e-12, wdepth / np.maximum(alpha_map, 1e-12), 0.0)

    tape = None
    if with_tape:
        tape = RenderTape(
            cloud=cloud, fingerprint=_cloud_fingerprint(cloud), camera=camera, t=t,
            config=config, active_degree=active_sh_degree, background=background,
            src_index=order, x_cam=x_cam[order], jproj=jproj[order],
            cov_cam=cov_cam[order], cov_world=cov_world[order], rot_world=rot[order],
            s2=s2[order], q_eff=q_eff[order], q_hat=q_hat[order], q_norm=q_norm[order],
            e_quat=None if e_quat is None else e_quat[order],
            w_off=None if w_off is None else w_off[order],
            means2d=means2d, conics=conics, colors=colors, color_interior=interior,
            basis=basis, dirs=dirs, dir_norms=dnorm, alphas=opac, opac=opac,
            bboxes=bboxes, trans=trans, last_contrib=last_contrib)
    return RenderOutput(image=image, alpha_map=alpha_map, depth_map=depth_map,
                        surface_depth=sdepth, tape=tape)


_DR_ROWS = None


def _rotmat_quat_jacobians(q: np.ndarray) -> np.ndarray:
    """dR/dq for unit quaternions: (M, 4, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zero = np.zeros_like(w)
    dw = np.stack([zero, -z, y, z, zero, -x, -y, x, zero], axis=1).reshape(-1, 3, 3)
    dx = np.stack([zero, y, z, y, -2 * x, -w, z, w, -2 * x], axis=1).reshape(-1, 3, 3)
    dy = np.stack([-2 * y, x, w, x, zero, z, -w, z, -2 * y], axis=1).reshape(-1, 3, 3)
    dz = np.stack([-2 * z, -w, x, w, -2 * z, y, x, y, zero], axis=1).reshape(-1, 3, 3)
    return 2.0 * np.stack([dw, dx, dy, dz], axis=1)


def _quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """(M, 4, 4) matrices L with quat_multiply(q, p) = L @ p."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.stack([
        w, -x, -y, -z,
        x, w, -z, y,
        y, z, w, -x,
        z, -y, x, w], axis=1).reshape(-1, 4, 4)
    return m


def _quat_right_matrix(p: np.ndarray) -> np.ndarray:
    """(M, 4, 4) matrices R with quat_multiply(e, p) = R @ e."""
    w, x, y, z = p[:, 0], p[:, 1], p[:, 2], p[:, 3]
    m = np.stack([
        w, -x, -y, -z,
        x, w, z, -y,
        y, -z, w, x,
        z, y, -x, w], axis=1).reshape(-1, 4, 4)
    return m


def _quat_exp_jacobian(wvec: np.ndarray) -> np.ndarray:
    """d quat_exp(w) / dw: (M, 4, 3)."""
    theta = np.linalg.norm(wvec, axis=1)
    small = theta < 1e-6
    th = np.where(small, 1.0, theta)
    s = np.where(small, 0.5 - theta**2 / 48.0, np.sin(th / 2.0) / th)
    # ds/dtheta / theta, series near zero: -1/24 + O(theta^2)
    dsdt_over_t = np.where(
        small, -1.0 / 24.0 + theta**2 / 960.0,
        (0.5 * np.cos(th / 2.0) * th - np.sin(th / 2.0)) / th**3)
    jac = np.zeros((len(wvec), 4, 3))
    # d cos(theta/2)/dw = -0.5 * s * w  (since sin(theta/2)/theta = s)
    jac[:, 0, :] = -0.5 * s[:, None] * wvec
    eye = np.eye(3)
    jac[:, 1:, :] = s[:, None, None] * eye[None] + \
        dsdt_over_t[:, None, None] * wvec[:, :, None] * wvec[:, None, :]
    return jac


def render_backward(output: RenderOutput, d_image: np.ndarray,
                    want_camera_gradient: bool = False) -> ParamGradients:
    """Backpropagate an image gradient to all cloud (and pose) parameters.

    Offset gradients follow the chain rule of the targeted attribute and
    are routed to the frame-t row; at the canonical frame they are
    discarded (that row is pinned to zero).
    """
    tape = output.tape
    if tape is None:
        raise RenderError("render output carries no tape (empty render or with_tape=False)")
    cloud = tape.cloud
    if _cloud_fingerprint(cloud) != tape.fingerprint:
        raise RenderError("stale tape: cloud parameters changed since the forward pass")
    intr = tape.camera.intrinsics
    extr = tape.camera.extrinsics
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != (intr.height, intr.width, 3):
        raise RenderError(f"d_image shape {d_image.shape} does not match render size")

    g_mean2d, g_conic, g_color, g_alpha, g_bg = composite_backward(
        tape.means2d, tape.conics, tape.colors, tape.alphas, tape.bboxes,
        tape.trans, tape.last_contrib, d_image, intr.height, intr.width,
        tape.background, tape.config.alpha_clamp, tape.config.cutoff_q)

    m = len(tape.src_index)
    nc_total = sh.n_coeffs(cloud.sh_degree)
    nc = sh.n_coeffs(tape.active_degree)

    # --- color -> SH coefficients and view direction
    g_raw = g_color * tape.color_interior
    g_sh_vis = tape.basis[:, :, None] * g_raw[:, None, :]          # (M, nc, 3)
    dbasis = sh.sh_basis_grad(tape.dirs, tape.active_degree)       # (M, nc, 3dir)
    shc_vis = _effective_sh(cloud, tape)[:, :nc, :]
    g_dir = np.einsum("mkc,mc,mkd->md", shc_vis, g_raw, dbasis)
    # unit-normalization chain: dir = v / |v|
    proj = g_dir - tape.dirs * np.sum(tape.dirs * g_dir, axis=1, keepdims=True)
    g_pos_from_dir = proj / tape.dir_norms[:, None]

    # --- alpha -> opacity logit
    g_logit = g_alpha * tape.opac * (1.0 - tape.opac)

    # --- conic -> 2D covariance
    g_lam = np.empty((m, 2, 2))
    g_lam[:, 0, 0] = g_conic[:, 0]
    g_lam[:, 0, 1] = g_lam[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_lam[:, 1, 1] = g_conic[:, 2]
    lam = np.empty((m, 2, 2))
    lam[:, 0, 0] = tape.conics[:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = tape.conics[:, 1]
    lam[:, 1, 1] = tape.conics[:, 2]
    g_cov2d = -np.einsum("mij,mjk,mkl->mil", lam, g_lam, lam)      # symmetric

    # --- 2D covariance -> camera covariance and projection Jacobian
    g_cov_cam = np.einsum("mji,mjk,mkl->mil", tape.jproj, g_cov2d, tape.jproj)
    g_jproj = 2.0 * np.einsum("mij,mjk,mkl->mil", g_cov2d, tape.jproj, tape.cov_cam)

    # --- screen mean and Jacobian -> camera-space position
    g_xcam = np.einsum("mij,mi->mj", tape.jproj, g_mean2d)
    x, y, z = tape.x_cam[:, 0], tape.x_cam[:, 1], tape.x_cam[:, 2]
    fx, fy = intr.fx, intr.fy
    g_xcam[:, 0] += g_jproj[:, 0, 2] * (-fx / z**2)
    g_xcam[:, 1] += g_jproj[:, 1, 2] * (-fy / z**2)
    g_xcam[:, 2] += (g_jproj[:, 0, 0] * (-fx / z**2)
                     + g_jproj[:, 1, 1] * (-fy / z**2)
                     + g_jproj[:, 0, 2] * (2.0 * fx * x / z**3)
                     + g_jproj[:, 1, 2] * (2.0 * fy * y / z**3))

    # --- camera covariance -> world covariance -> (rotation, scales)
    w_rot = extr.rotation
    g_cov_world = np.einsum("ji,mjk,kl->mil", w_rot, g_cov_cam, w_rot)
    g_rot = 2.0 * np.einsum("mij,mjk->mik", g_cov_world,
                            tape.rot_world * tape.s2[:, None, :])
    g_s2 = np.einsum("mji,mjk,mki->mi", tape.rot_world, g_cov_world, tape.rot_world)
    g_ls_eff = 2.0 * tape.s2 * g_s2

    # --- rotation matrix -> effective quaternion -> stored quaternion
    dr_dq = _rotmat_quat_jacobians(tape.q_eff)
    g_qeff = np.einsum("mqij,mij->mq", dr_dq, g_rot)
    if tape.e_quat is not None:
        g_e = np.einsum("mqp,mq->mp", _quat_right_matrix(tape.q_hat), g_qeff)
        g_qhat = np.einsum("mqp,mq->mp", _quat_left_matrix(tape.e_quat), g_qeff)
        g_w_off = np.einsum("mqd,mq->md", _quat_exp_jacobian(tape.w_off), g_e)
    else:
        g_qhat = g_qeff
        g_w_off = None
    # normalization chain: q_hat = q / |q|
    qdot = np.sum(tape.q_hat * g_qhat, axis=1, keepdims=True)
    g_quat = (g_qhat - tape.q_hat * qdot) / tape.q_norm[:, None]

    # --- camera-space position -> world position
    g_pos_world = g_xcam @ w_rot + g_pos_from_dir

    # --- scatter into full-cloud buffers
    n = len(cloud)
    grads = ParamGradients(
        positions=np.zeros((n, 3)), log_scales=np.zeros((n, 3)),
        rotations=np.zeros((n, 4)), opacity_logits=np.zeros(n),
        sh_coeffs=np.zeros((n, nc_total, 3)), offsets_frame=None, frame=tape.t,
        camera_tangent=None, background=g_bg,
        mean2d_grad_norm=np.zeros(n), seen=np.zeros(n, dtype=bool))
    idx = tape.src_index
    grads.positions[idx] = g_pos_world
    grads.log_scales[idx] = g_ls_eff
    grads.rotations[idx] = g_quat
    grads.opacity_logits[idx] = g_logit
    grads.sh_coeffs[idx, :nc, :] = g_sh_vis
    ndc_scale = 0.5 * max(intr.width, intr.height)
    grads.mean2d_grad_norm[idx] = np.linalg.norm(g_mean2d * ndc_scale, axis=1)
    grads.seen[idx] = True

    # --- route offset gradients (discarded at the canonical frame)
    off = cloud.temporal_offsets
    if off is not None and tape.t is not None and tape.t != off.canonical_frame:
        d = off.dim
        g_off = np.zeros((n, d))
        tgt = cloud.offset_target
        if tgt is OffsetTarget.POSITION:
            g_off[idx] = g_pos_world
        elif tgt is OffsetTarget.COVARIANCE:
            g_off[idx, :3] = g_ls_eff
            g_off[idx, 3:] = g_w_off
        elif tgt is OffsetTarget.OPACITY:
            g_off[idx, 0] = g_logit
        elif tgt is OffsetTarget.FEATURES:
            g_off[idx] = grads.sh_coeffs[idx].reshape(len(idx), -1)
        grads.offsets_frame = g_off

    if want_camera_gradient:
        g_rho = g_xcam.sum(axis=0)
        g_ccam = -g_pos_from_dir.sum(axis=0)
        g_rho += -w_rot @ g_ccam
        g_phi = np.cross(tape.x_cam, g_xcam).sum(axis=0)
        # conjugation term: d<G, E Sigma E^T>/dphi = -2 vee(Sigma G - G Sigma)
        sg = np.einsum("mij,mjk->mik", tape.cov_cam, g_cov_cam)
        gs = np.einsum("mij,mjk->mik", g_cov_cam, tape.cov_cam)
        nmat = (sg - gs).sum(axis=0)
        g_phi += -2.0 * np.array([nmat[2, 1], nmat[0, 2], nmat[1, 0]])
        grads.camera_tangent = np.concatenate([g_rho, g_phi])

    return grads


def _effective_sh(cloud: GaussianCloud, tape: RenderTape) -> np.ndarray:
    shc = cloud.sh_coeffs
    if (cloud.temporal_offsets is not None and tape.t is not None
            and cloud.offset_target is OffsetTarget.FEATURES):
        shc = shc + cloud.temporal_offsets.at_frame(tape.t).reshape(shc.shape)
    return shc[tape.src_index]
