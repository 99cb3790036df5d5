"""Independent reference implementations used as test oracles.

These deliberately share no code with the package: scalar loops, explicit
formulas, scipy for rotations/filtering. They implement the documented
rendering equation directly:

    C = sum_i c_i a'_i prod_{j<i} (1 - a'_j) + bg * prod_j (1 - a'_j),
    a'_i = min(alpha_i * exp(-0.5 d^T Sigma'^-1 d), alpha_clamp),

with splats depth-sorted (stable tie-break on index), per-pixel
termination once transmittance drops below t_min, and contributions
restricted to d^T Sigma'^-1 d <= cutoff_q.
"""

import numpy as np
from scipy.spatial.transform import Rotation

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = [1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396]
SH_C3 = [-0.5900435899266435, 2.890611442640554, -0.4570457994644658,
         0.3731763325901154, -0.4570457994644658, 1.445305721320277,
         -0.5900435899266435]


def sh_eval_scalar(coeffs, d):
    """Literal polynomial evaluation, one channel: coeffs (n,), d unit 3-vec."""
    x, y, z = d
    val = SH_C0 * coeffs[0]
    n = len(coeffs)
    if n > 1:
        val += -SH_C1 * y * coeffs[1] + SH_C1 * z * coeffs[2] - SH_C1 * x * coeffs[3]
    if n > 4:
        xx, yy, zz = x * x, y * y, z * z
        val += (SH_C2[0] * x * y * coeffs[4] + SH_C2[1] * y * z * coeffs[5]
                + SH_C2[2] * (2 * zz - xx - yy) * coeffs[6]
                + SH_C2[3] * x * z * coeffs[7] + SH_C2[4] * (xx - yy) * coeffs[8])
    if n > 9:
        xx, yy, zz = x * x, y * y, z * z
        val += (SH_C3[0] * y * (3 * xx - yy) * coeffs[9]
                + SH_C3[1] * x * y * z * coeffs[10]
                + SH_C3[2] * y * (4 * zz - xx - yy) * coeffs[11]
                + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * coeffs[12]
                + SH_C3[4] * x * (4 * zz - xx - yy) * coeffs[13]
                + SH_C3[5] * z * (xx - yy) * coeffs[14]
                + SH_C3[6] * x * (xx - 3 * yy) * coeffs[15])
    return val


def oracle_render(cloud, t, camera, background, near_clip=0.2, lowpass=0.3,
                  cutoff_q=9.0, t_min=1e-4, alpha_clamp=0.999, active_degree=None,
                  frustum_margin=0.3):
    """Per-pixel scalar-loop compositor. Returns the image (H, W, 3)."""
    intr, extr = camera.intrinsics, camera.extrinsics
    h, w = intr.height, intr.width
    n = len(cloud.positions)
    if active_degree is None:
        active_degree = cloud.sh_degree
    n_coef = (active_degree + 1) ** 2

    # effective positions (position offsets only; oracle used for that mode)
    pos = np.array(cloud.positions, dtype=float, copy=True)
    if cloud.temporal_offsets is not None and t is not None \
            and cloud.offset_target.value == "position":
        pos = pos + cloud.temporal_offsets.offsets[:, t - 1, :]

    cam_r = extr.rotation
    cam_t = extr.translation
    cam_center = -cam_r.T @ cam_t

    splats = []
    for i in range(n):
        x_cam = cam_r @ pos[i] + cam_t
        z = x_cam[2]
        if z <= near_clip:
            continue
        u_c = intr.fx * x_cam[0] / z + intr.cx
        v_c = intr.fy * x_cam[1] / z + intr.cy
        if not (-frustum_margin * w <= u_c <= (1 + frustum_margin) * w
                and -frustum_margin * h <= v_c <= (1 + frustum_margin) * h):
            continue
        q = cloud.rotations[i]
        q = q / np.linalg.norm(q)
        rot = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
        s = np.exp(cloud.log_scales[i])
        cov_w = rot @ np.diag(s**2) @ rot.T
        cov_c = cam_r @ cov_w @ cam_r.T
        fx, fy = intr.fx, intr.fy
        jac = np.array([[fx / z, 0.0, -fx * x_cam[0] / z**2],
                        [0.0, fy / z, -fy * x_cam[1] / z**2]])
        cov2 = jac @ cov_c @ jac.T + lowpass * np.eye(2)
        lam = np.linalg.inv(cov2)
        u = fx * x_cam[0] / z + intr.cx
        v = fy * x_cam[1] / z + intr.cy
        d = pos[i] - cam_center
        d = d / np.linalg.norm(d)
        color = np.empty(3)
        for ch in range(3):
            color[ch] = sh_eval_scalar(cloud.sh_coeffs[i, :n_coef, ch], d) + 0.5
        color = np.clip(color, 0.0, 1.0)
        alpha = 1.0 / (1.0 + np.exp(-cloud.opacity_logits[i]))
        splats.append((z, i, u, v, lam, color, alpha))

    splats.sort(key=lambda rec: (rec[0], rec[1]))
    img = np.zeros((h, w, 3))
    bg = np.asarray(background, dtype=float)
    for i in range(h):
        for j in range(w):
            trans = 1.0
            color = np.zeros(3)
            for z, _, u, v, lam, c, alpha in splats:
                if trans < t_min:
                    break
                dx = (j + 0.5) - u
                dy = (i + 0.5) - v
                qf = lam[0, 0] * dx * dx + 2 * lam[0, 1] * dx * dy + lam[1, 1] * dy * dy
                if qf > cutoff_q or qf < 0:
                    continue
                a_eff = min(alpha * np.exp(-0.5 * qf), alpha_clamp)
                color += c * a_eff * trans
                trans *= 1.0 - a_eff
            img[i, j] = color + bg * trans
    return img


def oracle_ssim(a, b, c1=0.01**2, c2=0.03**2, win=11, sigma=1.5):
    """Literal windowed SSIM with explicit per-pixel loops (zero padding,
    population statistics). Slow; use on small images."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    half = win // 2
    ker = np.exp(-(np.arange(-half, half + 1) ** 2) / (2 * sigma**2))
    ker = ker / ker.sum()
    k2 = np.outer(ker, ker)
    h, w, c = a.shape
    total = 0.0
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                mu_a = mu_b = e_aa = e_bb = e_ab = 0.0
                for di in range(-half, half + 1):
                    for dj in range(-half, half + 1):
                        ii, jj = i + di, j + dj
                        if 0 <= ii < h and 0 <= jj < w:
                            wgt = k2[di + half, dj + half]
                            va, vb = a[ii, jj, ch], b[ii, jj, ch]
                            mu_a += wgt * va
                            mu_b += wgt * vb
                            e_aa += wgt * va * va
                            e_bb += wgt * vb * vb
                            e_ab += wgt * va * vb
                var_a = e_aa - mu_a**2
                var_b = e_bb - mu_b**2
                cov = e_ab - mu_a * mu_b
                s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
                    ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                total += s
    return total / (h * w * c)


def fd_gradient(func, x0, h=1e-4):
    """Central-difference gradient of a scalar function of an array."""
    x0 = np.asarray(x0, dtype=float)
    grad = np.zeros_like(x0)
    flat = grad.reshape(-1)
    xf = x0.reshape(-1)
    for k in range(xf.size):
        xp = xf.copy()
        xp[k] += h
        xm = xf.copy()
        xm[k] -= h
        flat[k] = (func(xp.reshape(x0.shape)) - func(xm.reshape(x0.shape))) / (2 * h)
    return grad


def rel_err(analytic, numeric, floor=1e-6):
    analytic = np.asarray(analytic, dtype=float)
    numeric = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom
