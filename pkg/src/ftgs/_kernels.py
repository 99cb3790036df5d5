"""Numba kernels for per-pixel alpha compositing (forward and backward).

Splat-serial: the outer loop runs over depth-sorted splats, the inner loops
over the splat's pixel bounding box. Everything is float64 and strictly
sequential, so results are bitwise deterministic.

The backward kernel replays compositing back-to-front, reconstructing each
splat's front transmittance from the stored final transmittance instead of
keeping per-pixel contribution lists.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def composite_forward(means2d, conics, colors, alphas, depths, bboxes,
                      height, width, background, t_min, alpha_clamp, cutoff_q):
    """Front-to-back compositing of depth-sorted splats.

    Args:
        means2d: (M, 2) splat centers, pixel units.
        conics: (M, 3) inverse 2D covariance entries (a, b, c) with
            quadratic form q = a dx^2 + 2 b dx dy + c dy^2.
        colors: (M, 3), alphas: (M,), depths: (M,) camera-space z.
        bboxes: (M, 4) int32 pixel ranges (x0, x1, y0, y1), half-open.
        background: (3,) color blended under the final transmittance.
        t_min: compositing stops at a pixel once transmittance < t_min.
        alpha_clamp: per-splat alpha ceiling.
        cutoff_q: splat contributes only where q <= cutoff_q.

    Returns:
        (image, trans, last_contrib, wdepth, sdepth): final image (H, W, 3),
        final transmittance (H, W), per-pixel rank of the last composited
        splat (H, W) int32 (-1 where none), the alpha-weighted depth
        accumulator, and the surface depth (z of the splat that pushes
        accumulated opacity past 0.5; 0 where never reached).
    """
    image = np.zeros((height, width, 3))
    trans = np.ones((height, width))
    wdepth = np.zeros((height, width))
    sdepth = np.zeros((height, width))
    last_contrib = np.full((height, width), -1, dtype=np.int32)

    m = means2d.shape[0]
    for r in range(m):
        u = means2d[r, 0]
        v = means2d[r, 1]
        ca = conics[r, 0]
        cb = conics[r, 1]
        cc = conics[r, 2]
        x0, x1, y0, y1 = bboxes[r, 0], bboxes[r, 1], bboxes[r, 2], bboxes[r, 3]
        for i in range(y0, y1):
            dy = (i + 0.5) - v
            for j in range(x0, x1):
                t_cur = trans[i, j]
                if t_cur < t_min:
                    continue
                dx = (j + 0.5) - u
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if q > cutoff_q or q < 0.0:
                    continue
                a_eff = alphas[r] * np.exp(-0.5 * q)
                if a_eff > alpha_clamp:
                    a_eff = alpha_clamp
                w = a_eff * t_cur
                image[i, j, 0] += colors[r, 0] * w
                image[i, j, 1] += colors[r, 1] * w
                image[i, j, 2] += colors[r, 2] * w
                wdepth[i, j] += depths[r] * w
                t_new = t_cur * (1.0 - a_eff)
                if t_cur > 0.5 >= t_new:
                    sdepth[i, j] = depths[r]
                trans[i, j] = t_new
                last_contrib[i, j] = r

    for i in range(height):
        for j in range(width):
            t_cur = trans[i, j]
            image[i, j, 0] += background[0] * t_cur
            image[i, j, 1] += background[1] * t_cur
            image[i, j, 2] += background[2] * t_cur
    return image, trans, last_contrib, wdepth, sdepth


@njit(cache=True)
def composite_backward(means2d, conics, colors, alphas, bboxes,
                       trans, last_contrib, d_image,
                       height, width, background, alpha_clamp, cutoff_q):
    """Back-to-front replay producing per-splat gradients.

    Args:
        trans, last_contrib: outputs of the matching forward call.
        d_image: (H, W, 3) upstream gradient on the composited image.

    Returns:
        (g_mean2d, g_conic, g_color, g_alpha, g_background); conic
        gradients are w.r.t. the (a, b, c) parameters of the quadratic.
    """
    m = means2d.shape[0]
    g_mean2d = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_color = np.zeros((m, 3))
    g_alpha = np.zeros(m)
    g_background = np.zeros(3)

    # suffix[i,j,:] = sum of c_k a'_k T_k over splats behind the current one,
    # plus the background term; t_acc rebuilds each splat's transmittance.
    suffix = np.zeros((height, width, 3))
    t_acc = np.ones((height, width))
    for i in range(height):
        for j in range(width):
            for ch in range(3):
                suffix[i, j, ch] = background[ch] * trans[i, j]
                g_background[ch] += d_image[i, j, ch] * trans[i, j]

    for r in range(m - 1, -1, -1):
        u = means2d[r, 0]
        v = means2d[r, 1]
        ca = conics[r, 0]
        cb = conics[r, 1]
        cc = conics[r, 2]
        x0, x1, y0, y1 = bboxes[r, 0], bboxes[r, 1], bboxes[r, 2], bboxes[r, 3]
        for i in range(y0, y1):
            dy = (i + 0.5) - v
            for j in range(x0, x1):
                if last_contrib[i, j] < r:
                    continue
                dx = (j + 0.5) - u
                q = ca * dx * dx + 2.0 * cb * dx * dy + cc * dy * dy
                if q > cutoff_q or q < 0.0:
                    continue
                g = np.exp(-0.5 * q)
                a_raw = alphas[r] * g
                clamped = a_raw > alpha_clamp
                a_eff = alpha_clamp if clamped else a_raw

                t_new = t_acc[i, j] * (1.0 - a_eff)
                t_acc[i, j] = t_new
                t_front = trans[i, j] / t_new
                w = a_eff * t_front

                d_alpha_eff = 0.0
                one_minus = 1.0 - a_eff
                for ch in range(3):
                    gc = d_image[i, j, ch]
                    g_color[r, ch] += gc * w
                    d_alpha_eff += gc * (colors[r, ch] * t_front
                                         - suffix[i, j, ch] / one_minus)
                    suffix[i, j, ch] += colors[r, ch] * w

                if not clamped:
                    g_alpha[r] += d_alpha_eff * g
                    d_g = d_alpha_eff * alphas[r]
                    d_q = -0.5 * g * d_g
                    g_conic[r, 0] += d_q * dx * dx
                    g_conic[r, 1] += d_q * 2.0 * dx * dy
                    g_conic[r, 2] += d_q * dy * dy
                    g_mean2d[r, 0] += d_q * (-2.0) * (ca * dx + cb * dy)
                    g_mean2d[r, 1] += d_q * (-2.0) * (cb * dx + cc * dy)

    return g_mean2d, g_conic, g_color, g_alpha, g_background
