"""Per-view appearance correction.

Each training view owns a learnable low-resolution embedding map (32x
smaller than the image). A small shared CNN consumes the 32x-downsampled
render concatenated with the embedding, and emits per-pixel color weights
at full resolution via 3x3 convolutions, ReLUs, and a single 32x
pixel-shuffle stage. The corrected image ``w_mul * I (+ w_add)`` feeds the
L1 loss term only; rendering and export never apply it.

The head is zero-initialized with unit multiplicative bias, so the
correction starts as an exact identity. Image sizes need not be multiples
of 32: inputs are edge-padded before pooling and outputs cropped after
upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DOWNSAMPLE = 32
DEFAULT_EMBED_CHANNELS = 16
HIDDEN_CHANNELS = (16, 32, 32)


def embedding_shape(height: int, width: int, channels: int = DEFAULT_EMBED_CHANNELS):
    """(h_e, w_e, c_e) for an image of the given size."""
    return (math.ceil(height / DOWNSAMPLE), math.ceil(width / DOWNSAMPLE), channels)


def init_embedding(height: int, width: int, rng: np.random.Generator,
                   channels: int = DEFAULT_EMBED_CHANNELS, scale: float = 0.01
                   ) -> np.ndarray:
    return scale * rng.standard_normal(embedding_shape(height, width, channels))


# --- primitive layers ----------------------------------------------------

def _conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """3x3 same-size convolution, zero padded. x: (h, w, cin), w: (3, 3, cin, cout)."""
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(0, 1))
    out = np.einsum("hwcij,ijco->hwo", win, w) + b
    return out, win


def _conv2d_backward(win: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    d_w = np.einsum("hwcij,hwo->ijco", win, d_out)
    d_b = d_out.sum(axis=(0, 1))
    h, wd = d_out.shape[:2]
    d_xp = np.zeros((h + 2, wd + 2, w.shape[2]))
    for di in range(3):
        for dj in range(3):
            d_xp[di:di + h, dj:dj + wd, :] += np.einsum("hwo,co->hwc", d_out, w[di, dj])
    return d_w, d_b, d_xp[1:h + 1, 1:wd + 1, :]


def _conv1x1_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    """Pointwise projection. x: (h, w, cin), w: (cin, cout)."""
    return np.einsum("hwc,co->hwo", x, w) + b


def _conv1x1_backward(x: np.ndarray, w: np.ndarray, d_out: np.ndarray):
    d_w = np.einsum("hwc,hwo->co", x, d_out)
    d_b = d_out.sum(axis=(0, 1))
    d_x = np.einsum("hwo,co->hwc", d_out, w)
    return d_w, d_b, d_x


def _pixel_shuffle(x: np.ndarray, s: int) -> np.ndarray:
    h, w, c = x.shape
    cout = c // (s * s)
    return x.reshape(h, w, cout, s, s).transpose(0, 3, 1, 4, 2).reshape(h * s, w * s, cout)


def _pixel_shuffle_adjoint(d_out: np.ndarray, s: int) -> np.ndarray:
    hs, ws, cout = d_out.shape
    h, w = hs // s, ws // s
    return d_out.reshape(h, s, w, s, cout).transpose(0, 2, 4, 1, 3).reshape(h, w, cout * s * s)


def _edge_index_maps(height: int, width: int):
    hp = math.ceil(height / DOWNSAMPLE) * DOWNSAMPLE
    wp = math.ceil(width / DOWNSAMPLE) * DOWNSAMPLE
    imap = np.minimum(np.arange(hp), height - 1)
    jmap = np.minimum(np.arange(wp), width - 1)
    return imap, jmap


def _downsample(img: np.ndarray):
    """Edge-pad to a multiple of 32, then 32x average pooling."""
    h, w = img.shape[:2]
    imap, jmap = _edge_index_maps(h, w)
    padded = img[imap][:, jmap]
    hp, wp = padded.shape[:2]
    pooled = padded.reshape(hp // DOWNSAMPLE, DOWNSAMPLE, wp // DOWNSAMPLE, DOWNSAMPLE, -1)
    return pooled.mean(axis=(1, 3)), (h, w)


def _downsample_adjoint(d_low: np.ndarray, orig_shape) -> np.ndarray:
    h, w = orig_shape
    imap, jmap = _edge_index_maps(h, w)
    spread = np.repeat(np.repeat(d_low, DOWNSAMPLE, axis=0), DOWNSAMPLE, axis=1)
    spread /= DOWNSAMPLE * DOWNSAMPLE
    d_img = np.zeros((h, w, d_low.shape[-1]))
    np.add.at(d_img, (imap[:, None], jmap[None, :]), spread)
    return d_img


# --- the corrector network -----------------------------------------------

@dataclass
class AppearanceNet:
    """Shared convolutional corrector producing per-pixel color weights."""

    embed_channels: int = DEFAULT_EMBED_CHANNELS
    affine_offset: bool = False
    params: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def out_channels(self) -> int:
        return 6 if self.affine_offset else 3

    @staticmethod
    def create(rng: np.random.Generator, embed_channels: int = DEFAULT_EMBED_CHANNELS,
               affine_offset: bool = False) -> "AppearanceNet":
        net = AppearanceNet(embed_channels=embed_channels, affine_offset=affine_offset)
        cin = 3 + embed_channels
        params = {}
        for i, cout in enumerate(HIDDEN_CHANNELS):
            std = np.sqrt(2.0 / (9 * cin))
            params[f"conv{i}_w"] = std * rng.standard_normal((3, 3, cin, cout))
            params[f"conv{i}_b"] = np.zeros(cout)
            cin = cout
        # pointwise projection to the shuffle channels; the 3x3 stack above
        # already provides spatial context and a fat 3x3 head would dominate
        # the whole training step
        head_out = net.out_channels * DOWNSAMPLE * DOWNSAMPLE
        params["head_w"] = np.zeros((cin, head_out))
        head_b = np.zeros(head_out)
        # multiplicative weights start at exactly 1 (identity correction)
        head_b.reshape(net.out_channels, DOWNSAMPLE * DOWNSAMPLE)[:3] = 1.0
        params["head_b"] = head_b
        net.params = params
        return net

    def forward(self, render: np.ndarray, embedding: np.ndarray):
        """Returns (w_mul, w_add_or_None, tape)."""
        low, orig_shape = _downsample(render)
        if embedding.shape[:2] != low.shape[:2]:
            raise ValueError(
                f"embedding spatial dims {embedding.shape[:2]} do not match "
                f"the 32x-downsampled image {low.shape[:2]}")
        x = np.concatenate([low, embedding], axis=-1)
        tape = {"orig_shape": orig_shape, "input": x, "wins": [], "acts": []}
        h = x
        for i in range(len(HIDDEN_CHANNELS)):
            pre, win = _conv2d_forward(h, self.params[f"conv{i}_w"], self.params[f"conv{i}_b"])
            h = np.maximum(pre, 0.0)
            tape["wins"].append(win)
            tape["acts"].append(h)
        head = _conv1x1_forward(h, self.params["head_w"], self.params["head_b"])
        full = _pixel_shuffle(head, DOWNSAMPLE)
        hh, ww = orig_shape
        weights = full[:hh, :ww, :]
        tape["full_shape"] = full.shape
        w_mul = weights[:, :, :3]
        w_add = weights[:, :, 3:] if self.affine_offset else None
        return w_mul, w_add, tape

    def backward(self, tape, d_wmul: np.ndarray, d_wadd: np.ndarray | None):
        """Returns (d_params, d_embedding, d_render)."""
        hh, ww = tape["orig_shape"]
        d_full = np.zeros(tape["full_shape"])
        d_full[:hh, :ww, :3] = d_wmul
        if self.affine_offset and d_wadd is not None:
            d_full[:hh, :ww, 3:] = d_wadd
        d_head = _pixel_shuffle_adjoint(d_full, DOWNSAMPLE)

        d_params = {}
        d_w, d_b, d_h = _conv1x1_backward(tape["acts"][-1], self.params["head_w"], d_head)
        d_params["head_w"] = d_w
        d_params["head_b"] = d_b
        for i in reversed(range(len(HIDDEN_CHANNELS))):
            d_h = d_h * (tape["acts"][i] > 0.0)
            d_w, d_b, d_h = _conv2d_backward(tape["wins"][i], self.params[f"conv{i}_w"], d_h)
            d_params[f"conv{i}_w"] = d_w
            d_params[f"conv{i}_b"] = d_b
        d_low = d_h[:, :, :3]
        d_embedding = d_h[:, :, 3:]
        d_render = _downsample_adjoint(d_low, tape["orig_shape"])
        return d_params, d_embedding, d_render


def apply_appearance(render: np.ndarray, embedding: np.ndarray, net: AppearanceNet):
    """Corrected image for the L1 term: ``w_mul * I (+ w_add)``.

    Returns (corrected, tape); pass the tape to :func:`appearance_backward`.
    """
    w_mul, w_add, net_tape = net.forward(render, embedding)
    corrected = w_mul * render
    if w_add is not None:
        corrected = corrected + w_add
    tape = {"net": net_tape, "w_mul": w_mul, "render": render}
    return corrected, tape


def appearance_backward(net: AppearanceNet, tape, d_corrected: np.ndarray):
    """Gradients of a loss on the corrected image.

    Returns (d_params, d_embedding, d_render); d_render includes both the
    multiplicative path and the path through the net's downsampled input.
    """
    d_wmul = d_corrected * tape["render"]
    d_wadd = d_corrected if net.affine_offset else None
    d_params, d_embedding, d_render_in = net.backward(tape["net"], d_wmul, d_wadd)
    d_render = tape["w_mul"] * d_corrected + d_render_in
    return d_params, d_embedding, d_render
