"""End-to-end optimization: depth-tied warmup, the main splatting loop with
temporal offsets / appearance correction / late camera-pose refinement, and
the switchable baselines used by the ablation grid.

Schedule (step counter runs 1..steps_total):

1. coarse per-view (s, b) least squares against the sparse cloud,
2. steps 1..steps_depth: warmup — Gaussian centers are a function of each
   view's (s, b) via back-projection; gradients flow to (s, b), the
   appearance state, covariances, and SH only,
3. centers freeze at the refined (s, b) and become free parameters,
   temporal offsets attach, and the main loop runs to steps_total; camera
   poses join after steps_pose_start.

One randomly chosen view is rendered and backpropagated per step.
Everything is float64, serial, and bitwise reproducible from the seed.
"""

from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from . import io as fio
from . import sh
from .appearance import AppearanceNet, apply_appearance, appearance_backward, init_embedding
from .cameras import CameraView, Extrinsics, Intrinsics, se3_retract
from .cloud import (DensifyConfig, GaussianCloud, OffsetTarget, TemporalOffsets,
                    densify_and_prune)
from .depth import DepthAlign, DepthAlignError, backproject, fit_scale_offset
from .losses import LossWeights, ftgs_loss_grad, psnr, reg_offsets_frame
from .rasterize import RenderConfig, render, render_backward
from .synth import Dataset


class TrainDivergence(RuntimeError):
    pass


@dataclass
class TrainConfig:
    # schedule
    steps_total: int = 3000
    steps_depth: int = 500
    steps_pose_start: int | None = None   # default: steps_total - pose_tail
    pose_tail: int = 600
    # component toggles (the ablation grid)
    offsets_enabled: bool = True
    ae_enabled: bool = True
    pose_opt_enabled: bool = True
    depth_refine_enabled: bool = True     # GS-loss optimization of (s, b)
    depth_init: str = "aligned"           # aligned | raw | sparse
    offset_target: str = "position"
    holdout: str = "360"                  # 360 | vary_t | none
    # loss
    ssim_weight: float = 0.2
    offset_reg_weight: float = 1.0
    # learning rates
    lr_position: float = 1.6e-4           # scaled by scene extent, exp-decayed
    lr_position_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_sh_rest_div: float = 20.0
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_offsets_factor: float = 0.5        # times the current position lr
    lr_align: float = 1e-3
    lr_appearance: float = 1e-3
    lr_pose: float = 1e-4
    spatial_lr_scale: float | None = None
    # densification
    densify_enabled: bool = True
    densify_delay: int = 400              # main-loop steps before densify starts
    densify_until_frac: float = 0.6
    densify_interval: int = 150
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    percent_dense: float = 0.01
    max_gaussians: int = 60_000
    # spherical harmonics
    sh_degree: int = 3
    sh_unlock_interval: int = 1000
    # initialization
    init_stride: int = 5
    init_opacity: float = 0.1
    max_init_points: int = 40_000
    # appearance
    embed_channels: int = 16
    ae_affine_offset: bool = False
    # misc
    seed: int = 0
    deterministic: bool = True            # implementation is always serial
    log_interval: int = 10
    eval_interval: int = 0                # held-out PSNR every k steps (0 = never)
    snapshot_interval: int = 250          # last-good keepalive for NaN aborts
    divergence_factor: float = 10.0
    near_clip: float = 0.2

    def __post_init__(self):
        if self.steps_depth < 0 or self.steps_total < 0:
            raise ValueError("step counts must be >= 0")
        if self.depth_init == "sparse":
            self.steps_depth = 0
        if self.steps_depth > self.steps_total:
            raise ValueError(f"steps_depth={self.steps_depth} exceeds "
                             f"steps_total={self.steps_total}")
        if self.steps_pose_start is None:
            self.steps_pose_start = max(self.steps_depth,
                                        self.steps_total - self.pose_tail)
        if not (self.steps_depth <= self.steps_pose_start <= self.steps_total):
            raise ValueError("need steps_depth <= steps_pose_start <= steps_total")
        if self.depth_init not in ("aligned", "raw", "sparse"):
            raise ValueError(f"unknown depth_init {self.depth_init!r}")
        if self.offset_target not in [t.value for t in OffsetTarget]:
            raise ValueError(f"unknown offset_target {self.offset_target!r}")

    @staticmethod
    def from_mapping(mapping: dict[str, str]) -> "TrainConfig":
        """Coerce a flat key-value config (strings) onto the dataclass."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
        for key, raw in mapping.items():
            if key not in fields:
                raise ValueError(f"unknown config key {key!r}")
            kwargs[key] = _coerce(raw, str(fields[key].type))
        return TrainConfig(**kwargs)


def _coerce(raw: str, ann: str):
    text = str(raw).strip()
    if "None" in ann and text.lower() in ("none", ""):
        return None
    if "bool" in ann:
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if "int" in ann:
        return int(text)
    if "float" in ann:
        return float(text)
    return text


MODE_OVERRIDES: dict[str, dict] = {
    "ftgs": {},
    "3dgs": {"offsets_enabled": False, "ae_enabled": False, "pose_opt_enabled": False,
             "depth_refine_enabled": False, "depth_init": "sparse"},
    "wo_offsets": {"offsets_enabled": False},
    "wo_ae": {"ae_enabled": False},
    "wo_pose": {"pose_opt_enabled": False},
    "wo_depth_refine": {"depth_refine_enabled": False},
    "wo_depth_opt": {"depth_refine_enabled": False, "depth_init": "raw", "steps_depth": 0},
    "offset_covariance": {"offset_target": "covariance"},
    "offset_opacity": {"offset_target": "opacity"},
    "offset_features": {"offset_target": "features"},
}


def config_for_mode(mode: str, base: TrainConfig) -> TrainConfig:
    if mode not in MODE_OVERRIDES:
        raise ValueError(f"unknown mode {mode!r}; choose from {sorted(MODE_OVERRIDES)}")
    return dataclasses.replace(base, **MODE_OVERRIDES[mode])


# --- Adam --------------------------------------------------------------------

class Adam:
    """Per-tensor Adam with optional per-element learning rates."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr) -> None:
        if name not in self.m:
            self.m[name] = np.zeros_like(param)
            self.v[name] = np.zeros_like(param)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1 - self.beta1) * grad
        v *= self.beta2
        v += (1 - self.beta2) * grad * grad
        mhat = m / (1 - self.beta1**t)
        vhat = v / (1 - self.beta2**t)
        param -= lr * mhat / (np.sqrt(vhat) + self.eps)

    def surgery(self, name: str, keep_mask: np.ndarray, n_new: int) -> None:
        """Mirror a densify/prune row edit: kept rows keep their moments,
        appended rows start cold."""
        if name not in self.m:
            return
        for store in (self.m, self.v):
            old = store[name]
            pad = np.zeros((n_new,) + old.shape[1:], dtype=old.dtype)
            store[name] = np.concatenate([old, pad])[keep_mask]


def expon_lr(step: int, total: int, lr_init: float, lr_final: float) -> float:
    if total <= 0:
        return lr_final
    frac = min(max(step / total, 0.0), 1.0)
    return float(np.exp(np.log(lr_init) * (1 - frac) + np.log(lr_final) * frac))


# --- training state -------------------------------------------------------------

@dataclass
class ViewState:
    camera: CameraView
    align: DepthAlign | None = None
    embedding: np.ndarray | None = None


@dataclass
class TrainResult:
    cloud: GaussianCloud
    views: dict[tuple[int, int], ViewState]
    net: AppearanceNet | None
    config: TrainConfig
    step: int
    metrics_rows: list[dict]
    final_loss: float


def _knn_log_scales(points: np.ndarray) -> np.ndarray:
    """Isotropic init: log of the mean distance to the 3 nearest neighbors."""
    if len(points) < 4:
        return np.full((len(points), 3), np.log(0.1))
    tree = cKDTree(points)
    dist, _ = tree.query(points, k=4)
    mean = np.maximum(dist[:, 1:].mean(axis=1), 1e-4)
    return np.log(mean)[:, None].repeat(3, axis=1)


def _cloud_from_points(points: np.ndarray, colors: np.ndarray, degree: int,
                       opacity: float) -> GaussianCloud:
    n = len(points)
    shc = np.zeros((n, sh.n_coeffs(degree), 3))
    shc[:, 0, :] = sh.rgb_to_dc(colors)
    logit = float(np.log(opacity / (1 - opacity)))
    rots = np.zeros((n, 4))
    rots[:, 0] = 1.0
    return GaussianCloud(positions=points.copy(), log_scales=_knn_log_scales(points),
                         rotations=rots, opacity_logits=np.full(n, logit),
                         sh_coeffs=shc, sh_degree=degree)


class Trainer:
    """Single-scene optimization driver. Use :func:`train` unless you need
    stepwise control or checkpoint/resume."""

    def __init__(self, dataset: Dataset, config: TrainConfig, run_dir=None):
        self.dataset = dataset
        self.config = config
        self.run_dir = Path(run_dir) if run_dir is not None else None
        self.rng = np.random.default_rng(config.seed)
        self.render_config = RenderConfig(near_clip=config.near_clip)
        self.loss_weights = LossWeights(ssim_weight=config.ssim_weight,
                                        offset_reg_weight=config.offset_reg_weight)
        self.adam = Adam()
        self.step = 0
        self.metrics_rows: list[dict] = []
        self.ema = None
        self.ema_start = None
        self.last_good: GaussianCloud | None = None

        self.train_ids = dataset.train_ids(config.holdout)
        if not self.train_ids:
            raise ValueError("no training views left after holdout")
        self.views: dict[tuple[int, int], ViewState] = {
            vid: ViewState(camera=dataset.views[vid].camera) for vid in self.train_ids}

        centers = np.array([v.camera.extrinsics.camera_center for v in self.views.values()])
        spread = np.linalg.norm(centers - centers.mean(axis=0), axis=1).max()
        self.spatial_scale = (config.spatial_lr_scale if config.spatial_lr_scale
                              else max(float(spread) * 1.1, 1.0))

        self.net: AppearanceNet | None = None
        if config.ae_enabled:
            self.net = AppearanceNet.create(self.rng, config.embed_channels,
                                            config.ae_affine_offset)
            for vid in self.train_ids:
                rec = dataset.views[vid]
                h, w = rec.image.shape[:2]
                self.views[vid].embedding = init_embedding(
                    h, w, self.rng, config.embed_channels)

        self._fit_coarse_alignment()
        self.cloud = self._initial_cloud()
        self.grad_accum = np.zeros(len(self.cloud))
        self.seen_accum = np.zeros(len(self.cloud))

    # --- phase 0: coarse depth alignment ------------------------------------

    def _fit_coarse_alignment(self) -> None:
        cfg = self.config
        if cfg.depth_init == "sparse":
            return
        for vid in self.train_ids:
            rec = self.dataset.views[vid]
            if rec.depth is None:
                raise DepthAlignError(f"view {vid} has no depth map")
            if cfg.depth_init == "raw":
                self.views[vid].align = DepthAlign(1.0, 0.0, vid)
            else:
                self.views[vid].align = fit_scale_offset(
                    rec.depth, self.dataset.sparse, rec.camera, cfg.near_clip)

    # --- initialization ---------------------------------------------------------

    def _initial_cloud(self) -> GaussianCloud:
        cfg = self.config
        if cfg.depth_init == "sparse":
            pcd = self.dataset.sparse
            colors = pcd.colors if pcd.colors is not None \
                else np.full((len(pcd.points), 3), 0.5)
            self._birth_view = None
            return _cloud_from_points(pcd.points, colors, cfg.sh_degree, cfg.init_opacity)
        parts = []
        for vid in self.train_ids:
            rec = self.dataset.views[vid]
            parts.append(backproject(rec.depth, self.views[vid].align, rec.camera,
                                     image=rec.image, stride=cfg.init_stride))
        points = np.concatenate([p.points for p in parts])
        colors = np.concatenate([p.colors for p in parts])
        rays = np.concatenate([p.rays for p in parts])
        mono = np.concatenate([p.mono_depth for p in parts])
        origins = np.concatenate([np.repeat(p.origin[None], len(p.points), axis=0)
                                  for p in parts])
        view_of = np.concatenate([np.full(len(p.points), i, dtype=np.int64)
                                  for i, p in enumerate(parts)])
        if len(points) > cfg.max_init_points:
            take = self.rng.choice(len(points), cfg.max_init_points, replace=False)
            take.sort()
            points, colors, rays, mono = points[take], colors[take], rays[take], mono[take]
            origins, view_of = origins[take], view_of[take]
        self._birth_rays = rays
        self._birth_mono = mono
        self._birth_origin = origins
        self._birth_view = view_of
        return _cloud_from_points(points, colors, cfg.sh_degree, cfg.init_opacity)

    def _warmup_positions(self) -> None:
        """Centers as a differentiable function of the per-view (s, b)."""
        s = np.empty(len(self.train_ids))
        b = np.empty(len(self.train_ids))
        for i, vid in enumerate(self.train_ids):
            s[i] = self.views[vid].align.scale
            b[i] = self.views[vid].align.offset
        z = s[self._birth_view] * self._birth_mono + b[self._birth_view]
        self.cloud.positions = self._birth_origin + z[:, None] * self._birth_rays

    # --- shared step machinery ---------------------------------------------------

    def _active_degree(self) -> int:
        return min(self.step // self.config.sh_unlock_interval, self.config.sh_degree)

    def _forward_backward(self, vid, warmup: bool):
        cfg = self.config
        rec = self.dataset.views[vid]
        state = self.views[vid]
        t = rec.camera.frame_index if self.cloud.temporal_offsets is not None else None
        out = render(self.cloud, t, state.camera, background=self.dataset.background,
                     active_sh_degree=self._active_degree(), config=self.render_config)

        ae_tape = None
        if self.net is not None and state.embedding is not None:
            corrected, ae_tape = apply_appearance(out.image, state.embedding, self.net)
        else:
            corrected = out.image

        loss, g_corr, g_rend, _, terms = ftgs_loss_grad(
            out.image, rec.image, corrected, None, self.loss_weights)
        # Eq-style per-step regularizer: the rendered frame's offset rows only
        g_reg_rows = None
        offsets = self.cloud.temporal_offsets
        if not warmup and offsets is not None and t is not None:
            reg_val, g_reg_rows = reg_offsets_frame(offsets, t)
            loss += self.loss_weights.offset_reg_weight * reg_val
            g_reg_rows = self.loss_weights.offset_reg_weight * g_reg_rows
            terms["reg_offsets"] = reg_val

        d_image = g_rend.copy()
        ae_grads = None
        if ae_tape is not None:
            d_params, d_embed, d_render = appearance_backward(self.net, ae_tape, g_corr)
            d_image += d_render
            ae_grads = (d_params, d_embed)
        else:
            d_image += g_corr

        want_pose = (not warmup and cfg.pose_opt_enabled
                     and self.step > cfg.steps_pose_start)
        grads = render_backward(out, d_image, want_camera_gradient=want_pose)
        return loss, terms, grads, ae_grads, g_reg_rows, want_pose

    def _apply_common_updates(self, vid, grads, ae_grads) -> None:
        cfg = self.config
        self.adam.step("log_scales", self.cloud.log_scales, grads.log_scales, cfg.lr_scale)
        self.adam.step("rotations", self.cloud.rotations, grads.rotations, cfg.lr_rotation)
        lr_sh = np.full((1, sh.n_coeffs(cfg.sh_degree), 3), cfg.lr_sh / cfg.lr_sh_rest_div)
        lr_sh[0, 0, :] = cfg.lr_sh
        self.adam.step("sh_coeffs", self.cloud.sh_coeffs, grads.sh_coeffs, lr_sh)
        if ae_grads is not None:
            d_params, d_embed = ae_grads
            for name, g in d_params.items():
                self.adam.step(f"net/{name}", self.net.params[name], g, cfg.lr_appearance)
            self.adam.step(f"ae/{vid[0]}_{vid[1]}", self.views[vid].embedding,
                           d_embed, cfg.lr_appearance)
        self.cloud.renormalize_rotations()

    def _position_lr(self) -> float:
        main_step = max(self.step - self.config.steps_depth, 0)
        main_total = max(self.config.steps_total - self.config.steps_depth, 1)
        return expon_lr(main_step, main_total,
                        self.config.lr_position * self.spatial_scale,
                        self.config.lr_position_final * self.spatial_scale)

    # --- phases --------------------------------------------------------------------

    def run(self, until: int | None = None) -> TrainResult:
        cfg = self.config
        stop = cfg.steps_total if until is None else min(until, cfg.steps_total)
        final_loss = 0.0
        while self.step < stop:
            self.step += 1
            warmup = self.step <= cfg.steps_depth
            if warmup:
                self._warmup_positions()
            if self.step == cfg.steps_depth + 1:
                self._finish_warmup()
            vid = self.train_ids[int(self.rng.integers(len(self.train_ids)))]
            loss, terms, grads, ae_grads, g_reg_rows, want_pose = \
                self._forward_backward(vid, warmup)
            if not np.isfinite(loss):
                self._abort(f"non-finite loss at step {self.step}")
            self._guard_divergence(loss)

            if warmup:
                if cfg.depth_refine_enabled:
                    self._update_alignment(grads.positions)
                self._apply_common_updates(vid, grads, ae_grads)
                self._warmup_positions()
            else:
                self._main_updates(vid, grads, ae_grads, g_reg_rows, want_pose)

            final_loss = loss
            self._log(loss, terms, vid)
            if cfg.snapshot_interval and self.step % cfg.snapshot_interval == 0:
                self.last_good = self.cloud.copy()
        if cfg.steps_depth == cfg.steps_total and self.step == cfg.steps_total:
            self._finish_warmup()   # degenerate schedule: warmup only
        return TrainResult(cloud=self.cloud, views=self.views, net=self.net,
                           config=cfg, step=self.step, metrics_rows=self.metrics_rows,
                           final_loss=final_loss)

    def _finish_warmup(self) -> None:
        """Freeze centers at the refined (s, b) and attach the offset table."""
        cfg = self.config
        if self.cloud.temporal_offsets is not None:
            return  # already finished (resume path)
        if cfg.depth_init != "sparse" and cfg.steps_depth > 0:
            self._warmup_positions()
        if cfg.offsets_enabled and self.dataset.n_frames >= 2:
            self.cloud.attach_offsets(self.dataset.n_frames, self.dataset.canonical_frame,
                                      OffsetTarget(cfg.offset_target))
        self.grad_accum = np.zeros(len(self.cloud))
        self.seen_accum = np.zeros(len(self.cloud))

    def _update_alignment(self, g_positions: np.ndarray) -> None:
        """Route center gradients to each birth view's (s, b)."""
        dot = np.einsum("nd,nd->n", g_positions, self._birth_rays)
        n_views = len(self.train_ids)
        g_s = np.bincount(self._birth_view, weights=dot * self._birth_mono,
                          minlength=n_views)
        g_b = np.bincount(self._birth_view, weights=dot, minlength=n_views)
        sb = np.array([[self.views[v].align.scale, self.views[v].align.offset]
                       for v in self.train_ids])
        self.adam.step("align", sb, np.stack([g_s, g_b], axis=1), self.config.lr_align)
        for i, vid in enumerate(self.train_ids):
            self.views[vid].align = DepthAlign(max(float(sb[i, 0]), 1e-3),
                                               float(sb[i, 1]), vid)

    def _main_updates(self, vid, grads, ae_grads, g_reg_rows, want_pose) -> None:
        cfg = self.config
        lr_pos = self._position_lr()
        self.adam.step("positions", self.cloud.positions, grads.positions, lr_pos)
        self.adam.step("opacity_logits", self.cloud.opacity_logits,
                       grads.opacity_logits, cfg.lr_opacity)
        self._apply_common_updates(vid, grads, ae_grads)

        off = self.cloud.temporal_offsets
        if off is not None:
            table_grad = np.zeros_like(off.offsets)
            if grads.offsets_frame is not None and grads.frame is not None:
                table_grad[:, grads.frame - 1, :] += grads.offsets_frame
            if g_reg_rows is not None and grads.frame is not None:
                table_grad[:, grads.frame - 1, :] += g_reg_rows
            lr_off = lr_pos * cfg.lr_offsets_factor
            if self.cloud.offset_target is not OffsetTarget.POSITION:
                lr_off /= self.spatial_scale  # non-metric parameter spaces
            self.adam.step("offsets", off.offsets, table_grad, lr_off)
            off.pin_canonical()

        if want_pose and grads.camera_tangent is not None:
            state = self.views[vid]
            xi = np.zeros(6)
            self.adam.step(f"pose/{vid[0]}_{vid[1]}", xi, grads.camera_tangent, cfg.lr_pose)
            new_extr = se3_retract(state.camera.extrinsics, -xi)
            state.camera = dataclasses.replace(state.camera, extrinsics=new_extr)

        self.grad_accum += grads.mean2d_grad_norm
        self.seen_accum += grads.seen
        main_step = self.step - cfg.steps_depth
        main_total = cfg.steps_total - cfg.steps_depth
        if (cfg.densify_enabled and main_step > cfg.densify_delay
                and main_step <= cfg.densify_until_frac * main_total
                and main_step % cfg.densify_interval == 0):
            self._densify()

    def _densify(self) -> None:
        cfg = self.config
        avg = self.grad_accum / np.maximum(self.seen_accum, 1.0)
        dcfg = DensifyConfig(
            grad_threshold=cfg.densify_grad_threshold, prune_opacity=cfg.prune_opacity,
            percent_dense=cfg.percent_dense, scene_extent=self.spatial_scale,
            max_gaussians=cfg.max_gaussians)
        self.cloud, stats = densify_and_prune(self.cloud, avg, dcfg, self.rng)
        for name in ("positions", "log_scales", "rotations", "opacity_logits",
                     "sh_coeffs", "offsets"):
            self.adam.surgery(name, stats.keep_mask, stats.n_appended)
        self.grad_accum = np.zeros(len(self.cloud))
        self.seen_accum = np.zeros(len(self.cloud))

    # --- diagnostics -------------------------------------------------------------

    def _guard_divergence(self, loss: float) -> None:
        if self.ema is None:
            self.ema = loss
        self.ema = 0.95 * self.ema + 0.05 * loss
        if self.ema_start is None and self.step >= 10:
            self.ema_start = self.ema
        if (self.ema_start is not None
                and self.ema > self.config.divergence_factor * self.ema_start
                and self.ema > 1e-3):
            self._abort(f"loss diverged: EMA {self.ema:.4g} vs start {self.ema_start:.4g}")

    def _abort(self, why: str) -> None:
        if self.run_dir is not None and self.last_good is not None:
            self.run_dir.mkdir(parents=True, exist_ok=True)
            fio.save_cloud_ply(self.run_dir / "last_good.ply", self.last_good)
        raise TrainDivergence(f"{why} (step {self.step})")

    def holdout_psnr(self) -> float | None:
        """Mean held-out PSNR against clean reference images, canonical render."""
        split = {"360": "test_360", "vary_t": "test_vary_t"}.get(self.config.holdout)
        if split is None:
            return None
        vals = []
        for vid in self.dataset.split_ids(split):
            rec = self.dataset.views[vid]
            ref = rec.gt_image if rec.gt_image is not None else rec.image
            t = self.dataset.canonical_frame if self.cloud.temporal_offsets else None
            out = render(self.cloud, t, rec.camera, background=self.dataset.background,
                         active_sh_degree=self._active_degree(),
                         config=self.render_config, with_tape=False)
            vals.append(psnr(out.image, ref))
        return float(np.mean(vals))

    def _log(self, loss: float, terms: dict, vid) -> None:
        cfg = self.config
        at_end = self.step == cfg.steps_total
        if self.step % cfg.log_interval != 0 and not at_end:
            return
        row = {"step": self.step, "loss": repr(loss), "l1": repr(terms["l1"]),
               "d_ssim": repr(terms["d_ssim"]), "reg_offsets": repr(terms["reg_offsets"]),
               "ema": repr(self.ema), "view": f"{vid[0]}_{vid[1]}",
               "n_gaussians": len(self.cloud), "test_psnr": ""}
        if cfg.eval_interval and (self.step % cfg.eval_interval == 0 or at_end):
            val = self.holdout_psnr()
            if val is not None:
                row["test_psnr"] = repr(val)
        self.metrics_rows.append(row)

    # --- checkpoint / resume -------------------------------------------------------

    def save_state(self, path) -> None:
        """Full optimizer snapshot; resuming reproduces the exact trajectory."""
        arrays = {
            "positions": self.cloud.positions, "log_scales": self.cloud.log_scales,
            "rotations": self.cloud.rotations, "opacity_logits": self.cloud.opacity_logits,
            "sh_coeffs": self.cloud.sh_coeffs,
            "grad_accum": self.grad_accum, "seen_accum": self.seen_accum,
        }
        off = self.cloud.temporal_offsets
        if off is not None:
            arrays["offsets"] = off.offsets
        for name in self.adam.m:
            arrays[f"adam_m/{name}"] = self.adam.m[name]
            arrays[f"adam_v/{name}"] = self.adam.v[name]
        if self.net is not None:
            for name, arr in self.net.params.items():
                arrays[f"net/{name}"] = arr
        meta = {
            "step": self.step,
            "ema": self.ema, "ema_start": self.ema_start,
            "adam_t": self.adam.t,
            "rng_state": self.rng.bit_generator.state,
            "canonical_frame": None if off is None else off.canonical_frame,
            "offsets_attached": off is not None,
            "config": dataclasses.asdict(self.config),
            "metrics_rows": self.metrics_rows,
            "views": [],
        }
        for vid in self.train_ids:
            state = self.views[vid]
            entry = {"id": list(vid),
                     "align": None if state.align is None
                     else [state.align.scale, state.align.offset],
                     "extrinsics": state.camera.extrinsics.matrix().tolist()}
            meta["views"].append(entry)
            if state.embedding is not None:
                arrays[f"ae/{vid[0]}_{vid[1]}"] = state.embedding
        arrays["_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        np.savez_compressed(path, **arrays)

    def load_state(self, path) -> None:
        data = np.load(path)
        meta = json.loads(bytes(data["_meta"].tobytes()).decode())
        self.step = meta["step"]
        self.ema = meta["ema"]
        self.ema_start = meta["ema_start"]
        self.rng.bit_generator.state = meta["rng_state"]
        offsets = None
        if meta["offsets_attached"]:
            offsets = TemporalOffsets(data["offsets"].copy(), meta["canonical_frame"])
        self.cloud = GaussianCloud(
            positions=data["positions"].copy(), log_scales=data["log_scales"].copy(),
            rotations=data["rotations"].copy(),
            opacity_logits=data["opacity_logits"].copy(),
            sh_coeffs=data["sh_coeffs"].copy(), sh_degree=self.config.sh_degree,
            temporal_offsets=offsets,
            offset_target=OffsetTarget(self.config.offset_target))
        self.grad_accum = data["grad_accum"].copy()
        self.seen_accum = data["seen_accum"].copy()
        self.adam = Adam()
        self.adam.t = dict(meta["adam_t"])
        for key in data.files:
            if key.startswith("adam_m/"):
                self.adam.m[key[7:]] = data[key].copy()
            elif key.startswith("adam_v/"):
                self.adam.v[key[7:]] = data[key].copy()
        if self.net is not None:
            self.net.params = {k[4:]: data[k].copy() for k in data.files
                               if k.startswith("net/")}
        for entry in meta["views"]:
            vid = tuple(entry["id"])
            state = self.views[vid]
            if entry["align"] is not None:
                state.align = DepthAlign(entry["align"][0], entry["align"][1], vid)
            extr = Extrinsics.from_matrix(np.array(entry["extrinsics"]))
            state.camera = dataclasses.replace(state.camera, extrinsics=extr)
            key = f"ae/{vid[0]}_{vid[1]}"
            if key in data.files:
                state.embedding = data[key].copy()
        self.metrics_rows = meta["metrics_rows"]


def train(dataset: Dataset, config: TrainConfig, run_dir=None,
          resume_from=None) -> TrainResult:
    """Run the full schedule on a dataset; see :class:`TrainConfig` toggles
    for the plain-splatting baseline and every ablation."""
    trainer = Trainer(dataset, config, run_dir=run_dir)
    if resume_from is not None:
        trainer.load_state(resume_from)
    result = trainer.run()
    if run_dir is not None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(run_dir / "checkpoint.npz", result)
        trainer.save_state(run_dir / "state.npz")
        write_metrics_csv(run_dir / "train_log.csv", result.metrics_rows)
    return result


def write_metrics_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    cols = list(rows[0].keys())
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=cols)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# --- checkpoint (portable result container) ----------------------------------------

def save_checkpoint(path, result: TrainResult) -> None:
    arrays = {
        "positions": result.cloud.positions,
        "log_scales": result.cloud.log_scales,
        "rotations": result.cloud.rotations,
        "opacity_logits": result.cloud.opacity_logits,
        "sh_coeffs": result.cloud.sh_coeffs,
    }
    off = result.cloud.temporal_offsets
    meta = {
        "sh_degree": result.cloud.sh_degree,
        "offset_target": result.cloud.offset_target.value,
        "canonical_frame": None if off is None else off.canonical_frame,
        "step": result.step,
        "config": dataclasses.asdict(result.config),
        "views": [],
    }
    if off is not None:
        arrays["offsets"] = off.offsets
    for vid, state in result.views.items():
        key = f"{vid[0]}_{vid[1]}"
        meta["views"].append({
            "id": list(vid),
            "align": None if state.align is None
            else [state.align.scale, state.align.offset],
            "extrinsics": state.camera.extrinsics.matrix().tolist(),
            "intrinsics": {
                "fx": state.camera.intrinsics.fx, "fy": state.camera.intrinsics.fy,
                "cx": state.camera.intrinsics.cx, "cy": state.camera.intrinsics.cy,
                "width": state.camera.intrinsics.width,
                "height": state.camera.intrinsics.height},
        })
        if state.embedding is not None:
            arrays[f"ae/{key}"] = state.embedding
    if result.net is not None:
        meta["net"] = {"embed_channels": result.net.embed_channels,
                       "affine_offset": result.net.affine_offset}
        for name, arr in result.net.params.items():
            arrays[f"net/{name}"] = arr
    arrays["_meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    np.savez_compressed(path, **arrays)


def load_checkpoint(path):
    """Returns (cloud, meta_dict, extras); extras holds appearance state."""
    data = np.load(path)
    meta = json.loads(bytes(data["_meta"].tobytes()).decode())
    offsets = None
    if "offsets" in data.files:
        offsets = TemporalOffsets(data["offsets"].copy(), meta["canonical_frame"])
    cloud = GaussianCloud(
        positions=data["positions"], log_scales=data["log_scales"],
        rotations=data["rotations"], opacity_logits=data["opacity_logits"],
        sh_coeffs=data["sh_coeffs"], sh_degree=meta["sh_degree"],
        temporal_offsets=offsets, offset_target=OffsetTarget(meta["offset_target"]))
    extras = {"ae": {}, "net": None}
    for key in data.files:
        if key.startswith("ae/"):
            extras["ae"][key[3:]] = data[key]
    if "net" in meta:
        net = AppearanceNet(embed_channels=meta["net"]["embed_channels"],
                            affine_offset=meta["net"]["affine_offset"])
        net.params = {k[4:]: data[k].copy() for k in data.files if k.startswith("net/")}
        extras["net"] = net
    return cloud, meta, extras
