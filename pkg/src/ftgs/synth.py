"""Synthetic scene and dataset generator with controlled failure injection.

Stands in for an upstream multi-view video generator: builds a ground-truth
Gaussian scene (textured ground plane, a background ring, and labeled
object clusters), renders a surround rig over a forward ego trajectory,
and emits a dataset directory with three switchable corruption axes:

* local inconsistency: per-frame rigid jitter of object clusters (zero at
  the canonical frame),
* exposure discrepancy: per-camera RGB gain/bias applied to the images,
* depth miscalibration: per-view affine corruption of the emitted depth.

Everything is reproducible from the seed, bitwise.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io as fio
from . import sh
from .cameras import (CameraView, EgoTransform, Extrinsics, FrameTag, Intrinsics,
                      se3_retract, to_world_frame)
from .cloud import Box3, GaussianCloud, default_canonical_frame
from .depth import DepthMap, SparsePointCloud
from .rasterize import RenderConfig, render


@dataclass
class SyntheticSceneSpec:
    seed: int = 0
    n_frames: int = 16
    n_cameras: int = 6
    image_width: int = 200
    image_height: int = 112
    fov_x_deg: float = 90.0
    cam_height: float = 1.6
    cam_radius: float = 0.6
    cam_pitch_deg: float = -10.0
    ground_center: tuple[float, float] = (5.0, 0.0)
    ground_extent: tuple[float, float] = (30.0, 22.0)
    # near-field ground uses small cells so close-range splats stay compact
    ground_cell_fine: float = 0.4
    ground_cell_coarse: float = 1.2
    ground_fine_radius: float = 6.0
    n_objects: int = 6
    object_size: tuple[float, float, float] = (3.6, 1.9, 1.6)
    object_gaussians: int = 42
    object_lateral: tuple[float, float] = (2.5, 7.0)
    n_wall: int = 220
    wall_radius: float = 14.0
    wall_height: float = 4.5
    ego_speed: float = 0.35       # meters per frame along +x
    ego_yaw_rate_deg: float = 0.0
    background_color: tuple[float, float, float] = (0.72, 0.80, 0.90)

    @property
    def canonical_frame(self) -> int:
        return default_canonical_frame(self.n_frames)


@dataclass
class ArtifactSpec:
    """Failure-injection knobs; the all-zero spec emits a clean dataset."""

    inconsistency_sigma: float = 0.0                       # meters, cluster jitter
    exposure_gain_range: tuple[float, float] = (1.0, 1.0)  # per camera, per channel
    exposure_bias_range: tuple[float, float] = (0.0, 0.0)
    depth_scale_range: tuple[float, float] = (1.0, 1.0)    # corruption a in d = a z + c
    depth_offset_range: tuple[float, float] = (0.0, 0.0)   # corruption c
    pose_noise_sigma: float = 0.0                          # SE(3) tangent stddev
    pcd_points: int = 400
    pcd_noise: float = 0.0

    def validate(self) -> None:
        if self.inconsistency_sigma < 0 or self.pose_noise_sigma < 0 or self.pcd_noise < 0:
            raise ValueError("artifact sigmas must be >= 0")


def _yaw_quat(yaw: float) -> np.ndarray:
    return np.array([math.cos(yaw / 2.0), 0.0, 0.0, math.sin(yaw / 2.0)])


@dataclass
class SceneTruth:
    cloud: GaussianCloud            # canonical (jitter-free) scene
    cluster_labels: np.ndarray      # (N,) cluster id, -1 for static geometry
    cluster_boxes: list[dict]       # center / half_extents / yaw per cluster
    spec: SyntheticSceneSpec


def build_scene(spec: SyntheticSceneSpec, rng: np.random.Generator) -> SceneTruth:
    positions, log_scales, rotations, dcs, logits, labels = [], [], [], [], [], []

    def add(pos, scale, quat, rgb, alpha):
        positions.append(pos)
        log_scales.append(np.log(np.asarray(scale, dtype=np.float64)))
        rotations.append(quat)
        dcs.append(sh.rgb_to_dc(np.asarray(rgb)))
        logits.append(math.log(alpha / (1.0 - alpha)))

    ex, ey = spec.ground_extent
    cx, cy = spec.ground_center
    traj_len = spec.ego_speed * (spec.n_frames - 1)
    traj_mid = (traj_len / 2.0, 0.0)
    inner_radius = spec.wall_radius * 0.98 - 0.6

    def dist_to_trajectory(px, py):
        return math.hypot(px - min(max(px, 0.0), traj_len), py)

    def inside_wall(px, py):
        return math.hypot(px - traj_mid[0], py - traj_mid[1]) <= inner_radius

    def add_ground_cell(px, py, cell):
        pz = rng.uniform(-0.03, 0.03)
        base = 0.32 + 0.30 * rng.random()
        rgb = np.clip(base + rng.uniform(-0.10, 0.10, 3), 0.02, 0.95)
        add(np.array([px, py, pz]), (0.80 * cell, 0.80 * cell, 0.05),
            _yaw_quat(rng.uniform(0, math.pi)), rgb, 0.97)
        labels.append(-1)

    def grid(cell, keep):
        nx = max(int(round(ex / cell)), 1)
        ny = max(int(round(ey / cell)), 1)
        for i in range(nx):
            for j in range(ny):
                px = cx - ex / 2 + (i + 0.5) * ex / nx + rng.uniform(-0.2, 0.2) * cell
                py = cy - ey / 2 + (j + 0.5) * ey / ny + rng.uniform(-0.2, 0.2) * cell
                if keep(px, py):
                    add_ground_cell(px, py, cell)

    # coarse tiles away from the trajectory, fine tiles near it: close-range
    # splats must stay small or their grazing-angle footprints smear the
    # renders and poison the emitted depth; everything stays inside the
    # wall ring so the scene holds no never-visible geometry
    grid(spec.ground_cell_coarse,
         lambda px, py: inside_wall(px, py)
         and dist_to_trajectory(px, py) >= spec.ground_fine_radius)
    grid(spec.ground_cell_fine,
         lambda px, py: inside_wall(px, py)
         and dist_to_trajectory(px, py) < spec.ground_fine_radius)

    traj_mid = np.array([spec.ego_speed * (spec.n_frames - 1) / 2.0, 0.0])
    for _ in range(spec.n_wall):
        theta = rng.uniform(0, 2 * math.pi)
        r = spec.wall_radius * rng.uniform(0.98, 1.10)
        h = rng.uniform(1.2, max(spec.wall_height - 1.2, 1.3))
        pos = np.array([traj_mid[0] + r * math.cos(theta),
                        traj_mid[1] + r * math.sin(theta), h])
        rgb = np.clip(np.array([0.45, 0.45, 0.50]) + rng.uniform(-0.25, 0.25, 3), 0.02, 0.95)
        add(pos, (1.5, 0.35, 1.3), _yaw_quat(theta + math.pi / 2), rgb, 0.96)
        labels.append(-1)

    boxes = []
    sx, sy, sz = spec.object_size
    for k in range(spec.n_objects):
        along = rng.uniform(-2.0, spec.ego_speed * spec.n_frames + 3.0)
        side = rng.choice(np.array([-1.0, 1.0]))
        lat = side * rng.uniform(*spec.object_lateral)
        yaw = rng.uniform(0, 2 * math.pi)
        center = np.array([along, lat, sz / 2.0])
        base_rgb = np.clip(rng.uniform(0.15, 0.9, 3), 0.05, 0.95)
        rot = np.array([[math.cos(yaw), -math.sin(yaw), 0.0],
                        [math.sin(yaw), math.cos(yaw), 0.0],
                        [0.0, 0.0, 1.0]])
        for _ in range(spec.object_gaussians):
            local = rng.uniform(-0.5, 0.5, 3) * np.array([sx, sy, sz])
            rgb = np.clip(base_rgb + rng.uniform(-0.12, 0.12, 3), 0.02, 0.98)
            add(center + rot @ local,
                np.array([sx, sy, sz]) / 7.0 * rng.uniform(0.7, 1.3, 3),
                _yaw_quat(yaw + rng.uniform(-0.3, 0.3)), rgb, 0.94)
            labels.append(k)
        boxes.append({"center": center.tolist(),
                      "half_extents": [sx / 2 * 1.15, sy / 2 * 1.15, sz / 2 * 1.15],
                      "yaw": yaw})

    n = len(positions)
    shc = np.zeros((n, sh.n_coeffs(3), 3))
    shc[:, 0, :] = np.array(dcs)
    cloud = GaussianCloud(
        positions=np.array(positions), log_scales=np.array(log_scales),
        rotations=np.array(rotations), opacity_logits=np.array(logits),
        sh_coeffs=shc, sh_degree=3)
    return SceneTruth(cloud=cloud, cluster_labels=np.array(labels, dtype=np.int64),
                      cluster_boxes=boxes, spec=spec)


def rig_local_extrinsics(spec: SyntheticSceneSpec) -> list[Extrinsics]:
    """Frame-local mounts: n cameras fanned around the ego, pitched down."""
    mounts = []
    pitch = math.radians(spec.cam_pitch_deg)
    for c in range(spec.n_cameras):
        yaw = 2 * math.pi * c / spec.n_cameras
        d = np.array([math.cos(yaw) * math.cos(pitch),
                      math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
        pos = np.array([spec.cam_radius * math.cos(yaw),
                        spec.cam_radius * math.sin(yaw), spec.cam_height])
        mounts.append(Extrinsics.look_at(pos, pos + d, frame_tag=FrameTag.FRAME_LOCAL))
    return mounts


def ego_transforms(spec: SyntheticSceneSpec) -> dict[int, EgoTransform]:
    out = {}
    for t in range(1, spec.n_frames + 1):
        yaw = math.radians(spec.ego_yaw_rate_deg) * (t - 1)
        rot = np.array([[math.cos(yaw), -math.sin(yaw), 0.0],
                        [math.sin(yaw), math.cos(yaw), 0.0],
                        [0.0, 0.0, 1.0]])
        out[t] = EgoTransform(rotation=rot,
                              translation=np.array([spec.ego_speed * (t - 1), 0.0, 0.0]))
    return out


def _jitter_table(spec: SyntheticSceneSpec, art: ArtifactSpec, rng: np.random.Generator
                  ) -> np.ndarray:
    """(n_objects, T, 3) rigid displacements; identically zero at t_C."""
    jit = rng.normal(0.0, art.inconsistency_sigma or 0.0,
                     (spec.n_objects, spec.n_frames, 3))
    if art.inconsistency_sigma == 0.0:
        jit[:] = 0.0
    jit[:, spec.canonical_frame - 1, :] = 0.0
    return jit


def jittered_cloud(truth: SceneTruth, jitter_t: np.ndarray) -> GaussianCloud:
    """Apply one frame's per-cluster displacement to the object Gaussians."""
    cloud = truth.cloud.copy()
    for k in range(len(truth.cluster_boxes)):
        cloud.positions[truth.cluster_labels == k] += jitter_t[k]
    return cloud


def default_splits(spec: SyntheticSceneSpec, rng: np.random.Generator):
    """Holdout protocols: all cameras of one frame (ring), and 12 spread-out
    single views across frames."""
    t360 = spec.canonical_frame + 1 if spec.canonical_frame < spec.n_frames \
        else spec.canonical_frame
    test_360 = [[c, t360] for c in range(spec.n_cameras)]
    n_vary = min(12, spec.n_frames)
    frames = rng.choice(np.arange(1, spec.n_frames + 1), size=n_vary, replace=False)
    cams = rng.integers(0, spec.n_cameras, size=n_vary)
    test_vary = sorted([[int(c), int(t)] for c, t in zip(cams, frames)])
    return {"test_360": test_360, "test_vary_t": test_vary}


def make_dataset(spec: SyntheticSceneSpec, art: ArtifactSpec, out_dir,
                 render_config: RenderConfig = RenderConfig()) -> Path:
    """Emit a full dataset directory; returns its path."""
    art.validate()
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    (out / "gt_images").mkdir(exist_ok=True)

    rng = np.random.default_rng(spec.seed)
    truth = build_scene(spec, rng)
    mounts = rig_local_extrinsics(spec)
    egos = ego_transforms(spec)
    intr = Intrinsics.from_fov(spec.fov_x_deg, spec.image_width, spec.image_height)
    jitter = _jitter_table(spec, art, rng)

    gains = rng.uniform(art.exposure_gain_range[0], art.exposure_gain_range[1],
                        (spec.n_cameras, 3))
    biases = rng.uniform(art.exposure_bias_range[0], art.exposure_bias_range[1],
                         (spec.n_cameras, 3))

    depth_corrupt = {}  # (c, t) -> (a, c) with d_emitted = a * z + c
    pose_noise = {}
    view_entries = []
    bg = np.asarray(spec.background_color)

    for t in range(1, spec.n_frames + 1):
        frame_cloud = jittered_cloud(truth, jitter[:, t - 1, :])
        for c in range(spec.n_cameras):
            a = rng.uniform(*art.depth_scale_range)
            cc = rng.uniform(*art.depth_offset_range)
            depth_corrupt[(c, t)] = (float(a), float(cc))
            xi = rng.normal(0.0, art.pose_noise_sigma or 0.0, 6)
            if art.pose_noise_sigma == 0.0:
                xi[:] = 0.0
            pose_noise[(c, t)] = xi

            true_world = to_world_frame(mounts[c], egos[t])
            cam = CameraView(intrinsics=intr, extrinsics=true_world,
                             camera_index=c, frame_index=t)

            res = render(frame_cloud, None, cam, background=bg,
                         config=render_config, with_tape=False)
            observed = np.clip(res.image * gains[c] + biases[c], 0.0, 1.0)
            fio.save_image_png(out / "images" / f"{c}_{t}.png", observed)

            valid = (res.alpha_map > 0.95) & (res.surface_depth > 0.0)
            mono = np.where(valid, a * res.surface_depth + cc, 0.0)
            mono[mono <= 0.0] = 0.0
            fio.save_pfm(out / "depth" / f"{c}_{t}.pfm", mono)

            clean = render(truth.cloud, None, cam, background=bg,
                           config=render_config, with_tape=False)
            fio.save_image_pfm(out / "gt_images" / f"{c}_{t}.pfm", clean.image)

            noisy_local = se3_retract(mounts[c], xi) if np.any(xi) else mounts[c]
            view_entries.append({"camera": c, "frame": t, "intrinsics": intr,
                                 "extrinsics_local": noisy_local})

    fio.save_poses(out / "poses.json", view_entries, egos)

    n = len(truth.cloud)
    take = rng.choice(n, size=min(art.pcd_points, n), replace=False)
    take.sort()
    pts = truth.cloud.positions[take].copy()
    if art.pcd_noise > 0:
        pts += rng.normal(0.0, art.pcd_noise, pts.shape)
    cols = np.clip(sh.dc_to_rgb(truth.cloud.sh_coeffs[take, 0, :]), 0.0, 1.0)
    fio.save_points_ply(out / "sparse.ply", SparsePointCloud(points=pts, colors=cols))
    fio.save_cloud_ply(out / "gt_cloud.ply", truth.cloud)

    splits = default_splits(spec, rng)
    meta = {
        "scene_spec": dataclasses.asdict(spec),
        "artifact_spec": dataclasses.asdict(art),
        "canonical_frame": spec.canonical_frame,
        "background_color": list(spec.background_color),
        "exposure_gains": gains.tolist(),
        "exposure_biases": biases.tolist(),
        "depth_corruption": {f"{c}_{t}": list(v) for (c, t), v in depth_corrupt.items()},
        "depth_align_truth": {f"{c}_{t}": [1.0 / v[0], -v[1] / v[0]]
                              for (c, t), v in depth_corrupt.items()},
        "cluster_boxes": truth.cluster_boxes,
        "cluster_jitter": jitter.tolist(),
        "splits": splits,
    }
    (out / "meta.json").write_text(json.dumps(meta, indent=1))
    return out


@dataclass
class ViewRecord:
    """One training/eval view: camera, observed image, depth, clean image."""

    camera: CameraView
    image: np.ndarray
    depth: DepthMap | None
    gt_image: np.ndarray | None

    @property
    def view_id(self) -> tuple[int, int]:
        return self.camera.view_id


@dataclass
class Dataset:
    root: Path
    views: dict[tuple[int, int], ViewRecord]
    sparse: SparsePointCloud
    meta: dict
    background: np.ndarray
    canonical_frame: int
    n_frames: int

    def view_ids(self) -> list[tuple[int, int]]:
        return sorted(self.views.keys())

    def split_ids(self, split: str) -> list[tuple[int, int]]:
        if split == "train":
            raise ValueError("use train_ids(holdout) for training views")
        key = {"test_360": "test_360", "test_vary_t": "test_vary_t"}.get(split)
        if key is None:
            raise ValueError(f"unknown split {split!r}")
        ids = [tuple(v) for v in self.meta["splits"][key]]
        missing = [v for v in ids if v not in self.views]
        if missing:
            raise ValueError(f"split {split} references absent views: {missing}")
        return ids

    def train_ids(self, holdout: str = "360") -> list[tuple[int, int]]:
        held = set()
        if holdout == "360":
            held = set(self.split_ids("test_360"))
        elif holdout in ("vary_t", "vary-t"):
            held = set(self.split_ids("test_vary_t"))
        elif holdout != "none":
            raise ValueError(f"unknown holdout protocol {holdout!r}")
        return [v for v in self.view_ids() if v not in held]


def load_dataset(root, with_depth: bool = True, with_gt: bool = True) -> Dataset:
    root = Path(root)
    meta = json.loads((root / "meta.json").read_text())
    cameras = fio.load_poses(root / "poses.json")
    views = {}
    for cam in cameras:
        c, t = cam.view_id
        image = fio.load_image_png(root / "images" / f"{c}_{t}.png")
        depth = None
        if with_depth:
            vals = fio.load_pfm(root / "depth" / f"{c}_{t}.pfm")
            depth = DepthMap(vals, vals > 0.0)
        gt = None
        if with_gt:
            gt_path = root / "gt_images" / f"{c}_{t}.pfm"
            if gt_path.exists():
                gt = fio.load_pfm(gt_path)
        views[(c, t)] = ViewRecord(camera=cam, image=image, depth=depth, gt_image=gt)
    sparse = fio.load_points_ply(root / "sparse.ply")
    return Dataset(root=root, views=views, sparse=sparse, meta=meta,
                   background=np.asarray(meta["background_color"], dtype=np.float64),
                   canonical_frame=int(meta["canonical_frame"]),
                   n_frames=int(meta["scene_spec"]["n_frames"]))
