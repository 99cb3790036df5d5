"""Perspective-to-equirectangular panorama stitching.

A ring of concentric perspective renders (90 degree FOV by default) is
resampled onto longitude/latitude: longitude 0 points along world +x,
increasing toward +y; latitude +pi/2 is world +z (up). Overlaps are
feather-blended by distance to each view's image border; rays no view
covers come out black.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .cameras import CameraView, Extrinsics, FrameTag, Intrinsics
from .cloud import GaussianCloud
from .depth import bilinear_sample
from .rasterize import RenderConfig, render


class PanoramaError(ValueError):
    pass


def ring_cameras(center, n_views: int = 4, fov_x_deg: float = 90.0,
                 width: int = 400, height: int = 400, pitch_deg: float = 0.0
                 ) -> list[CameraView]:
    """Concentric outward-looking cameras covering the full longitude span."""
    center = np.asarray(center, dtype=np.float64)
    intr = Intrinsics.from_fov(fov_x_deg, width, height)
    cams = []
    pitch = math.radians(pitch_deg)
    for k in range(n_views):
        yaw = 2.0 * math.pi * k / n_views
        d = np.array([math.cos(yaw) * math.cos(pitch),
                      math.sin(yaw) * math.cos(pitch), math.sin(pitch)])
        extr = Extrinsics.look_at(center, center + d, frame_tag=FrameTag.WORLD_FRAME_0)
        cams.append(CameraView(intrinsics=intr, extrinsics=extr, camera_index=k))
    return cams


def stitch_panorama(images: list[np.ndarray], cameras: list[CameraView],
                    out_width: int = 800, out_height: int = 400,
                    feather_px: float = 12.0) -> np.ndarray:
    """Resample perspective views sharing a center into one equirect image."""
    if len(images) != len(cameras):
        raise PanoramaError("need one image per camera")
    centers = np.array([cam.extrinsics.camera_center for cam in cameras])
    if len(centers) > 1 and np.linalg.norm(centers - centers[0], axis=1).max() > 1e-6:
        raise PanoramaError("panorama cameras must share a common center")

    jj, ii = np.meshgrid(np.arange(out_width), np.arange(out_height))
    lon = (jj + 0.5) / out_width * 2.0 * math.pi - math.pi
    lat = math.pi / 2.0 - (ii + 0.5) / out_height * math.pi
    dirs = np.stack([np.cos(lat) * np.cos(lon),
                     np.cos(lat) * np.sin(lon),
                     np.sin(lat)], axis=-1)

    acc = np.zeros((out_height, out_width, 3))
    wsum = np.zeros((out_height, out_width))
    for img, cam in zip(images, cameras):
        intr, extr = cam.intrinsics, cam.extrinsics
        d_cam = dirs @ extr.rotation.T
        z = d_cam[..., 2]
        front = z > 1e-9
        zs = np.where(front, z, 1.0)
        u = intr.fx * d_cam[..., 0] / zs + intr.cx
        v = intr.fy * d_cam[..., 1] / zs + intr.cy
        inside = front & (u >= 0) & (u <= intr.width) & (v >= 0) & (v <= intr.height)
        # feather: weight falls off toward the view border
        border = np.minimum(np.minimum(u, intr.width - u),
                            np.minimum(v, intr.height - v))
        weight = np.clip(border / feather_px, 0.0, 1.0) * inside
        vals, _ = bilinear_sample(img, np.stack([u, v], axis=-1))
        acc += vals * weight[..., None]
        wsum += weight
    covered = wsum > 1e-9
    out = np.zeros_like(acc)
    out[covered] = acc[covered] / wsum[covered][:, None]
    return out


def render_panorama(cloud: GaussianCloud, center, t: int | None = None,
                    background=(0.0, 0.0, 0.0), out_width: int = 800,
                    out_height: int = 400, n_views: int = 4, face_px: int = 400,
                    render_config: RenderConfig = RenderConfig()) -> np.ndarray:
    """Render a ring of perspective views of the cloud and stitch them."""
    cams = ring_cameras(center, n_views=n_views, width=face_px, height=face_px)
    images = [render(cloud, t, cam, background=background, config=render_config,
                     with_tape=False).image for cam in cams]
    return stitch_panorama(images, cams, out_width=out_width, out_height=out_height)
