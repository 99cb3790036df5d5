"""Fault-tolerant Gaussian splatting.

Differentiable 3D Gaussian rendering with per-frame temporal offsets
anchored to a canonical frame, per-view appearance correction, two-stage
monocular-depth alignment, and a synthetic harness that injects the
failure modes the method tolerates.
"""

from .cameras import (CameraView, EgoTransform, Extrinsics, FrameTag, Intrinsics,
                      project, projection_jacobian, se3_retract, to_world_frame)
from .cloud import (Box3, GaussianCloud, OffsetTarget, TemporalOffsets,
                    densify_and_prune, segment_by_box, translate_subset)
from .depth import DepthAlign, DepthMap, SparsePointCloud, backproject, fit_scale_offset
from .losses import LossWeights, d_ssim, ftgs_loss, gs_loss, l1, psnr, reg_offsets, ssim
from .rasterize import RenderConfig, RenderOutput, render, render_backward
from .synth import ArtifactSpec, SyntheticSceneSpec, load_dataset, make_dataset
from .train import TrainConfig, Trainer, config_for_mode, load_checkpoint, train

__version__ = "0.1.0"
