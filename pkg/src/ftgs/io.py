"""Serialization: point clouds (PLY), depth maps (PFM / 16-bit PNG), the
temporal-offset sidecar, pose files, flat key-value configs, and run
manifests.

Gaussian clouds use the de-facto splatting PLY layout (binary little
endian, float32): x y z, zeroed normals, f_dc_0..2, f_rest_* (channel-major
higher-order SH), opacity, scale_0..2, rot_0..3. Temporal offsets travel in
a sidecar file::

    magic b"FTOF" | uint32 version | int32 count, frames, canonical, dim,
    target_code | float32 data, C-order (count, frames, dim)

target codes: 0 position, 1 covariance, 2 opacity, 3 features.
"""

from __future__ import annotations

import hashlib
import json
import struct
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import sh
from .cameras import CameraView, EgoTransform, Extrinsics, FrameTag, Intrinsics, to_world_frame
from .cloud import GaussianCloud, OffsetTarget, TemporalOffsets
from .depth import SparsePointCloud


class DataFormatError(RuntimeError):
    pass


# --- Gaussian cloud PLY ---------------------------------------------------

_TARGET_CODES = {OffsetTarget.POSITION: 0, OffsetTarget.COVARIANCE: 1,
                 OffsetTarget.OPACITY: 2, OffsetTarget.FEATURES: 3}
_TARGET_FROM_CODE = {v: k for k, v in _TARGET_CODES.items()}


def cloud_property_names(sh_degree: int) -> list[str]:
    n_rest = sh.n_coeffs(sh_degree) - 1
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(3 * n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def save_cloud_ply(path, cloud: GaussianCloud) -> None:
    path = Path(path)
    names = cloud_property_names(cloud.sh_degree)
    n = len(cloud)
    n_rest = sh.n_coeffs(cloud.sh_degree) - 1
    data = np.zeros((n, len(names)), dtype=np.float32)
    data[:, 0:3] = cloud.positions
    data[:, 6:9] = cloud.sh_coeffs[:, 0, :]
    # channel-major rest coefficients, matching the common exporter layout
    rest = cloud.sh_coeffs[:, 1:, :].transpose(0, 2, 1).reshape(n, 3 * n_rest)
    data[:, 9:9 + 3 * n_rest] = rest
    col = 9 + 3 * n_rest
    data[:, col] = cloud.opacity_logits
    data[:, col + 1:col + 4] = cloud.log_scales
    data[:, col + 4:col + 8] = cloud.rotations
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {nm}" for nm in names]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(data.astype("<f4").tobytes())


def load_cloud_ply(path) -> GaussianCloud:
    names, data = _read_ply_table(path)
    idx = {nm: i for i, nm in enumerate(names)}
    for req in ("x", "f_dc_0", "opacity", "scale_0", "rot_0"):
        if req not in idx:
            raise DataFormatError(f"{path}: missing Gaussian property '{req}'")
    n_rest_props = sum(1 for nm in names if nm.startswith("f_rest_"))
    n_rest = n_rest_props // 3
    degree = {0: 0, 3: 1, 8: 2, 15: 3}.get(n_rest)
    if degree is None:
        raise DataFormatError(f"{path}: unsupported f_rest count {n_rest_props}")
    n = data.shape[0]
    shc = np.zeros((n, sh.n_coeffs(degree), 3))
    shc[:, 0, :] = data[:, [idx["f_dc_0"], idx["f_dc_1"], idx["f_dc_2"]]]
    if n_rest:
        rest = data[:, [idx[f"f_rest_{i}"] for i in range(3 * n_rest)]]
        shc[:, 1:, :] = rest.reshape(n, 3, n_rest).transpose(0, 2, 1)
    return GaussianCloud(
        positions=data[:, [idx["x"], idx["y"], idx["z"]]],
        log_scales=data[:, [idx["scale_0"], idx["scale_1"], idx["scale_2"]]],
        rotations=data[:, [idx["rot_0"], idx["rot_1"], idx["rot_2"], idx["rot_3"]]],
        opacity_logits=data[:, idx["opacity"]],
        sh_coeffs=shc, sh_degree=degree)


def save_offsets_sidecar(path, offsets: TemporalOffsets, target: OffsetTarget) -> None:
    table = offsets.offsets
    with open(path, "wb") as f:
        f.write(b"FTOF")
        f.write(struct.pack("<I", 1))
        f.write(struct.pack("<5i", table.shape[0], table.shape[1],
                            offsets.canonical_frame, table.shape[2],
                            _TARGET_CODES[target]))
        f.write(table.astype("<f4").tobytes())


def load_offsets_sidecar(path) -> tuple[TemporalOffsets, OffsetTarget]:
    raw = Path(path).read_bytes()
    if raw[:4] != b"FTOF":
        raise DataFormatError(f"{path}: bad magic for offsets sidecar")
    version, = struct.unpack_from("<I", raw, 4)
    if version != 1:
        raise DataFormatError(f"{path}: unsupported sidecar version {version}")
    count, frames, canonical, dim, code = struct.unpack_from("<5i", raw, 8)
    data = np.frombuffer(raw, dtype="<f4", count=count * frames * dim, offset=28)
    table = data.reshape(count, frames, dim).astype(np.float64)
    return TemporalOffsets(table, canonical), _TARGET_FROM_CODE[code]


# --- generic PLY point clouds ---------------------------------------------

_PLY_DTYPES = {"float": "<f4", "float32": "<f4", "double": "<f8", "float64": "<f8",
               "uchar": "u1", "uint8": "u1", "int": "<i4", "int32": "<i4",
               "uint": "<u4", "short": "<i2", "ushort": "<u2"}


def _read_ply_table(path):
    """Read a single-element PLY (ascii or binary LE) into float64 columns."""
    with open(path, "rb") as f:
        blob = f.read()
    end = blob.find(b"end_header")
    if end < 0:
        raise DataFormatError(f"{path}: not a PLY file (no end_header)")
    header_len = blob.find(b"\n", end) + 1
    lines = blob[:end].decode("ascii", errors="replace").splitlines()
    if not lines or lines[0].strip() != "ply":
        raise DataFormatError(f"{path}: not a PLY file")
    fmt = None
    count = 0
    names: list[str] = []
    types: list[str] = []
    in_vertex = False
    for ln in lines[1:]:
        parts = ln.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            in_vertex = parts[1] == "vertex"
            if in_vertex:
                count = int(parts[2])
        elif parts[0] == "property" and in_vertex:
            if parts[1] == "list":
                raise DataFormatError(f"{path}: list properties not supported")
            types.append(parts[1])
            names.append(parts[2])
    if fmt not in ("ascii", "binary_little_endian"):
        raise DataFormatError(f"{path}: unsupported PLY format {fmt}")
    if fmt == "ascii":
        text = blob[header_len:].decode("ascii")
        vals = np.array(text.split(), dtype=np.float64)
        if vals.size < count * len(names):
            raise DataFormatError(f"{path}: truncated ascii PLY")
        data = vals[:count * len(names)].reshape(count, len(names))
    else:
        try:
            dtype = np.dtype([(nm, _PLY_DTYPES[tp]) for nm, tp in zip(names, types)])
        except KeyError as e:
            raise DataFormatError(f"{path}: unsupported property type {e}") from None
        rec = np.frombuffer(blob, dtype=dtype, count=count, offset=header_len)
        data = np.stack([rec[nm].astype(np.float64) for nm in names], axis=1)
    return names, data


def save_points_ply(path, pcd: SparsePointCloud) -> None:
    n = len(pcd.points)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}",
              "property float x", "property float y", "property float z"]
    if pcd.colors is not None:
        header += ["property uchar red", "property uchar green", "property uchar blue"]
        dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4"),
                          ("red", "u1"), ("green", "u1"), ("blue", "u1")])
        rec = np.zeros(n, dtype=dtype)
        cols = np.clip(np.round(pcd.colors * 255.0), 0, 255).astype("u1")
        rec["red"], rec["green"], rec["blue"] = cols[:, 0], cols[:, 1], cols[:, 2]
    else:
        dtype = np.dtype([("x", "<f4"), ("y", "<f4"), ("z", "<f4")])
        rec = np.zeros(n, dtype=dtype)
    pts = pcd.points.astype("<f4")
    rec["x"], rec["y"], rec["z"] = pts[:, 0], pts[:, 1], pts[:, 2]
    header += ["end_header"]
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(rec.tobytes())


def load_points_ply(path) -> SparsePointCloud:
    names, data = _read_ply_table(path)
    idx = {nm: i for i, nm in enumerate(names)}
    for req in ("x", "y", "z"):
        if req not in idx:
            raise DataFormatError(f"{path}: point cloud lacks '{req}'")
    pts = data[:, [idx["x"], idx["y"], idx["z"]]]
    colors = None
    if all(c in idx for c in ("red", "green", "blue")):
        colors = data[:, [idx["red"], idx["green"], idx["blue"]]] / 255.0
    return SparsePointCloud(points=pts, colors=colors)


# --- depth maps -----------------------------------------------------------

def save_pfm(path, values: np.ndarray) -> None:
    """Grayscale PFM, little endian. Rows are stored bottom-up per the spec."""
    values = np.asarray(values, dtype=np.float32)
    if values.ndim != 2:
        raise DataFormatError("PFM writer expects a single-channel map")
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{values.shape[1]} {values.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(values[::-1].astype("<f4").tobytes())


def load_pfm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"Pf", b"PF"):
        raise DataFormatError(f"{path}: not a PFM file")
    channels = 3 if parts[0] == b"PF" else 1
    w, h = (int(x) for x in parts[1].split())
    scale = float(parts[2])
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(parts[3], dtype=dtype, count=w * h * channels)
    img = data.reshape(h, w) if channels == 1 else data.reshape(h, w, 3)
    return np.ascontiguousarray(img[::-1]).astype(np.float64)


def save_depth_png16(path, values: np.ndarray, scale: float) -> None:
    """16-bit PNG storing round(values / scale); pair with the same scale."""
    q = np.clip(np.round(np.asarray(values) / scale), 0, 65535).astype(np.uint16)
    Image.fromarray(q).save(path)


def load_depth_png16(path, scale: float) -> np.ndarray:
    arr = np.array(Image.open(path), dtype=np.float64)
    return arr * scale


# --- color images -----------------------------------------------------------

def save_image_png(path, image: np.ndarray) -> None:
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def load_image_png(path) -> np.ndarray:
    arr = np.array(Image.open(path).convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image_pfm(path, image: np.ndarray) -> None:
    """Float RGB PFM for loss-exact regression paths."""
    image = np.asarray(image, dtype=np.float32)
    with open(path, "wb") as f:
        f.write(b"PF\n")
        f.write(f"{image.shape[1]} {image.shape[0]}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(image[::-1].astype("<f4").tobytes())


# --- pose files -------------------------------------------------------------

def save_poses(path, views: list[dict], ego: dict[int, EgoTransform]) -> None:
    """Write the pose file: per-(c, t) intrinsics + frame-local extrinsics,
    and the per-t ego transform as a 4x4 row-major matrix.

    Each entry of ``views``: {"camera", "frame", "intrinsics": Intrinsics,
    "extrinsics_local": Extrinsics}.
    """
    doc = {"format": "ftgs-poses-v1", "views": [], "ego": []}
    for v in views:
        intr: Intrinsics = v["intrinsics"]
        extr: Extrinsics = v["extrinsics_local"]
        doc["views"].append({
            "camera": int(v["camera"]), "frame": int(v["frame"]),
            "intrinsics": {"fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
                           "width": intr.width, "height": intr.height},
            "extrinsics_local": extr.matrix().tolist(),
        })
    for t in sorted(ego):
        doc["ego"].append({"frame": int(t), "transform": ego[t].matrix().tolist()})
    Path(path).write_text(json.dumps(doc, indent=1))


def load_poses(path) -> list[CameraView]:
    """Load a pose file and compose every view into world_frame_0."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{path}: invalid JSON pose file ({e})") from None
    if doc.get("format") != "ftgs-poses-v1":
        raise DataFormatError(f"{path}: unknown pose file format {doc.get('format')!r}")
    ego = {int(e["frame"]): EgoTransform.from_matrix(np.array(e["transform"]))
           for e in doc["ego"]}
    views = []
    for v in doc["views"]:
        ii = v["intrinsics"]
        intr = Intrinsics(fx=ii["fx"], fy=ii["fy"], cx=ii["cx"], cy=ii["cy"],
                          width=int(ii["width"]), height=int(ii["height"]))
        local = Extrinsics.from_matrix(np.array(v["extrinsics_local"]),
                                       frame_tag=FrameTag.FRAME_LOCAL)
        t = int(v["frame"])
        if t not in ego:
            raise DataFormatError(f"{path}: view references frame {t} with no ego transform")
        world = to_world_frame(local, ego[t])
        views.append(CameraView(intrinsics=intr, extrinsics=world,
                                camera_index=int(v["camera"]), frame_index=t))
    return views


# --- flat key-value config ---------------------------------------------------

def parse_config_text(text: str, base_dir: Path | None = None) -> dict[str, str]:
    """Flat ``key = value`` lines, '#' comments, and ``include <file>``.

    Later keys override earlier ones; includes are resolved relative to the
    including file.
    """
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("include "):
            inc = line[len("include "):].strip()
            inc_path = (base_dir / inc) if base_dir is not None else Path(inc)
            out.update(parse_config_file(inc_path))
            continue
        if "=" not in line:
            raise DataFormatError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def parse_config_file(path) -> dict[str, str]:
    path = Path(path)
    return parse_config_text(path.read_text(), base_dir=path.parent)


# --- run manifest -------------------------------------------------------------

TOOL_VERSION = "0.1.0"


@dataclass
class RunManifest:
    command: list[str]
    config_hash: str
    inputs: list[str]
    tool_version: str = TOOL_VERSION
    wall_time_s: float = 0.0

    def write(self, run_dir) -> None:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "manifest.json").write_text(json.dumps(self.__dict__, indent=1))


def config_hash(mapping: dict[str, str]) -> str:
    text = "\n".join(f"{k} = {mapping[k]}" for k in sorted(mapping))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


class Stopwatch:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
