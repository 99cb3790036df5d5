"""Command-line surface.

Subcommands: synth, align-depth, train, render, eval, ablate, edit.
Every command writes a manifest.json into its output directory. Exit
codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import io as fio
from .cameras import CameraView
from .cloud import Box3, segment_by_box, translate_subset
from .depth import DepthAlignError, fit_scale_offset
from .evaluate import evaluate, write_metrics
from .panorama import render_panorama
from .rasterize import RenderError, render
from .synth import ArtifactSpec, SyntheticSceneSpec, load_dataset, make_dataset
from .train import (MODE_OVERRIDES, TrainConfig, TrainDivergence, config_for_mode,
                    load_checkpoint, train)

EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class CliError(RuntimeError):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _set_fields(obj, pairs: list[str], label: str):
    """Apply --set key=value overrides onto a dataclass instance."""
    valid = {f.name: f for f in dataclasses.fields(obj)}
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}", EXIT_USAGE)
        key, val = pair.split("=", 1)
        key = key.strip()
        if key not in valid:
            raise CliError(f"unknown {label} field {key!r}", EXIT_USAGE)
        current = getattr(obj, key)
        try:
            if isinstance(current, bool):
                out[key] = val.strip().lower() in ("1", "true", "yes", "on")
            elif isinstance(current, int):
                out[key] = int(val)
            elif isinstance(current, float):
                out[key] = float(val)
            elif isinstance(current, (tuple, list)):
                parts = [float(x) for x in val.replace(",", " ").split()]
                out[key] = type(current)(type(current[0])(p) for p in parts) \
                    if current else tuple(parts)
            else:
                out[key] = val.strip()
        except ValueError as e:
            raise CliError(f"bad value for {label} field {key!r}: {e}", EXIT_USAGE) from None
    return dataclasses.replace(obj, **out)


def _write_manifest(out_dir, args, inputs: list[str], cfg_map: dict, elapsed: float):
    fio.RunManifest(command=list(sys.argv), config_hash=fio.config_hash(cfg_map),
                    inputs=[str(p) for p in inputs], wall_time_s=elapsed).write(out_dir)


def cmd_synth(args) -> int:
    scene = _set_fields(SyntheticSceneSpec(seed=args.seed), args.scene or [], "scene")
    art = _set_fields(ArtifactSpec(), args.artifact or [], "artifact")
    with fio.Stopwatch() as sw:
        make_dataset(scene, art, args.out)
    _write_manifest(args.out, args, [], {**_as_strmap(scene), **_as_strmap(art)}, sw.elapsed)
    print(f"dataset written to {args.out}")
    return 0


def _as_strmap(obj) -> dict[str, str]:
    return {k: str(v) for k, v in dataclasses.asdict(obj).items()}


def _load_train_config(args) -> TrainConfig:
    mapping = {}
    if args.config:
        mapping.update(fio.parse_config_file(args.config))
    for pair in args.set or []:
        if "=" not in pair:
            raise CliError(f"--set expects key=value, got {pair!r}", EXIT_USAGE)
        key, val = pair.split("=", 1)
        mapping[key.strip()] = val.strip()
    if args.seed is not None:
        mapping["seed"] = str(args.seed)
    if args.deterministic:
        mapping["deterministic"] = "true"
    try:
        cfg = TrainConfig.from_mapping(mapping)
    except ValueError as e:
        raise CliError(str(e), EXIT_USAGE) from None
    if args.mode:
        cfg = config_for_mode(args.mode, cfg)
    return cfg


def cmd_align_depth(args) -> int:
    dataset = load_dataset(args.data, with_gt=False)
    rows = {}
    with fio.Stopwatch() as sw:
        for vid in dataset.view_ids():
            rec = dataset.views[vid]
            align = fit_scale_offset(rec.depth, dataset.sparse, rec.camera)
            rows[f"{vid[0]}_{vid[1]}"] = [align.scale, align.offset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "align.json").write_text(json.dumps(rows, indent=1))
    _write_manifest(out, args, [args.data], {"command": "align-depth"}, sw.elapsed)
    print(f"aligned {len(rows)} views -> {out / 'align.json'}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_map = {k: str(v) for k, v in dataclasses.asdict(cfg).items()}
    (out / "config.cfg").write_text(
        "\n".join(f"{k} = {v}" for k, v in sorted(cfg_map.items())) + "\n")
    with fio.Stopwatch() as sw:
        result = train(dataset, cfg, run_dir=out, resume_from=args.resume)
    _write_manifest(out, args, [args.data], cfg_map, sw.elapsed)
    print(f"trained {result.step} steps, final loss {result.final_loss:.5f}; "
          f"checkpoint at {out / 'checkpoint.npz'}")
    return 0


def cmd_render(args) -> int:
    cloud, meta, _ = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t = args.frame if args.frame is not None else meta.get("canonical_frame")
    with fio.Stopwatch() as sw:
        if args.panorama:
            center = [float(x) for x in args.center.split(",")]
            if len(center) != 3:
                raise CliError("--center expects x,y,z", EXIT_USAGE)
            pano = render_panorama(cloud, center, t=t,
                                   background=_bg(args), out_width=args.width,
                                   out_height=args.height)
            fio.save_image_png(out / "panorama.png", pano)
            print(f"panorama -> {out / 'panorama.png'}")
        else:
            if not args.poses:
                raise CliError("render needs --poses FILE or --panorama", EXIT_USAGE)
            views = fio.load_poses(args.poses)
            for view in views:
                res = render(cloud, t, view, background=_bg(args), with_tape=False)
                name = f"{view.camera_index}_{view.frame_index}.png"
                fio.save_image_png(out / name, res.image)
            print(f"rendered {len(views)} views -> {out}")
    _write_manifest(out, args, [args.checkpoint], {"command": "render"}, sw.elapsed)
    return 0


def _bg(args):
    return tuple(float(x) for x in args.background.split(","))


def cmd_eval(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.compare:
        if len(args.compare) != 2:
            raise CliError("--compare expects two metrics CSV paths", EXIT_USAGE)
        return _compare(args.compare, out)
    cloud, _, _ = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    with fio.Stopwatch() as sw:
        report = evaluate(cloud, dataset, args.split)
    write_metrics(out / "metrics.csv", report)
    _write_manifest(out, args, [args.checkpoint, args.data],
                    {"split": args.split}, sw.elapsed)
    mean = report["mean"]
    print(f"{args.split}: " + "  ".join(f"{k}={v:.4f}" for k, v in mean.items()))
    return 0


def _compare(paths, out: Path) -> int:
    def read_mean(path):
        with open(path) as f:
            rows = list(csv.reader(f))
        header = rows[0]
        mean_row = next(r for r in rows[1:] if r[0] == "mean")
        return {header[i]: float(mean_row[i]) for i in range(2, len(header))}

    a, b = (read_mean(p) for p in paths)
    lines = [["metric", "run_a", "run_b", "delta"]]
    for key in a:
        lines.append([key, repr(a[key]), repr(b[key]), repr(b[key] - a[key])])
    with open(out / "compare.csv", "w", newline="") as f:
        csv.writer(f).writerows(lines)
    for row in lines:
        print("  ".join(str(x) for x in row))
    return 0


def cmd_ablate(args) -> int:
    base = _load_train_config(args)
    dataset = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    modes = args.modes.split(",")
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    with fio.Stopwatch() as sw:
        for mode in modes:
            for seed in seeds:
                cfg = dataclasses.replace(config_for_mode(mode, base), seed=seed)
                run_dir = out / f"{mode}_seed{seed}"
                result = train(dataset, cfg, run_dir=run_dir)
                split = {"360": "test_360", "vary_t": "test_vary_t"}.get(cfg.holdout,
                                                                         "test_360")
                report = evaluate(result.cloud, dataset, split)
                row = {"mode": mode, "seed": seed, "split": split}
                row.update({k: repr(v) for k, v in report["mean"].items()})
                rows.append(row)
                print(f"{mode} seed {seed}: psnr={report['mean']['psnr']:.3f}")
    with open(out / "ablation.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    _write_manifest(out, args, [args.data], {"modes": args.modes, "seeds": args.seeds},
                    sw.elapsed)
    return 0


def cmd_edit(args) -> int:
    cloud, meta, _ = load_checkpoint(args.checkpoint)
    vals = [float(x) for x in args.box.split(",")]
    if len(vals) not in (6, 7):
        raise CliError("--box expects cx,cy,cz,hx,hy,hz[,yaw_deg]", EXIT_USAGE)
    rot = np.eye(3)
    if len(vals) == 7:
        yaw = np.deg2rad(vals[6])
        rot = np.array([[np.cos(yaw), -np.sin(yaw), 0.0],
                        [np.sin(yaw), np.cos(yaw), 0.0], [0.0, 0.0, 1.0]])
    box = Box3(center=vals[:3], half_extents=vals[3:6], rotation=rot)
    delta = np.array([float(x) for x in args.translate.split(",")])
    if delta.shape != (3,):
        raise CliError("--translate expects dx,dy,dz", EXIT_USAGE)
    with fio.Stopwatch() as sw:
        idx = segment_by_box(cloud, box)
        edited = translate_subset(cloud, idx, delta)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fio.save_cloud_ply(out / "edited.ply", edited)
    if edited.temporal_offsets is not None:
        fio.save_offsets_sidecar(out / "edited.offsets", edited.temporal_offsets,
                                 edited.offset_target)
    _write_manifest(out, args, [args.checkpoint],
                    {"box": args.box, "translate": args.translate}, sw.elapsed)
    print(f"moved {len(idx)} gaussians by {delta.tolist()} -> {out / 'edited.ply'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ftgs",
                                description="Fault-tolerant Gaussian splatting pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    sp.add_argument("--out", required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--scene", action="append", metavar="KEY=VALUE")
    sp.add_argument("--artifact", action="append", metavar="KEY=VALUE")
    sp.set_defaults(func=cmd_synth)

    ap = sub.add_parser("align-depth", help="coarse per-view depth alignment")
    ap.add_argument("--data", required=True)
    ap.add_argument("--out", required=True)
    ap.set_defaults(func=cmd_align_depth)

    tp = sub.add_parser("train", help="optimize a scene")
    tp.add_argument("--data", required=True)
    tp.add_argument("--out", required=True)
    tp.add_argument("--config", help="flat key-value config file")
    tp.add_argument("--mode", choices=sorted(MODE_OVERRIDES), default=None)
    tp.add_argument("--set", action="append", metavar="KEY=VALUE")
    tp.add_argument("--seed", type=int, default=None)
    tp.add_argument("--deterministic", action="store_true")
    tp.add_argument("--resume", default=None, help="resume from a state.npz")
    tp.set_defaults(func=cmd_train)

    rp = sub.add_parser("render", help="render a checkpoint at arbitrary poses")
    rp.add_argument("--checkpoint", required=True)
    rp.add_argument("--out", required=True)
    rp.add_argument("--poses", help="pose file (ftgs-poses-v1)")
    rp.add_argument("--panorama", action="store_true")
    rp.add_argument("--center", default="0,0,1.6")
    rp.add_argument("--frame", type=int, default=None)
    rp.add_argument("--width", type=int, default=800)
    rp.add_argument("--height", type=int, default=400)
    rp.add_argument("--background", default="0,0,0")
    rp.set_defaults(func=cmd_render)

    ep = sub.add_parser("eval", help="held-out metrics for a checkpoint")
    ep.add_argument("--checkpoint")
    ep.add_argument("--data")
    ep.add_argument("--split", default="test_360",
                    choices=["train", "test_360", "test_vary_t"])
    ep.add_argument("--out", required=True)
    ep.add_argument("--compare", nargs="*", metavar="CSV")
    ep.set_defaults(func=cmd_eval)

    bp = sub.add_parser("ablate", help="train/eval a mode x seed grid")
    bp.add_argument("--data", required=True)
    bp.add_argument("--out", required=True)
    bp.add_argument("--modes", default="ftgs,3dgs")
    bp.add_argument("--seeds", default="0")
    bp.add_argument("--config")
    bp.add_argument("--mode", default=None, help=argparse.SUPPRESS)
    bp.add_argument("--set", action="append", metavar="KEY=VALUE")
    bp.add_argument("--seed", type=int, default=None)
    bp.add_argument("--deterministic", action="store_true")
    bp.set_defaults(func=cmd_ablate)

    dp = sub.add_parser("edit", help="segment a box and translate it")
    dp.add_argument("--checkpoint", required=True)
    dp.add_argument("--out", required=True)
    dp.add_argument("--box", required=True, metavar="cx,cy,cz,hx,hy,hz[,yaw]")
    dp.add_argument("--translate", required=True, metavar="dx,dy,dz")
    dp.set_defaults(func=cmd_edit)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (fio.DataFormatError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (TrainDivergence, DepthAlignError, RenderError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
