"""Command-line entry point: ``mmsplat <command> [options]``.

Errors are reported on stderr as one JSON object ``{"error": ..., "message": ...}``
with a nonzero exit status.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Camera, TrainConfig
from .dataio import (
    FormatError,
    load_dataset,
    load_scene,
    save_dataset,
    save_points,
    save_scene,
    write_heatmap,
    write_pfm,
    write_png,
)
from .importance import PriorInputs, ablated_weights, compute_scores
from .renderer import render
from .sampler import back_project, build_distribution, draw_pixels
from .synthetic import evaluate, init_from_depth, make_synthetic
from .trainer import AblationFlags, TrainingAborted, train

log = logging.getLogger("mmsplat")

EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_ABORTED = 3

FLAG_NAMES = tuple(f.name for f in dataclasses.fields(AblationFlags))


class CLIError(Exception):
    pass


# ---------------------------------------------------------------- config

def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _parse_floats(text: str) -> tuple:
    try:
        return tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _config_type(default):
    if isinstance(default, bool):
        return _parse_bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    return _parse_floats


def add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML or JSON file with TrainConfig fields")
    g = p.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, type=_config_type(f.default),
                       default=None, metavar=f.name.upper(), help=f"default {f.default!r}")


def read_config_file(path: Path) -> dict:
    if not path.exists():
        raise FileNotFoundError(f"config {path} not found")
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    return json.loads(path.read_text())


def build_config(args) -> TrainConfig:
    d = read_config_file(args.config) if getattr(args, "config", None) else {}
    for f in dataclasses.fields(TrainConfig):
        v = getattr(args, "cfg_" + f.name, None)
        if v is not None:
            d[f.name] = v
    return TrainConfig.from_dict(d)


def add_flag_args(p: argparse.ArgumentParser) -> None:
    for name in FLAG_NAMES:
        p.add_argument("--no-" + name.replace("_", "-"), dest="off_" + name, action="store_true",
                       help=f"disable the {name} component")


def build_flags(args) -> AblationFlags:
    return AblationFlags(**{n: not getattr(args, "off_" + n) for n in FLAG_NAMES})


def parse_flag_spec(spec: str) -> AblationFlags:
    """``full``, ``baseline`` or a ``+``-joined list of components to switch off, e.g. ``pm+ra``."""
    spec = spec.strip()
    if spec == "full":
        return AblationFlags.full()
    if spec == "baseline":
        return AblationFlags.baseline()
    off = [s.strip() for s in spec.split("+") if s.strip()]
    bad = [s for s in off if s not in FLAG_NAMES]
    if bad:
        raise CLIError(f"unknown ablation component(s) {bad}; expected some of {list(FLAG_NAMES)}")
    return AblationFlags(**{n: n not in off for n in FLAG_NAMES})


# ---------------------------------------------------------------- helpers

def _view_index(ds, name: Optional[str]) -> int:
    if name is None:
        return (ds.test or ds.train)[0]
    try:
        return ds.index(name)
    except KeyError:
        raise CLIError(f"no view named {name!r}; available: {[v.name for v in ds.views]}") from None


def _camera_from_json(path: Path) -> Camera:
    e = json.loads(path.read_text())
    intr = e["intrinsics"]
    cam = Camera.from_intrinsics(intr["fx"], intr["fy"], intr["cx"], intr["cy"], e["width"], e["height"],
                                 R=np.asarray(e["R"], dtype=np.float64).reshape(3, 3),
                                 t=np.asarray(e["t"], dtype=np.float64).reshape(3))
    cam.validate()
    return cam


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    ds, gt = make_synthetic(args.seed, args.n_gaussians, args.n_views, args.resolution,
                            n_clusters=args.n_clusters, test_every=args.test_every)
    out = Path(args.out)
    manifest = save_dataset(ds, out)
    save_scene(gt, out / "ground_truth.ply")
    save_scene(init_from_depth(ds.train_views, stride=args.init_stride), out / "coarse_init.ply")
    _emit({"manifest": str(manifest), "train": ds.train, "test": ds.test})
    return 0


def cmd_init(args) -> int:
    if args.points is not None:
        scene = load_scene(args.points)
        if scene.n_fine:
            log.warning("input holds %d fine Gaussians; keeping them", scene.n_fine)
    elif args.manifest is not None:
        ds = load_dataset(args.manifest)
        scene = init_from_depth(ds.train_views, stride=args.stride)
    else:
        raise CLIError("init needs --points or --manifest")
    save_scene(scene, args.out)
    _emit({"out": str(args.out), "M_c": scene.n_coarse, "M_f": scene.n_fine})
    return 0


def cmd_train(args) -> int:
    config = build_config(args)
    ds = load_dataset(args.manifest)
    scene = load_scene(args.init) if args.init else init_from_depth(ds.train_views, stride=args.stride)
    flags = build_flags(args)
    snap = Path(args.out).parent / "snapshots"
    res = train(scene, ds.train_views, config=config, flags=flags, seed=args.seed, snapshot_dir=snap)
    save_scene(res.scene, args.out)
    if args.log:
        res.write_log(args.log)
    report = {"out": str(args.out), "M_c": res.scene.n_coarse, "M_f": res.scene.n_fine,
              "sample_rounds": len(res.sample_rounds), "final_loss": res.log[-1]["loss"]}
    if ds.test:
        m = evaluate(res.scene, ds)
        report.update(test_psnr=m.psnr, test_ssim=m.ssim)
    _emit(report)
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    background = None
    if args.camera is not None:
        cam = _camera_from_json(args.camera)
    elif args.manifest is not None:
        ds = load_dataset(args.manifest)
        cam = ds.views[_view_index(ds, args.view)].camera
        background = ds.background
    else:
        raise CLIError("render needs --camera or --manifest")
    out = render(scene, cam, background=background)
    write_png(args.out, out.image)
    if args.depth_out:
        write_pfm(args.depth_out, out.depth_map)
    _emit({"out": str(args.out), "width": cam.width, "height": cam.height})
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(args.manifest)
    scene = load_scene(args.scene)
    views = None
    if args.views:
        views = [_view_index(ds, n) for n in args.views]
    m = evaluate(scene, ds, views=views)
    _emit({"psnr": m.psnr, "ssim": m.ssim, "per_view": m.per_view})
    return 0


def cmd_importance(args) -> int:
    config = build_config(args)
    flags = build_flags(args).effective()
    ds = load_dataset(args.manifest)
    scene = load_scene(args.scene)
    i = _view_index(ds, args.view)
    view = ds.views[i]
    out = render(scene, view.camera, background=ds.background)
    w = ablated_weights(config.w, flags.s_rend, flags.s_sem, flags.s_geo)
    maps = compute_scores(view.image, out.image, PriorInputs(view.depth, view.labels), w, config.lambda_curv,
                          tau_percentile=config.tau_geometry_percentile, r_boundary=config.r_boundary,
                          base_bg=config.base_bg, use_reliability=flags.ra)
    od = Path(args.out_dir)
    od.mkdir(parents=True, exist_ok=True)
    for name, grid in maps.items():
        write_heatmap(od / f"{name}.png", grid)
        write_pfm(od / f"{name}.pfm", grid)
    report = {"view": view.name, "out_dir": str(od)}
    if args.dump_samples:
        dist = build_distribution(maps.s_importance, maps.m_reliable)
        report["support"] = dist.support_size
        pixels = draw_pixels(dist, args.dump_samples, args.seed) if dist.support_size else []
        depth = out.depth_map.plane
        valid = out.depth_valid.reshape(out.depth_map.plane.shape)
        kept = [p for p in pixels if valid[p[1], p[0]]]
        pts = np.array([back_project(p, depth[p[1], p[0]], view.camera) for p in kept]).reshape(-1, 3)
        cols = np.array([view.image.data[p[1], p[0], :3] for p in kept]).reshape(-1, 3)
        save_points(od / "samples.ply", pts, cols)
        with open(od / "samples.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["u", "v", "depth_valid"])
            for u, v in pixels:
                wr.writerow([u, v, int(valid[v, u])])
        report.update(drawn=len(pixels), spawn_positions=len(kept))
    _emit(report)
    return 0


def cmd_ablate(args) -> int:
    config = build_config(args)
    ds = load_dataset(args.manifest)
    scene = load_scene(args.init) if args.init else init_from_depth(ds.train_views, stride=args.stride)
    if not ds.test:
        raise CLIError("ablate needs a non-empty test split")
    specs = args.matrix or ["full", "hier", "s_rend", "s_sem", "s_geo", "ra", "agp", "pm"]
    rows = []
    for spec in specs:
        flags = parse_flag_spec(spec)
        for seed in args.seeds:
            res = train(scene, ds.train_views, config=config, flags=flags, seed=seed)
            m = evaluate(res.scene, ds)
            row = {"config": spec, "seed": seed, **{n: int(getattr(flags, n)) for n in FLAG_NAMES},
                   "psnr": m.psnr, "ssim": m.ssim, "M_f": res.scene.n_fine}
            rows.append(row)
            log.info("%s seed=%d psnr=%.3f", spec, seed, m.psnr)
    with open(args.out, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)
    _emit({"out": str(args.out), "runs": len(rows)})
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmsplat", description="Hierarchical Gaussian splatting with importance sampling.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic dataset, its ground truth and a coarse init")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--n-gaussians", type=int, default=40)
    s.add_argument("--n-views", type=int, default=4)
    s.add_argument("--resolution", type=int, default=96)
    s.add_argument("--n-clusters", type=int, default=4)
    s.add_argument("--test-every", type=int, default=4)
    s.add_argument("--init-stride", type=int, default=16)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("init", help="point cloud or depth priors -> coarse scene PLY")
    s.add_argument("--points", type=Path, help="PLY with x,y,z[,r,g,b] or a full scene")
    s.add_argument("--manifest", type=Path, help="back-project train-view depth priors instead")
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--out", required=True, type=Path)
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("train", help="run the three training phases")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--init", type=Path, help="coarse scene PLY (default: depth back-projection)")
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--log", type=Path, help="metrics CSV path")
    s.add_argument("--seed", type=int, default=0)
    add_config_args(s)
    add_flag_args(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a scene to PNG")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--camera", type=Path, help="camera JSON with intrinsics, width, height, R, t")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--view", help="view name in the manifest (default: first test view)")
    s.add_argument("--out", required=True, type=Path)
    s.add_argument("--depth-out", type=Path, help="also write expected depth as PFM")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR and SSIM on the test split")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--views", nargs="*", help="view names (default: test split)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("importance", help="dump score maps, heatmaps and sampled positions for one view")
    s.add_argument("--scene", required=True, type=Path)
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--view")
    s.add_argument("--out-dir", required=True, type=Path)
    s.add_argument("--dump-samples", type=int, default=0, metavar="N", help="draw N pixels and back-project them")
    s.add_argument("--seed", type=int, default=0)
    add_config_args(s)
    add_flag_args(s)
    s.set_defaults(func=cmd_importance)

    s = sub.add_parser("ablate", help="train a flag matrix and write a CSV of test metrics")
    s.add_argument("--manifest", required=True, type=Path)
    s.add_argument("--init", type=Path)
    s.add_argument("--stride", type=int, default=16)
    s.add_argument("--matrix", nargs="*", help="entries like full, baseline, pm, pm+ra (components switched off)")
    s.add_argument("--seeds", nargs="+", type=int, default=[0])
    s.add_argument("--out", required=True, type=Path)
    add_config_args(s)
    s.set_defaults(func=cmd_ablate)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message}) + "\n")
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as e:
        msg = str(e) + (f"; snapshot at {e.snapshot}" if e.snapshot else "")
        return _fail("TrainingAborted", msg, EXIT_ABORTED)
    except CLIError as e:
        return _fail("UsageError", str(e), EXIT_USAGE)
    except (FileNotFoundError, FormatError, ValueError, KeyError, json.JSONDecodeError) as e:
        return _fail(type(e).__name__, str(e), EXIT_ERROR)


if __name__ == "__main__":
    sys.exit(main())
