"""Command-line interface: ``npbg <command> ...``.

Every command writes ``config.json`` (the resolved arguments) into its
output directory. Failures print one JSON line ``{"error": ..., "message": ...}``
to stderr and exit with status 1 (2 for usage errors).
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from . import fitting as ft
from . import rendernet as rn
from .estimator import evaluate_views
from .geometry import RigidTransform, read_cameras, voxel_downsample
from .raster import DescriptorSet, load_descriptors, save_descriptors
from .sceneio import (PRESETS, SceneDataset, SynthSpec, compose_scenes, generate_synthetic, load_scene,
                      orbit_cameras, save_scene, write_png)

logger = logging.getLogger("npbg")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# argument groups ------------------------------------------------------------------

def _add_fit_flags(p: argparse.ArgumentParser) -> None:
    d = ft.FitConfig()
    g = p.add_argument_group("optimisation")
    g.add_argument("--lr-net", type=float, default=d.lr_net)
    g.add_argument("--lr-desc", type=float, default=d.lr_desc)
    g.add_argument("--beta1", type=float, default=d.beta1)
    g.add_argument("--beta2", type=float, default=d.beta2)
    g.add_argument("--eps", type=float, default=d.eps)
    g.add_argument("--steps", type=int, default=d.steps)
    g.add_argument("--crop", type=int, default=d.crop)
    g.add_argument("--zoom-range", type=float, nargs=2, default=list(d.zoom_range), metavar=("LO", "HI"))
    g.add_argument("--loss-kind", choices=ft.LOSS_KINDS, default=d.loss_kind)
    g.add_argument("--point-features", choices=ft.POINT_FEATURES, default=d.point_features)
    g.add_argument("--checkpoint-every", type=int, default=0,
                   help="also write checkpoints every N steps (0 disables)")


def _add_net_flags(p: argparse.ArgumentParser) -> None:
    d = rn.RenderNetConfig()
    g = p.add_argument_group("network")
    g.add_argument("--levels", type=int, default=d.levels)
    g.add_argument("--in-channels", type=int, default=None,
                   help="descriptor size M (default 8, or 3 with --point-features colors)")
    g.add_argument("--base-channels", type=int, default=d.base_channels)
    g.add_argument("--pyramid-levels", type=int, default=d.pyramid_levels)
    g.add_argument("--output-channels", type=int, default=d.output_channels)
    g.add_argument("--max-channels", type=int, default=d.max_channels)


def _fit_config(args) -> ft.FitConfig:
    return ft.FitConfig(**{f.name: getattr(args, f.name) for f in fields(ft.FitConfig)})


def _net_config(args) -> rn.RenderNetConfig:
    m = args.in_channels
    if m is None:
        m = 3 if args.point_features == "colors" else rn.RenderNetConfig().in_channels
    kw = {f.name: getattr(args, f.name) for f in fields(rn.RenderNetConfig) if f.name != "in_channels"}
    return rn.RenderNetConfig(in_channels=m, **kw)


def _write_config(out: Path, args, **resolved) -> None:
    record = {"version": __version__, "command": args.command,
              "args": {k: v for k, v in vars(args).items() if k != "func"}}
    for key, value in resolved.items():
        record[key] = asdict(value) if hasattr(value, "__dataclass_fields__") else value
    (out / "config.json").write_text(json.dumps(record, indent=1, default=str))


def _out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_table(scene: SceneDataset, params: rn.RenderNetParams, features: str, desc_path: str | None):
    """Per-point input features for rendering a scene."""
    if features == "colors":
        if scene.cloud.colors is None:
            raise ValueError("point_features=colors needs a colored point cloud")
        table = scene.cloud.colors.astype(np.float32)
    else:
        desc = load_descriptors(desc_path) if desc_path else scene.desc
        if desc is None:
            logger.warning("scene has no descriptors; rendering with zero descriptors")
            desc = DescriptorSet.zeros(len(scene.cloud), params.config.in_channels)
        table = desc.values
    if table.shape != (len(scene.cloud), params.config.in_channels):
        raise ValueError(f"point features are {table.shape}, network expects "
                         f"{len(scene.cloud)}x{params.config.in_channels}")
    return table


# commands --------------------------------------------------------------------------

def cmd_synth(args) -> dict:
    spec = SynthSpec(preset=args.preset, n_points=args.n_points, views=args.views,
                     holdout_every=args.holdout_every, radius=args.radius, width=args.width,
                     height=args.height, density=args.density, supersample=args.supersample,
                     noise_frequency=args.noise_frequency)
    out = _out_dir(args.out)
    synth = generate_synthetic(spec, args.seed)
    save_scene(out, synth.dataset)
    _write_config(out, args, synth_spec=spec)
    return {"points": len(synth.dataset.cloud), "views": len(synth.dataset.views)}


def _run_fit(args, scenes, params, out: Path) -> dict:
    config = _fit_config(args)
    steps_csv = out / "loss.csv"

    def snapshot(tag: str, result: ft.FitResult) -> None:
        target = out if not tag else _out_dir(str(out / "checkpoints" / tag))
        rn.save(target / "net.ckpt", result.params)
        if config.point_features == "descriptors":
            for k, desc in enumerate(result.descriptors):
                save_descriptors(target / f"descriptors_{k}.npbd", desc)

    def callback(step, loss, result):
        if args.checkpoint_every and (step + 1) % args.checkpoint_every == 0:
            snapshot(f"step_{step + 1:06d}", result)

    result = ft.fit(scenes, params, config, callback=callback)
    snapshot("", result)
    with steps_csv.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss"])
        w.writerows((i, repr(v)) for i, v in enumerate(result.history))
    _write_config(out, args, fit_config=config, net_config=params.config)
    hist = result.history
    return {"steps": len(hist), "initial_loss": hist[0] if hist else None,
            "final_loss": hist[-1] if hist else None, "parameters": params.count()}


def cmd_fit(args) -> dict:
    scenes = [load_scene(s) for s in args.scenes]
    out = _out_dir(args.out)
    params = rn.load(args.init) if args.init else rn.build(_net_config(args), seed=args.seed)
    return _run_fit(args, scenes, params, out)


def cmd_finetune(args) -> dict:
    scene = load_scene(args.scene)
    out = _out_dir(args.out)
    return _run_fit(args, [scene], rn.load(args.checkpoint), out)


def _parse_orbit(text: str) -> dict:
    keys = ("cx", "cy", "cz", "radius", "elevation", "frames")
    parts = text.split(",")
    if len(parts) != len(keys):
        raise UsageError(f"--orbit expects {','.join(keys)}, got {text!r}")
    vals = dict(zip(keys, (float(p) for p in parts)))
    if vals["frames"] < 1 or vals["frames"] != int(vals["frames"]):
        raise UsageError("--orbit frame count must be a positive integer")
    return vals


def cmd_render(args) -> dict:
    params = rn.load(args.checkpoint)
    scene = load_scene(args.scene)
    table = _scene_table(scene, params, args.point_features, args.descriptors)
    if args.cameras and args.orbit:
        raise UsageError("pass either --cameras or --orbit, not both")
    if args.cameras:
        cams = [c for _, c in read_cameras(args.cameras)]
    elif args.orbit:
        o = _parse_orbit(args.orbit)
        ref = scene.views[0].camera if scene.views else None
        width = args.width or (ref.width if ref else 128)
        height = args.height or (ref.height if ref else 128)
        cams = orbit_cameras(int(o["frames"]), o["radius"], width, height, focal=args.focal,
                             center=(o["cx"], o["cy"], o["cz"]), elevations=(o["elevation"],))
    else:
        cams = [v.camera for v in scene.views]
    out = _out_dir(args.out)
    for i, cam in enumerate(cams):
        write_png(out / f"frame_{i:04d}.png", rn.render_view(params, scene.cloud, table, cam, aa=args.aa))
    _write_config(out, args, net_config=params.config)
    return {"frames": len(cams)}


def cmd_eval(args) -> dict:
    params = rn.load(args.checkpoint)
    scene = load_scene(args.scene)
    table = _scene_table(scene, params, args.point_features, args.descriptors)
    indices = scene.holdout_indices if args.split == "holdout" else scene.train_indices
    report = evaluate_views(params, scene, table, indices, aa=args.aa)
    out = _out_dir(args.out)
    (out / "eval.json").write_text(json.dumps(report, indent=1))
    _write_config(out, args, net_config=params.config)
    return report["aggregate"]


def cmd_compose(args) -> dict:
    a, b = load_scene(args.scene_a), load_scene(args.scene_b)
    if args.descriptors_a:
        a.desc = load_descriptors(args.descriptors_a)
    if args.descriptors_b:
        b.desc = load_descriptors(args.descriptors_b)
    try:
        tf = RigidTransform.from_dict(json.loads(Path(args.transform).read_text()))
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ValueError(f"malformed transform JSON {args.transform}: {exc}") from exc
    composed = compose_scenes(a, b, tf)
    out = _out_dir(args.out)
    save_scene(out, composed)
    _write_config(out, args, transform=tf.to_dict())
    return {"points": len(composed.cloud)}


def cmd_downsample(args) -> dict:
    scene = load_scene(args.scene)
    cloud = voxel_downsample(scene.cloud, args.voxel)
    # fitted descriptors belong to the old points; the new cloud starts from zero
    desc = DescriptorSet.zeros(len(cloud), scene.desc.m) if scene.desc is not None else None
    out = _out_dir(args.out)
    save_scene(out, SceneDataset(cloud, scene.views, scene.split, desc))
    _write_config(out, args)
    return {"points_in": len(scene.cloud), "points_out": len(cloud)}


# parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="npbg", description="Neural point-based rendering on the CPU.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene with oracle ground truth")
    d = SynthSpec()
    p.add_argument("--preset", choices=PRESETS, default=d.preset)
    p.add_argument("--n-points", type=int, default=d.n_points)
    p.add_argument("--views", type=int, default=d.views)
    p.add_argument("--holdout-every", type=int, default=d.holdout_every)
    p.add_argument("--radius", type=float, default=d.radius)
    p.add_argument("--width", type=int, default=d.width)
    p.add_argument("--height", type=int, default=d.height)
    p.add_argument("--density", type=int, default=d.density)
    p.add_argument("--supersample", type=int, default=d.supersample)
    p.add_argument("--noise-frequency", type=float, default=d.noise_frequency)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("fit", help="fit the network and descriptors to one or more scenes")
    p.add_argument("scenes", nargs="+")
    p.add_argument("--init", help="start from this network checkpoint instead of a fresh one")
    p.add_argument("--seed", type=int, default=0, help="seeds the initial weights and the batch sampler")
    _add_fit_flags(p)
    _add_net_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("finetune", help="fit fresh descriptors and a pretrained network to a new scene")
    p.add_argument("checkpoint")
    p.add_argument("scene")
    p.add_argument("--seed", type=int, default=0)
    _add_fit_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    for name, func, helptext in (("render", cmd_render, "render views to PNG"),
                                 ("eval", cmd_eval, "PSNR/L1 report on a split")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("checkpoint")
        p.add_argument("scene")
        p.add_argument("--descriptors", help="NPBD file (default: the scene's descriptors.npbd, else zeros)")
        p.add_argument("--point-features", choices=ft.POINT_FEATURES, default="descriptors")
        p.add_argument("--aa", type=int, choices=(1, 2, 4), default=1)
        p.add_argument("--out", required=True)
        p.set_defaults(func=func)
        if name == "render":
            p.add_argument("--cameras", help="camera JSON (one object or a scene camera list)")
            p.add_argument("--orbit", help="turntable spec cx,cy,cz,radius,elevation_deg,frames")
            p.add_argument("--width", type=int)
            p.add_argument("--height", type=int)
            p.add_argument("--focal", type=float)
        else:
            p.add_argument("--split", choices=("holdout", "train"), default="holdout")

    p = sub.add_parser("compose", help="merge scene B into scene A under a rigid transform")
    p.add_argument("scene_a")
    p.add_argument("scene_b")
    p.add_argument("transform", help='JSON {"R": [9 row-major], "t": [3]}')
    p.add_argument("--descriptors-a")
    p.add_argument("--descriptors-b")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    p = sub.add_parser("downsample", help="voxel-downsample a scene's point cloud")
    p.add_argument("scene")
    p.add_argument("--voxel", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_downsample)
    return parser


def _fail(exc: BaseException, code: int) -> int:
    message = " ".join(str(exc).split())
    print(json.dumps({"error": type(exc).__name__, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        return _fail(exc, 2)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        summary = args.func(args)
    except UsageError as exc:
        return _fail(exc, 2)
    except (ValueError, OSError, FloatingPointError, KeyError) as exc:
        return _fail(exc, 1)
    print(json.dumps({"command": args.command, **summary}, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
