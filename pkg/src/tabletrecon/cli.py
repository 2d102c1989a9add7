"""Command-line entry point: ``tabletrecon {reconstruct,render,edit,eval,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import TabletError
from .io import (
    export_planes,
    load_planes,
    load_scene,
    read_cameras,
    read_image,
    read_ply,
    write_cameras,
    write_image,
    write_ply,
    write_scene,
)
from .metrics import evaluate, write_metrics
from .pipeline import edit_plane_texture, load_config, reconstruct, render_planes
from .synth import PRESETS

CAMERAS = "cameras.json"
GT_POINTS = "gt/points.ply"


def render_image(planes, view, layers: int) -> np.ndarray:
    return render_planes(planes, view, layers).color.cpu().numpy()


def _render_all(planes, views, out_dir: Path, layers: int) -> None:
    (out_dir / "renders").mkdir(parents=True, exist_ok=True)
    for k, view in enumerate(views):
        write_image(out_dir / "renders" / f"view_{k:04d}.png", render_image(planes, view, layers))


def cmd_reconstruct(args) -> int:
    overrides = {"seed": args.seed} if args.seed is not None else None
    schedule, merge_cfg, weights = load_config(args.config, overrides)
    views, _ = load_scene(args.scene_dir)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    planes = reconstruct(
        views, schedule, merge_cfg, weights, loss_log=out / "loss.csv", merge_log=out / "merges.csv"
    )
    export_planes(planes, out)
    write_cameras(out / CAMERAS, views)
    (out / "config.json").write_text(json.dumps({"layers": schedule.layers, "seed": schedule.seed}))
    _render_all(planes, views, out, schedule.layers)
    print(f"{len(planes)} planes written to {out}")
    return 0


def _layers(out_dir: Path) -> int:
    cfg = out_dir / "config.json"
    return int(json.loads(cfg.read_text()).get("layers", 13)) if cfg.is_file() else 13


def cmd_render(args) -> int:
    out_dir = Path(args.out_dir)
    views = read_cameras(out_dir / CAMERAS)
    if not 0 <= args.view < len(views):
        raise IndexError(f"view {args.view} out of range (0..{len(views) - 1})")
    planes = load_planes(out_dir)
    write_image(args.output, render_image(planes, views[args.view], _layers(out_dir)))
    return 0


def cmd_edit(args) -> int:
    out_dir = Path(args.out_dir)
    planes = load_planes(out_dir)
    if args.texture:
        idx = planes.index_of(args.plane)
        shape = planes.tablets[idx].texture.shape
        img = read_image(args.texture)
        resized = Image.fromarray(np.uint8(np.rint(img * 255))).resize((shape[1], shape[0]), Image.BILINEAR)
        edited = edit_plane_texture(planes, args.plane, texture=np.asarray(resized, dtype=np.float64) / 255.0)
    else:
        tint = [float(x) for x in args.tint.split(",")]
        if len(tint) != 3:
            raise ValueError("--tint expects r,g,b")
        edited = edit_plane_texture(planes, args.plane, tint=tint)
    target = Path(args.output) if args.output else out_dir
    export_planes(edited, target)
    if target != out_dir and (out_dir / CAMERAS).is_file():
        (target / CAMERAS).write_text((out_dir / CAMERAS).read_text())
        if (out_dir / "config.json").is_file():
            (target / "config.json").write_text((out_dir / "config.json").read_text())
    print(f"plane {args.plane} edited in {target}")
    return 0


def cmd_eval(args) -> int:
    planes = load_planes(Path(args.out_dir))
    gt = Path(args.gt)
    pts, labels = read_ply(gt / GT_POINTS if (gt / GT_POINTS).is_file() else gt / "points.ply")
    metrics = evaluate(planes, pts, labels, args.tau)
    text = json.dumps(metrics, indent=2, sort_keys=True)
    if args.output:
        write_metrics(metrics, args.output)
    print(text)
    return 0


def cmd_synth(args) -> int:
    scene = PRESETS[args.preset](seed=args.seed)
    out = Path(args.output or f"{args.preset}_scene")
    write_scene(out, scene.views)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    write_ply(out / GT_POINTS, scene.points, scene.point_labels)
    planes = [
        {"label": p.label, "normal": p.normal.tolist(), "offset": p.offset, "color": p.color.tolist()}
        for p in scene.planes
    ]
    (out / "gt" / "planes.json").write_text(json.dumps({"scale": scene.scale, "planes": planes}, indent=1))
    for k, lab in enumerate(scene.labels):
        np.save(out / "gt" / f"labels_{k:04d}.npy", lab)
    print(f"{args.preset} scene with {len(scene.views)} views written to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabletrecon", description="Planar scene reconstruction with textured tablets.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("reconstruct", help="reconstruct planes from a scene directory")
    r.add_argument("scene_dir")
    r.add_argument("-o", "--output", required=True)
    r.add_argument("--config")
    r.add_argument("--seed", type=int)
    r.set_defaults(func=cmd_reconstruct)

    r = sub.add_parser("render", help="render a reconstruction from one of its cameras")
    r.add_argument("out_dir")
    r.add_argument("--view", type=int, required=True)
    r.add_argument("-o", "--output", required=True)
    r.set_defaults(func=cmd_render)

    r = sub.add_parser("edit", help="replace or tint one plane's texture")
    r.add_argument("out_dir")
    r.add_argument("--plane", type=int, required=True)
    g = r.add_mutually_exclusive_group(required=True)
    g.add_argument("--texture")
    g.add_argument("--tint")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_edit)

    r = sub.add_parser("eval", help="score a reconstruction against ground truth")
    r.add_argument("out_dir")
    r.add_argument("--gt", required=True)
    r.add_argument("--tau", type=float, default=0.05)
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_eval)

    r = sub.add_parser("synth", help="generate a synthetic scene with ground truth")
    r.add_argument("preset", choices=sorted(PRESETS))
    r.add_argument("-o", "--output")
    r.add_argument("--seed", type=int, default=0)
    r.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (TabletError, OSError, ValueError, IndexError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
