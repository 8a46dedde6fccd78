"""Pipeline driver: ingest -> partition -> train -> stitch -> render -> eval
plus synthetic scene generation, as subcommands over the manifest/PLY
interfaces.

Exit codes: 0 success, 1 usage error, 2 pipeline error. All randomness is
controlled by --seed.
"""

from __future__ import annotations

import argparse
import csv
import json
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import metrics
from .core import GaussianField
from .ingest import (
    SceneModel,
    export_field,
    import_field,
    load_images,
    manhattan_align,
    apply_rotation,
    parse_colmap_text,
    save_image,
    write_colmap_text,
)
from .partition import load_layout, partition_scene, save_layout
from .render import RenderOptions, render, save_raw
from .stitch import NovelViewRequest, render_novel_view, stitch_cells
from .train import config_from_dict, config_to_dict, train_cell, TrainConfig
from .synth import demo_train_config, make_demo_scene, write_demo_scene


def load_scene(scene_dir, with_images: bool = True) -> SceneModel:
    scene_dir = Path(scene_dir)
    model = parse_colmap_text(scene_dir / "colmap")
    if with_images:
        load_images(model, scene_dir / "images")
    return model


def read_pose_blocks(path):
    """Pose file: 16 floats of a row-major world-to-camera matrix followed
    by one 'fx fy cx cy W H' line; a trajectory repeats the block."""
    tokens = Path(path).read_text(encoding="utf-8").split()
    requests = []
    block = 22
    if len(tokens) % block != 0 or not tokens:
        raise ValueError(f"{path}: expected blocks of 22 numbers, got {len(tokens)} tokens")
    for off in range(0, len(tokens), block):
        vals = [float(v) for v in tokens[off:off + 16]]
        mat = np.array(vals).reshape(4, 4)
        fx, fy, cx, cy = (float(v) for v in tokens[off + 16:off + 20])
        width, height = int(float(tokens[off + 20])), int(float(tokens[off + 21]))
        requests.append(NovelViewRequest(
            rotation=mat[:3, :3], translation=mat[:3, 3],
            fx=fx, fy=fy, cx=cx, cy=cy, width=width, height=height))
    return requests


def write_pose_file(path, request: NovelViewRequest) -> None:
    mat = np.eye(4)
    mat[:3, :3] = request.rotation
    mat[:3, 3] = request.translation
    lines = [" ".join(repr(float(v)) for v in row) for row in mat]
    lines.append(f"{request.fx!r} {request.fy!r} {request.cx!r} {request.cy!r} "
                 f"{request.width} {request.height}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def default_test_ids(model: SceneModel):
    """Default split: every 8th image (by position) goes to the test set."""
    ids = [c.image_id for c in model.cameras]
    return set(ids[::8])


def _load_split(split_path, model: SceneModel):
    if split_path is None:
        return default_test_ids(model)
    data = json.loads(Path(split_path).read_text(encoding="utf-8"))
    return set(data["test_image_ids"])


def cmd_synth(args) -> int:
    if args.demo != "small":
        raise ValueError(f"unknown demo variant {args.demo!r}")
    scene = make_demo_scene(seed=args.seed)
    write_demo_scene(args.out, scene)
    print(f"wrote demo scene ({scene.field.n} splats, {len(scene.model.cameras)} views) to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    model = parse_colmap_text(args.colmap)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    align_meta = {"mode": args.manhattan}
    if args.manhattan == "auto":
        rot, model = manhattan_align(model, seed=args.seed)
        align_meta["rotation"] = rot.tolist()
    elif args.manhattan == "off":
        pass
    else:
        rot = np.loadtxt(args.manhattan).reshape(3, 3)
        model = apply_rotation(model, rot)
        align_meta["rotation"] = rot.tolist()
    write_colmap_text(model, out / "colmap")
    (out / "align.json").write_text(json.dumps(align_meta, indent=2), encoding="utf-8")
    images_out = out / "images"
    images_out.mkdir(exist_ok=True)
    for cam in model.cameras:
        src = Path(args.images) / cam.name
        dst = images_out / cam.name
        if not dst.exists():
            shutil.copyfile(src, dst)
    print(f"ingested {len(model.cameras)} views, {model.points.shape[0]} points to {out}")
    return 0


def cmd_partition(args) -> int:
    model = load_scene(args.scene, with_images=False)
    layout = partition_scene(model, args.nx, args.ny, beta=args.beta,
                             vis_threshold=args.vis_threshold, vis_mode=args.vis_mode)
    save_layout(layout, args.out)
    for cell in layout.cells:
        print(f"cell {cell.index}: {len(cell.cameras_selected)} cameras, "
              f"{len(np.asarray(cell.points_final))} points")
    return 0


def _train_one_cell(scene_dir, cells_dir, cell_id, config_dict, seed, use_appearance):
    from .partition import load_manifest

    model = load_scene(scene_dir)
    manifest = load_manifest(Path(cells_dir) / "cells" / f"cell_{cell_id}" / "manifest")
    config = config_from_dict(config_dict)
    rng = np.random.default_rng(seed + 1000 * cell_id)
    out_dir = Path(cells_dir) / "cells" / f"cell_{cell_id}"
    result = train_cell(manifest, model, config, rng, out_dir=out_dir,
                        use_appearance=use_appearance)
    return cell_id, result.field.n


def cmd_train(args) -> int:
    if args.config:
        config_dict = json.loads(Path(args.config).read_text(encoding="utf-8"))
    else:
        config_dict = config_to_dict(demo_train_config())
    layout = load_layout(args.cells)
    cell_ids = list(range(layout.n_cells)) if args.all else [args.cell]
    if cell_ids == [None]:
        raise ValueError("pass --cell ID or --all")
    use_appearance = not args.no_appearance
    if args.jobs > 1 and len(cell_ids) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            futures = [pool.submit(_train_one_cell, args.scene, args.cells, cid,
                                   config_dict, args.seed, use_appearance)
                       for cid in cell_ids]
            for fut in futures:
                cid, n = fut.result()
                print(f"cell {cid}: trained field with {n} splats")
    else:
        for cid in cell_ids:
            cid, n = _train_one_cell(args.scene, args.cells, cid, config_dict,
                                     args.seed, use_appearance)
            print(f"cell {cid}: trained field with {n} splats")
    return 0


def cmd_stitch(args) -> int:
    layout = load_layout(args.layout or args.cells)
    merged = stitch_cells(Path(args.cells) / "cells", layout)
    export_field(merged, args.out)
    print(f"merged {merged.n} splats -> {args.out}")
    return 0


def cmd_render(args) -> int:
    field = import_field(args.field)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    requests = read_pose_blocks(args.pose or args.traj)
    opts = RenderOptions(background=tuple(args.background))
    for i, request in enumerate(requests):
        result = render_novel_view(field, request, opts)
        stem = f"frame_{i:04d}"
        save_image(out_dir / f"{stem}.png", result.color)
        if args.raw:
            save_raw(out_dir / f"{stem}_color.raw", result.color)
            save_raw(out_dir / f"{stem}_depth.raw", result.depth)
            save_raw(out_dir / f"{stem}_normal.raw", result.normal)
    print(f"rendered {len(requests)} frame(s) to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    field = import_field(args.field)
    model = load_scene(args.scene)
    test_ids = _load_split(args.split, model)
    rows = []
    for cam in model.cameras:
        if cam.image_id not in test_ids:
            continue
        out = render(field, cam)
        img = np.clip(out.color, 0.0, 1.0)
        rows.append((cam.name, metrics.psnr(img, cam.image), metrics.ssim(img, cam.image)))
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["view", "PSNR", "SSIM"])
        writer.writerows(rows)
    if rows:
        mean_psnr = float(np.mean([r[1] for r in rows]))
        mean_ssim = float(np.mean([r[2] for r in rows]))
        print(f"eval: {len(rows)} views, mean PSNR {mean_psnr:.2f} dB, mean SSIM {mean_ssim:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cellsplat",
                                     description="divide-and-conquer Gaussian splatting pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic demo scene")
    p.add_argument("--demo", default="small")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="parse a COLMAP model and align it")
    p.add_argument("--colmap", required=True)
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--manhattan", default="auto",
                   help="auto | off | path to a 3x3 rotation matrix file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("partition", help="split the scene into cells")
    p.add_argument("--scene", required=True)
    p.add_argument("--nx", type=int, default=2)
    p.add_argument("--ny", type=int, default=2)
    p.add_argument("--beta", type=float, default=0.2)
    p.add_argument("--vis-threshold", type=float, default=0.25)
    p.add_argument("--vis-mode", choices=("positive", "all"), default="positive")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train", help="train one cell or all cells")
    p.add_argument("--cell", type=int, default=None)
    p.add_argument("--all", action="store_true")
    p.add_argument("--scene", required=True)
    p.add_argument("--cells", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-appearance", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("stitch", help="crop and merge trained cells")
    p.add_argument("--cells", required=True)
    p.add_argument("--layout", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("render", help="render poses from a field")
    p.add_argument("--field", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pose")
    group.add_argument("--traj")
    p.add_argument("--out", required=True)
    p.add_argument("--raw", action="store_true")
    p.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="PSNR/SSIM against a scene's test split")
    p.add_argument("--field", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--split", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except Exception as exc:  # pipeline error
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
