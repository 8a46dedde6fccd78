"""Synthetic desk-scale scene generation.

The small demo is an undulating colored sheet of 64 splats viewed from a
ring of 25 cameras (20 train / 5 held out) at 64x64. Ground-truth images
come from this package's own renderer, so recovery experiments have an
exact self-oracle; the COLMAP-text export of the same scene feeds the
ingest/partition/train pipeline end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GaussianField, SH_C0, inverse_sigmoid, sh_coeff_count
from .ingest import CameraView, SceneModel, export_field, save_image, write_colmap_text
from .render import RenderOptions, render
from .train import LossWeights, TrainConfig, config_to_dict


@dataclass
class DemoScene:
    field: GaussianField
    model: SceneModel
    test_image_ids: list
    images: dict  # image_id -> (H, W, 3)


def _sheet_field(rng: np.random.Generator, side: int = 8, half_extent: float = 1.8) -> GaussianField:
    n = side * side
    xs = np.linspace(-half_extent, half_extent, side)
    gx, gy = np.meshgrid(xs, xs)
    gx = gx.ravel()
    gy = gy.ravel()
    gz = 0.35 * np.sin(1.3 * gx) * np.cos(1.1 * gy)
    centers = np.stack([gx, gy, gz], axis=1)

    spacing = xs[1] - xs[0]
    log_scales = np.log(np.stack([
        rng.uniform(0.55, 0.7, n) * spacing,
        rng.uniform(0.55, 0.7, n) * spacing,
        rng.uniform(0.18, 0.25, n) * spacing,
    ], axis=1))

    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    quats[:, 1:] += rng.normal(scale=0.08, size=(n, 3))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)

    opacity = inverse_sigmoid(rng.uniform(0.78, 0.95, n))

    sh = np.zeros((n, sh_coeff_count(2), 3))
    base = np.stack([
        0.5 + 0.38 * np.sin(1.7 * gx + 0.5),
        0.5 + 0.38 * np.cos(1.3 * gy - 0.2),
        0.5 + 0.33 * np.sin(1.1 * (gx + gy)),
    ], axis=1)
    sh[:, 0, :] = (base - 0.5) / SH_C0
    sh[:, 1:, :] = rng.uniform(-0.04, 0.04, size=(n, sh_coeff_count(2) - 1, 3))
    return GaussianField(centers=centers, log_scales=log_scales, quats=quats,
                         opacity_logits=opacity, sh=sh, sh_degree=2, scene_extent=5.0)


def _ring_camera(angle: float, radius: float, height: float, image_id: int,
                 name: str, size: int = 64, focal: float = 70.0) -> CameraView:
    eye = np.array([radius * np.cos(angle), radius * np.sin(angle), height])
    target = np.zeros(3)
    z = target - eye
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    return CameraView(
        image_id=image_id, name=name, width=size, height=size,
        fx=focal, fy=focal, cx=size / 2.0, cy=size / 2.0,
        rotation=rot, translation=-rot @ eye,
    )


def make_demo_scene(seed: int = 0, n_views: int = 25, size: int = 64) -> DemoScene:
    rng = np.random.default_rng(seed)
    field = _sheet_field(rng)
    cameras = []
    for i in range(n_views):
        angle = 2 * np.pi * i / n_views + rng.normal(scale=0.01)
        radius = 5.0 + rng.normal(scale=0.1)
        height = 3.5 + rng.normal(scale=0.15)
        cameras.append(_ring_camera(angle, radius, height, image_id=i + 1,
                                    name=f"view_{i:03d}.png", size=size))

    # camera-sphere radius defines the scene extent used by the trainer
    pos = np.array([c.center for c in cameras])
    centroid = pos.mean(axis=0)
    field.scene_extent = float(np.linalg.norm(pos - centroid, axis=1).max())

    opts = RenderOptions()
    images = {}
    for cam in cameras:
        images[cam.image_id] = np.clip(render(field, cam, opts).color, 0.0, 1.0)
        cam.image = images[cam.image_id]

    # sparse points: the splat centers, tracked by every camera that sees them
    tracks = []
    for center in field.centers:
        seen = []
        for cam in cameras:
            p = cam.world_to_camera(center[None])[0]
            if p[2] <= 0.05:
                continue
            px = cam.fx * p[0] / p[2] + cam.cx
            py = cam.fy * p[1] / p[2] + cam.cy
            if 0 <= px < cam.width and 0 <= py < cam.height:
                seen.append(cam.image_id)
        tracks.append(seen)
    colors = np.clip(field.sh[:, 0, :] * SH_C0 + 0.5, 0.0, 1.0)
    model = SceneModel(
        cameras=cameras, points=field.centers.copy(), point_colors=colors,
        point_errors=np.full(field.n, 0.1), tracks=tracks,
    )
    test_ids = [c.image_id for i, c in enumerate(cameras) if i % 5 == 2]
    return DemoScene(field=field, model=model, test_image_ids=test_ids, images=images)


def demo_train_config() -> TrainConfig:
    """Desk-scale defaults used by the synthetic acceptance runs.

    The depth-distortion weight is reduced from the large-scene default:
    L_d consumes raw world-unit depths, and at this scene scale a weight of
    100 drowns the color term.
    """
    return TrainConfig(iterations=2000,
                       weights=LossWeights(depth_distortion=1.0))


def write_demo_scene(out_dir, scene: DemoScene, config: TrainConfig | None = None) -> None:
    out_dir = Path(out_dir)
    (out_dir / "colmap").mkdir(parents=True, exist_ok=True)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    write_colmap_text(scene.model, out_dir / "colmap")
    for cam in scene.model.cameras:
        save_image(out_dir / "images" / cam.name, scene.images[cam.image_id])
    export_field(scene.field, out_dir / "gt_field.ply")
    split = {"test_image_ids": [int(v) for v in scene.test_image_ids]}
    (out_dir / "split.json").write_text(json.dumps(split, indent=2), encoding="utf-8")
    config = config or demo_train_config()
    (out_dir / "config.json").write_text(
        json.dumps(config_to_dict(config), indent=2), encoding="utf-8")


def perturb_field(field: GaussianField, rng: np.random.Generator,
                  center_jitter: float = 0.05) -> GaussianField:
    """Recovery-experiment initialization: jitter centers by a fraction of
    the scene extent and randomize colors (DC redrawn, rest cleared)."""
    out = field.copy()
    out.centers = out.centers + rng.normal(scale=center_jitter * field.scene_extent,
                                           size=out.centers.shape)
    out.sh = np.zeros_like(out.sh)
    out.sh[:, 0, :] = (rng.uniform(0.2, 0.8, size=(field.n, 3)) - 0.5) / SH_C0
    return out
