"""Crop trained cells to their original bounds, merge into one field, and
serve novel-view rendering.

Cropping tests splat centers only; shared internal boundaries are
low-inclusive / high-exclusive so adjacent crops can never both keep a
splat, and the outermost edges of the layout stay inclusive so nothing on
the scene boundary is lost.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import GaussianField
from .ingest import CameraView, import_field
from .partition import CellLayout
from .render import RenderOptions, RenderOutput, render


@dataclass
class NovelViewRequest:
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def camera(self) -> CameraView:
        return CameraView(
            image_id=-1, name="novel", width=self.width, height=self.height,
            fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy,
            rotation=self.rotation, translation=self.translation,
        )


def crop_cell(field: GaussianField, original_bounds,
              include_high_x: bool = False, include_high_y: bool = False) -> GaussianField:
    """Keep splats whose center XY lies inside the (unexpanded) bounds."""
    x0, x1, y0, y1 = original_bounds
    x = field.centers[:, 0]
    y = field.centers[:, 1]
    keep = (x >= x0) & (y >= y0)
    keep &= (x <= x1) if include_high_x else (x < x1)
    keep &= (y <= y1) if include_high_y else (y < y1)
    return field.select(keep)


def merge(cropped_fields, layout: CellLayout | None = None) -> GaussianField:
    """Concatenate cropped cell fields; the crop tie-break guarantees no
    duplicates, so this is a plain concatenation."""
    fields = [f for f in cropped_fields if f.n > 0]
    if not fields:
        degree = cropped_fields[0].sh_degree if cropped_fields else 0
        empty = GaussianField.concatenate([], scene_extent=1.0)
        empty.sh_degree = degree
        return empty
    merged = GaussianField.concatenate(fields, scene_extent=1.0)
    centroid = merged.centers.mean(axis=0)
    extent = float(np.linalg.norm(merged.centers - centroid, axis=1).max())
    merged.scene_extent = max(extent, 1e-6)
    return merged


def crop_layout_cells(fields, layout: CellLayout):
    """Crop each per-cell field to its original bounds; outermost high edges
    stay inclusive."""
    cropped = []
    for field, cell in zip(fields, layout.cells):
        cropped.append(crop_cell(
            field, cell.bounds,
            include_high_x=(cell.ix == layout.n_x - 1),
            include_high_y=(cell.iy == layout.n_y - 1),
        ))
    return cropped


def stitch_cells(cells_dir, layout: CellLayout) -> GaussianField:
    """Read out/cells/cell_<i>/field.ply, crop, and merge."""
    cells_dir = Path(cells_dir)
    fields = []
    for cell in layout.cells:
        ply = cells_dir / f"cell_{cell.index}" / "field.ply"
        if not ply.exists():
            raise FileNotFoundError(f"missing trained cell field: {ply}")
        fields.append(import_field(ply))
    return merge(crop_layout_cells(fields, layout), layout)


def render_novel_view(field: GaussianField, request: NovelViewRequest,
                      opts: RenderOptions | None = None) -> RenderOutput:
    """Novel poses need not appear in any split; delegates to render()."""
    return render(field, request.camera(), opts)
