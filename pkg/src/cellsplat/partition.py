"""Scene partitioning: XY grid over the camera footprint, boundary
expansion, visibility-based camera selection, and track-driven point
extension.

The visibility ratio of a cell in a camera is the area of the cell's
projected 3D box (clipped to the near plane and to the image rectangle)
divided by the image area. Projection geometry: the box corners surviving
the near clip are projected, their convex hull is clipped with
Sutherland-Hodgman against the image rectangle, and the area comes from
the shoelace formula; this is exact for a convex box under a pinhole.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dataclass_field
from pathlib import Path

import numpy as np

from .ingest import CameraView, SceneModel

NEAR_PLANE = 0.01


class LayoutError(ValueError):
    pass


@dataclass
class VisibilityReport:
    camera_id: int
    cell_id: int
    ratio: float
    area_proj: float
    area_image: float


@dataclass
class Cell:
    index: int
    ix: int
    iy: int
    bounds: tuple            # (x0, x1, y0, y1) original
    expanded: tuple          # (x0, x1, y0, y1) after beta expansion
    points: np.ndarray       # P_i indices into the global cloud
    points_dilated: np.ndarray = None   # P_i^d
    points_final: np.ndarray = None     # P_i^f
    cameras_inside: list = dataclass_field(default_factory=list)
    cameras_selected: list = dataclass_field(default_factory=list)


@dataclass
class CellLayout:
    n_x: int
    n_y: int
    beta: float
    x_edges: np.ndarray
    y_edges: np.ndarray
    cells: list
    vis_threshold: float = 0.25
    vis_mode: str = "positive"

    @property
    def n_cells(self) -> int:
        return self.n_x * self.n_y


def _assign_axis(values: np.ndarray, edges: np.ndarray):
    """Cell index per value; exact internal-boundary hits go to the lower
    cell, both outer edges are inclusive, outside values get -1."""
    idx = np.searchsorted(edges, values, side="left") - 1
    idx[values == edges[0]] = 0
    outside = (values < edges[0]) | (values > edges[-1])
    idx = np.clip(idx, 0, len(edges) - 2)
    idx[outside] = -1
    return idx


def assign_cells(xy: np.ndarray, layout: CellLayout) -> np.ndarray:
    """Flat cell index for each XY row; -1 when outside the scene box."""
    ix = _assign_axis(xy[:, 0].copy(), layout.x_edges)
    iy = _assign_axis(xy[:, 1].copy(), layout.y_edges)
    cell = iy * layout.n_x + ix
    cell[(ix < 0) | (iy < 0)] = -1
    return cell


def make_grid(model: SceneModel, n_x: int, n_y: int, beta: float = 0.2) -> CellLayout:
    """Split the camera-position XY bounding box into n_x * n_y cells and
    assign every in-box point to the cell containing it."""
    if n_x < 1 or n_y < 1:
        raise LayoutError("grid dimensions must be >= 1")
    pos = model.camera_positions()
    if pos.shape[0] == 0:
        raise LayoutError("model has no cameras")
    x0, x1 = pos[:, 0].min(), pos[:, 0].max()
    y0, y1 = pos[:, 1].min(), pos[:, 1].max()
    span = max(x1 - x0, y1 - y0, 1e-12)
    if x1 - x0 <= 1e-9 * max(span, 1.0) or y1 - y0 <= 1e-9 * max(span, 1.0):
        raise LayoutError("degenerate camera bounding box")
    x_edges = np.linspace(x0, x1, n_x + 1)
    y_edges = np.linspace(y0, y1, n_y + 1)

    layout = CellLayout(n_x=n_x, n_y=n_y, beta=beta, x_edges=x_edges, y_edges=y_edges, cells=[])
    point_cells = assign_cells(model.points[:, :2], layout)
    for iy in range(n_y):
        for ix in range(n_x):
            index = iy * n_x + ix
            bounds = (x_edges[ix], x_edges[ix + 1], y_edges[iy], y_edges[iy + 1])
            pts = np.flatnonzero(point_cells == index)
            layout.cells.append(Cell(index=index, ix=ix, iy=iy, bounds=bounds,
                                     expanded=bounds, points=pts))
    return layout


def expand_cell(layout: CellLayout, model: SceneModel, cell_id: int, beta: float):
    """Concentric expansion to (1+beta) * (W, H); returns
    (expanded bounds, dilated point indices P_i^d)."""
    cell = layout.cells[cell_id]
    x0, x1, y0, y1 = cell.bounds
    cx, cy = (x0 + x1) / 2.0, (y0 + y1) / 2.0
    hw = (x1 - x0) / 2.0 * (1.0 + beta)
    hh = (y1 - y0) / 2.0 * (1.0 + beta)
    expanded = (cx - hw, cx + hw, cy - hh, cy + hh)
    p = model.points
    inside = ((p[:, 0] >= expanded[0]) & (p[:, 0] <= expanded[1])
              & (p[:, 1] >= expanded[2]) & (p[:, 1] <= expanded[3]))
    dilated = np.union1d(cell.points, np.flatnonzero(inside))
    return expanded, dilated


# ---------------------------------------------------------------------------
# Projection geometry
# ---------------------------------------------------------------------------

def _clip_box_to_near(corners_cam: np.ndarray, near: float) -> np.ndarray:
    """Vertices of an axis-aligned box clipped against the camera plane
    z = near: surviving corners plus edge/plane intersections."""
    edges = [
        (0, 1), (2, 3), (4, 5), (6, 7),
        (0, 2), (1, 3), (4, 6), (5, 7),
        (0, 4), (1, 5), (2, 6), (3, 7),
    ]
    keep = [c for c in corners_cam if c[2] >= near]
    for i, j in edges:
        zi, zj = corners_cam[i][2], corners_cam[j][2]
        if (zi - near) * (zj - near) < 0:
            s = (near - zi) / (zj - zi)
            keep.append(corners_cam[i] + s * (corners_cam[j] - corners_cam[i]))
    return np.array(keep).reshape(-1, 3)


def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; returns hull vertices counter-clockwise."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if pts.shape[0] < 3:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def clip_polygon_to_rect(poly: np.ndarray, x_max: float, y_max: float) -> np.ndarray:
    """Sutherland-Hodgman clip against [0, x_max] x [0, y_max]."""
    def clip_edge(points, inside, intersect):
        out = []
        n = len(points)
        for i in range(n):
            cur, nxt = points[i], points[(i + 1) % n]
            cur_in, nxt_in = inside(cur), inside(nxt)
            if cur_in:
                out.append(cur)
                if not nxt_in:
                    out.append(intersect(cur, nxt))
            elif nxt_in:
                out.append(intersect(cur, nxt))
        return out

    def x_cross(a, b, x):
        s = (x - a[0]) / (b[0] - a[0])
        return np.array([x, a[1] + s * (b[1] - a[1])])

    def y_cross(a, b, y):
        s = (y - a[1]) / (b[1] - a[1])
        return np.array([a[0] + s * (b[0] - a[0]), y])

    pts = [np.asarray(p, dtype=np.float64) for p in poly]
    for inside, intersect in (
        (lambda p: p[0] >= 0.0, lambda a, b: x_cross(a, b, 0.0)),
        (lambda p: p[0] <= x_max, lambda a, b: x_cross(a, b, x_max)),
        (lambda p: p[1] >= 0.0, lambda a, b: y_cross(a, b, 0.0)),
        (lambda p: p[1] <= y_max, lambda a, b: y_cross(a, b, y_max)),
    ):
        if not pts:
            return np.zeros((0, 2))
        pts = clip_edge(pts, inside, intersect)
    return np.array(pts).reshape(-1, 2)


def shoelace_area(poly: np.ndarray) -> float:
    if poly.shape[0] < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def visibility_ratio(cell_expanded_bounds, camera: CameraView, z_range,
                     cell_id: int = -1) -> VisibilityReport:
    """Projected-area ratio of a cell box (XY bounds x z_range) in a camera."""
    x0, x1, y0, y1 = cell_expanded_bounds
    z0, z1 = z_range
    corners = np.array([[x, y, z] for x in (x0, x1) for y in (y0, y1) for z in (z0, z1)])
    cam_pts = camera.world_to_camera(corners)
    verts = _clip_box_to_near(cam_pts, NEAR_PLANE)
    area_image = float(camera.width * camera.height)
    if verts.shape[0] < 3:
        return VisibilityReport(camera.image_id, cell_id, 0.0, 0.0, area_image)
    px = camera.fx * verts[:, 0] / verts[:, 2] + camera.cx
    py = camera.fy * verts[:, 1] / verts[:, 2] + camera.cy
    hull = convex_hull_2d(np.stack([px, py], axis=1))
    clipped = clip_polygon_to_rect(hull, camera.width, camera.height)
    area = min(shoelace_area(clipped), area_image)
    return VisibilityReport(camera.image_id, cell_id, area / area_image, area, area_image)


def _cell_z_range(layout: CellLayout, model: SceneModel, cell_id: int):
    cell = layout.cells[cell_id]
    idx = cell.points
    if idx.size:
        z = model.points[idx, 2]
    elif model.points.shape[0]:
        z = model.points[:, 2]
    else:
        z = np.array([0.0, 1.0])
    z0, z1 = float(z.min()), float(z.max())
    if z1 - z0 < 1e-9:
        z0, z1 = z0 - 0.5, z1 + 0.5
    return z0, z1


def select_cameras(layout: CellLayout, model: SceneModel, threshold: float,
                   vis_mode: str = "positive"):
    """Per-cell camera sets: containment plus the visibility criterion.

    threshold > 0 selects cameras whose ratio passes it; threshold == 0
    selects cameras with a strictly positive ratio ('positive' mode) or
    every camera ('all' mode).
    """
    if vis_mode not in ("positive", "all"):
        raise LayoutError(f"unknown vis-mode {vis_mode!r}")
    positions = model.camera_positions()
    cam_cells = assign_cells(positions[:, :2], layout)
    for cell in layout.cells:
        inside = [model.cameras[i].image_id for i in np.flatnonzero(cam_cells == cell.index)]
        selected = set(inside)
        z_range = _cell_z_range(layout, model, cell.index)
        for cam in model.cameras:
            report = visibility_ratio(cell.expanded, cam, z_range, cell.index)
            if threshold > 0:
                hit = report.ratio >= threshold
            elif vis_mode == "positive":
                hit = report.ratio > 0.0
            else:
                hit = True
            if hit:
                selected.add(cam.image_id)
        cell.cameras_inside = sorted(inside)
        cell.cameras_selected = sorted(selected)
    layout.vis_threshold = threshold
    layout.vis_mode = vis_mode
    return [cell.cameras_selected for cell in layout.cells]


def extend_points(layout: CellLayout, model: SceneModel, cell_id: int) -> np.ndarray:
    """P_i^f: dilated points plus any point observed (per its SfM track) by
    a camera the visibility step newly added to the cell."""
    cell = layout.cells[cell_id]
    dilated = cell.points_dilated if cell.points_dilated is not None else cell.points
    added = set(cell.cameras_selected) - set(cell.cameras_inside)
    if not added:
        cell.points_final = np.asarray(dilated, dtype=np.int64)
        return cell.points_final
    extra = [i for i, track in enumerate(model.tracks) if added.intersection(track)]
    cell.points_final = np.union1d(dilated, np.asarray(extra, dtype=np.int64))
    return cell.points_final


def partition_scene(model: SceneModel, n_x: int, n_y: int, beta: float = 0.2,
                    vis_threshold: float = 0.25, vis_mode: str = "positive") -> CellLayout:
    """Full partitioning pipeline: grid, expansion, camera selection, and
    point extension for every cell."""
    layout = make_grid(model, n_x, n_y, beta)
    for cell in layout.cells:
        cell.expanded, cell.points_dilated = expand_cell(layout, model, cell.index, beta)
    select_cameras(layout, model, vis_threshold, vis_mode)
    for cell in layout.cells:
        extend_points(layout, model, cell.index)
    return layout


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

def save_layout(layout: CellLayout, out_dir) -> None:
    """Write layout.json plus one manifest per cell under cells/cell_<i>/."""
    out_dir = Path(out_dir)
    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    meta = {
        "n_x": layout.n_x, "n_y": layout.n_y, "beta": layout.beta,
        "x_edges": layout.x_edges.tolist(), "y_edges": layout.y_edges.tolist(),
        "vis_threshold": layout.vis_threshold, "vis_mode": layout.vis_mode,
    }
    (out_dir / "layout.json").write_text(json.dumps(meta, indent=2), encoding="utf-8")
    for cell in layout.cells:
        cell_dir = out_dir / "cells" / f"cell_{cell.index}"
        cell_dir.mkdir(parents=True, exist_ok=True)
        manifest = {
            "cell": cell.index, "ix": cell.ix, "iy": cell.iy,
            "bounds": list(cell.bounds), "expanded": list(cell.expanded),
            "beta": layout.beta,
            "vis_threshold": layout.vis_threshold, "vis_mode": layout.vis_mode,
            "cameras_inside": [int(v) for v in cell.cameras_inside],
            "cameras_selected": [int(v) for v in cell.cameras_selected],
            "points": [int(v) for v in cell.points],
            "points_dilated": [int(v) for v in np.asarray(cell.points_dilated)],
            "points_final": [int(v) for v in np.asarray(cell.points_final)],
        }
        (cell_dir / "manifest").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_manifest(path) -> dict:
    manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    for key in ("points", "points_dilated", "points_final"):
        manifest[key] = np.asarray(manifest[key], dtype=np.int64)
    return manifest


def load_layout(out_dir) -> CellLayout:
    out_dir = Path(out_dir)
    meta = json.loads((out_dir / "layout.json").read_text(encoding="utf-8"))
    cells = []
    for index in range(meta["n_x"] * meta["n_y"]):
        m = load_manifest(out_dir / "cells" / f"cell_{index}" / "manifest")
        cells.append(Cell(
            index=index, ix=m["ix"], iy=m["iy"], bounds=tuple(m["bounds"]),
            expanded=tuple(m["expanded"]), points=m["points"],
            points_dilated=m["points_dilated"], points_final=m["points_final"],
            cameras_inside=m["cameras_inside"], cameras_selected=m["cameras_selected"],
        ))
    return CellLayout(
        n_x=meta["n_x"], n_y=meta["n_y"], beta=meta["beta"],
        x_edges=np.asarray(meta["x_edges"]), y_edges=np.asarray(meta["y_edges"]),
        cells=cells, vis_threshold=meta["vis_threshold"], vis_mode=meta["vis_mode"],
    )
