"""SfM model ingestion: COLMAP text parsing, Manhattan alignment, image
loading, and the binary PLY exchange format for Gaussian fields.

Only undistorted pinhole models are supported (PINHOLE / SIMPLE_PINHOLE);
numeric parsing always uses '.' decimals regardless of locale because we
split and float() the raw text ourselves.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .core import GaussianField, InvalidParameterError, sh_coeff_count, sh_degree_from_count


class ColmapParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


class UnsupportedCameraModelError(ColmapParseError):
    pass


class AlignmentFailedError(RuntimeError):
    pass


class PlyFormatError(ValueError):
    pass


@dataclass
class CameraView:
    """One posed pinhole camera; pose maps world to camera: x_cam = R x + t."""

    image_id: int
    name: str
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world-to-camera
    translation: np.ndarray  # (3,)
    camera_id: int = 0
    image: np.ndarray | None = None  # (H, W, 3) floats in [0, 1] once loaded

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidParameterError(f"image {self.image_id}: focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise InvalidParameterError(f"image {self.image_id}: principal point outside image")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6:
            raise InvalidParameterError(f"image {self.image_id}: rotation not orthonormal ({err:.2e})")

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation


@dataclass
class SceneModel:
    """Cameras plus the sparse point cloud with its observation tracks."""

    cameras: list[CameraView]
    points: np.ndarray            # (P, 3)
    point_colors: np.ndarray      # (P, 3) in [0, 1]
    point_errors: np.ndarray      # (P,)
    tracks: list[list[int]] = field(default_factory=list)

    def camera_by_id(self, image_id: int) -> CameraView:
        for cam in self.cameras:
            if cam.image_id == image_id:
                return cam
        raise KeyError(f"no camera with image id {image_id}")

    def camera_positions(self) -> np.ndarray:
        return np.array([c.center for c in self.cameras]).reshape(-1, 3)

    def scene_extent(self) -> float:
        """Radius of the camera-position bounding sphere."""
        pos = self.camera_positions()
        centroid = pos.mean(axis=0)
        return max(float(np.linalg.norm(pos - centroid, axis=1).max()), 1e-6)


def quat_wxyz_to_rot(q: np.ndarray) -> np.ndarray:
    w, x, y, z = q / np.linalg.norm(q)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def rot_to_quat_wxyz(rot: np.ndarray) -> np.ndarray:
    """Stable rotation-matrix to quaternion conversion (w >= 0)."""
    m = rot
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def _data_lines(path: Path):
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            yield line_no, line


def parse_colmap_text(model_dir) -> SceneModel:
    """Parse cameras.txt / images.txt / points3D.txt from a COLMAP text model."""
    model_dir = Path(model_dir)
    cams_path = model_dir / "cameras.txt"
    images_path = model_dir / "images.txt"
    points_path = model_dir / "points3D.txt"
    for p in (cams_path, images_path, points_path):
        if not p.exists():
            raise FileNotFoundError(f"missing COLMAP file: {p}")

    intrinsics = {}
    for line_no, line in _data_lines(cams_path):
        parts = line.split()
        if len(parts) < 4:
            raise ColmapParseError(cams_path, line_no, "camera line too short")
        try:
            cam_id, model = int(parts[0]), parts[1]
            width, height = int(parts[2]), int(parts[3])
            params = [float(p) for p in parts[4:]]
        except ValueError as exc:
            raise ColmapParseError(cams_path, line_no, f"bad number: {exc}") from exc
        if model == "PINHOLE":
            if len(params) != 4:
                raise ColmapParseError(cams_path, line_no, "PINHOLE expects 4 params")
            fx, fy, cx, cy = params
        elif model == "SIMPLE_PINHOLE":
            if len(params) != 3:
                raise ColmapParseError(cams_path, line_no, "SIMPLE_PINHOLE expects 3 params")
            f, cx, cy = params
            fx = fy = f
        else:
            raise UnsupportedCameraModelError(cams_path, line_no, f"unsupported camera model {model}")
        intrinsics[cam_id] = (width, height, fx, fy, cx, cy)

    cameras = []
    expecting_points2d = False
    # The 2D-observation line may be blank, so blank lines count as data here.
    with open(images_path, "r", encoding="utf-8") as fh:
        raw_lines = [(no, ln.strip()) for no, ln in enumerate(fh, start=1)]
    data_lines = [(no, ln) for no, ln in raw_lines if not ln.startswith("#")]
    while data_lines and not data_lines[-1][1]:
        data_lines.pop()
    for line_no, line in data_lines:
        if expecting_points2d:
            expecting_points2d = False
            continue
        if not line:
            raise ColmapParseError(images_path, line_no, "unexpected blank image line")
        parts = line.split()
        if len(parts) < 10:
            raise ColmapParseError(images_path, line_no, "image line too short")
        try:
            image_id = int(parts[0])
            q = np.array([float(v) for v in parts[1:5]])
            t = np.array([float(v) for v in parts[5:8]])
            cam_id = int(parts[8])
        except ValueError as exc:
            raise ColmapParseError(images_path, line_no, f"bad number: {exc}") from exc
        name = parts[9]
        if cam_id not in intrinsics:
            raise ColmapParseError(images_path, line_no, f"image references unknown camera {cam_id}")
        width, height, fx, fy, cx, cy = intrinsics[cam_id]
        cameras.append(CameraView(
            image_id=image_id, name=name, width=width, height=height,
            fx=fx, fy=fy, cx=cx, cy=cy,
            rotation=quat_wxyz_to_rot(q), translation=t, camera_id=cam_id,
        ))
        expecting_points2d = True

    image_ids = {c.image_id for c in cameras}
    positions, colors, errors, tracks = [], [], [], []
    for line_no, line in _data_lines(points_path):
        parts = line.split()
        if len(parts) < 8 or (len(parts) - 8) % 2 != 0:
            raise ColmapParseError(points_path, line_no, "malformed point line")
        try:
            xyz = [float(v) for v in parts[1:4]]
            rgb = [int(v) for v in parts[4:7]]
            err = float(parts[7])
            track_ids = [int(v) for v in parts[8::2]]
        except ValueError as exc:
            raise ColmapParseError(points_path, line_no, f"bad number: {exc}") from exc
        if not np.all(np.isfinite(xyz)):
            raise ColmapParseError(points_path, line_no, "non-finite point position")
        for tid in track_ids:
            if tid not in image_ids:
                raise ColmapParseError(points_path, line_no, f"track references missing image {tid}")
        positions.append(xyz)
        colors.append(rgb)
        errors.append(err)
        tracks.append(track_ids)

    return SceneModel(
        cameras=cameras,
        points=np.array(positions, dtype=np.float64).reshape(-1, 3),
        point_colors=np.array(colors, dtype=np.float64).reshape(-1, 3) / 255.0,
        point_errors=np.array(errors, dtype=np.float64),
        tracks=tracks,
    )


def write_colmap_text(model: SceneModel, out_dir) -> None:
    """Inverse of parse_colmap_text; always writes PINHOLE cameras."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    seen = {}
    for cam in model.cameras:
        key = cam.camera_id
        entry = (cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy)
        if key in seen and seen[key] != entry:
            raise ValueError(f"camera id {key} reused with different intrinsics")
        seen[key] = entry
    def fmt(x):
        return repr(float(x))

    with open(out_dir / "cameras.txt", "w", encoding="utf-8") as fh:
        fh.write("# Camera list with one line of data per camera:\n")
        fh.write("#   CAMERA_ID, MODEL, WIDTH, HEIGHT, PARAMS[]\n")
        for cam_id in sorted(seen):
            w, h, fx, fy, cx, cy = seen[cam_id]
            fh.write(f"{cam_id} PINHOLE {w} {h} {fmt(fx)} {fmt(fy)} {fmt(cx)} {fmt(cy)}\n")

    with open(out_dir / "images.txt", "w", encoding="utf-8") as fh:
        fh.write("# Image list with two lines of data per image:\n")
        fh.write("#   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n")
        fh.write("#   POINTS2D[] as (X, Y, POINT3D_ID)\n")
        for cam in model.cameras:
            q = rot_to_quat_wxyz(cam.rotation)
            t = cam.translation
            fh.write(f"{cam.image_id} {fmt(q[0])} {fmt(q[1])} {fmt(q[2])} {fmt(q[3])} "
                     f"{fmt(t[0])} {fmt(t[1])} {fmt(t[2])} {cam.camera_id} {cam.name}\n")
            fh.write("\n")

    with open(out_dir / "points3D.txt", "w", encoding="utf-8") as fh:
        fh.write("# 3D point list with one line of data per point:\n")
        fh.write("#   POINT3D_ID, X, Y, Z, R, G, B, ERROR, TRACK[] as (IMAGE_ID, POINT2D_IDX)\n")
        for i in range(model.points.shape[0]):
            p = model.points[i]
            rgb = np.clip(np.round(model.point_colors[i] * 255.0), 0, 255).astype(int)
            track = " ".join(f"{tid} 0" for tid in model.tracks[i])
            fh.write(f"{i + 1} {fmt(p[0])} {fmt(p[1])} {fmt(p[2])} {rgb[0]} {rgb[1]} {rgb[2]} "
                     f"{fmt(model.point_errors[i])} {track}\n".rstrip() + "\n")


def _rotation_mapping_to_z(normal: np.ndarray) -> np.ndarray:
    """Shortest rotation taking a unit normal to +Z (Rodrigues)."""
    n = normal / np.linalg.norm(normal)
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(n, z))
    if c > 1.0 - 1e-12:
        return np.eye(3)
    if c < -1.0 + 1e-12:
        # 180 degrees: rotate about X.
        return np.diag([1.0, -1.0, -1.0])
    axis = np.cross(n, z)
    s = np.linalg.norm(axis)
    axis = axis / s
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def apply_rotation(model: SceneModel, rot: np.ndarray) -> SceneModel:
    """Rigidly rotate the whole model: points and camera poses."""
    cameras = [CameraView(
        image_id=c.image_id, name=c.name, width=c.width, height=c.height,
        fx=c.fx, fy=c.fy, cx=c.cx, cy=c.cy,
        rotation=c.rotation @ rot.T, translation=c.translation.copy(),
        camera_id=c.camera_id, image=c.image,
    ) for c in model.cameras]
    return SceneModel(
        cameras=cameras,
        points=model.points @ rot.T,
        point_colors=model.point_colors.copy(),
        point_errors=model.point_errors.copy(),
        tracks=[list(t) for t in model.tracks],
    )


def manhattan_align(model: SceneModel, seed: int = 0):
    """Rotate the model so the estimated ground-plane normal becomes +Z.

    Ground plane estimation: PCA pre-rotation, RANSAC plane fit over the
    lowest 30% of points by pre-rotated Z (1000 iterations, inlier threshold
    1% of scene extent), least-squares refit on inliers. Returns
    (rotation, aligned_model); raises AlignmentFailedError when no plane
    reaches 20% inliers.
    """
    pts = model.points
    if pts.shape[0] < 50:
        raise AlignmentFailedError(f"need at least 50 points, got {pts.shape[0]}")

    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / pts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    normal0 = eigvecs[:, 0]  # least-variance direction
    cam_mean = model.camera_positions().mean(axis=0)
    if np.dot(normal0, cam_mean - centroid) < 0:
        normal0 = -normal0
    pre = _rotation_mapping_to_z(normal0)

    pre_pts = centered @ pre.T
    order = np.argsort(pre_pts[:, 2])
    n_low = max(int(0.3 * pts.shape[0]), 3)
    low = pre_pts[order[:n_low]]

    extent = 0.5 * float(np.linalg.norm(pts.max(axis=0) - pts.min(axis=0)))
    thresh = max(0.01 * extent, 1e-9)

    rng = np.random.default_rng(seed)
    best_inliers = None
    for _ in range(1000):
        idx = rng.choice(low.shape[0], size=3, replace=False)
        p0, p1, p2 = low[idx]
        n = np.cross(p1 - p0, p2 - p0)
        nn = np.linalg.norm(n)
        if nn < 1e-12:
            continue
        n = n / nn
        dist = np.abs((low - p0) @ n)
        inliers = dist < thresh
        if best_inliers is None or inliers.sum() > best_inliers.sum():
            best_inliers = inliers
    if best_inliers is None or best_inliers.sum() < 0.2 * low.shape[0]:
        raise AlignmentFailedError("RANSAC found no ground plane with 20% inliers")

    sel = low[best_inliers]
    sel_c = sel - sel.mean(axis=0)
    _, _, vt = np.linalg.svd(sel_c, full_matrices=False)
    normal_pre = vt[2]
    cam_mean_pre = (cam_mean - centroid) @ pre.T
    if np.dot(normal_pre, cam_mean_pre - sel.mean(axis=0)) < 0:
        normal_pre = -normal_pre

    rot = _rotation_mapping_to_z(normal_pre) @ pre
    return rot, apply_rotation(model, rot)


def load_image(path) -> np.ndarray:
    """8-bit PNG/PPM to linear [0,1] floats (no gamma handling)."""
    with Image.open(path) as img:
        arr = np.asarray(img.convert("RGB"), dtype=np.float64)
    return arr / 255.0


def save_image(path, arr: np.ndarray) -> None:
    data = np.clip(np.asarray(arr), 0.0, 1.0)
    Image.fromarray((data * 255.0 + 0.5).astype(np.uint8)).save(path)


def load_images(model: SceneModel, images_dir) -> SceneModel:
    """Attach images from an images/ directory by each view's NAME field."""
    images_dir = Path(images_dir)
    for cam in model.cameras:
        cam.image = load_image(images_dir / cam.name)
        if cam.image.shape[:2] != (cam.height, cam.width):
            raise InvalidParameterError(
                f"image {cam.name}: file is {cam.image.shape[1]}x{cam.image.shape[0]}, "
                f"model says {cam.width}x{cam.height}")
    return model


# ---------------------------------------------------------------------------
# Gaussian field exchange format (binary little-endian PLY)
# ---------------------------------------------------------------------------

def _field_property_names(sh_degree: int) -> list[str]:
    n_rest = 3 * (sh_coeff_count(sh_degree) - 1)
    names = ["x", "y", "z", "nx", "ny", "nz", "f_dc_0", "f_dc_1", "f_dc_2"]
    names += [f"f_rest_{i}" for i in range(n_rest)]
    names += ["opacity", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]
    return names


def export_field(field: GaussianField, path) -> None:
    """Write the splat PLY: logits/logs/quats stored raw, float32."""
    names = _field_property_names(field.sh_degree)
    n = field.n
    m = sh_coeff_count(field.sh_degree) - 1
    data = np.zeros((n, len(names)), dtype=np.float32)
    data[:, 0:3] = field.centers
    # nx, ny, nz stay zero
    data[:, 6:9] = field.sh[:, 0, :]
    if m:
        rest = np.transpose(field.sh[:, 1:, :], (0, 2, 1)).reshape(n, 3 * m)
        data[:, 9:9 + 3 * m] = rest
    col = 9 + 3 * m
    data[:, col] = field.opacity_logits
    data[:, col + 1:col + 4] = field.log_scales
    data[:, col + 4:col + 8] = field.quats

    header = ["ply", "format binary_little_endian 1.0", f"element vertex {n}"]
    header += [f"property float {name}" for name in names]
    header.append("end_header")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(data.astype("<f4").tobytes())


def import_field(path) -> GaussianField:
    """Read the splat PLY written by export_field; inverse up to float32."""
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if not blob.startswith(b"ply") or end < 0:
        raise PlyFormatError(f"{path}: not a PLY file")
    header = blob[:end].decode("ascii", errors="replace").splitlines()
    body = blob[end + len(b"end_header\n"):]

    n_vertex = None
    props = []
    fmt_ok = False
    for line in header[1:]:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format":
            fmt_ok = parts[1] == "binary_little_endian"
        elif parts[0] == "element":
            if parts[1] != "vertex":
                raise PlyFormatError(f"{path}: unsupported element {parts[1]}")
            n_vertex = int(parts[2])
        elif parts[0] == "property":
            if parts[1] not in ("float", "float32", "double", "float64"):
                raise PlyFormatError(f"{path}: unsupported property type {parts[1]}")
            props.append((parts[2], "<f4" if parts[1] in ("float", "float32") else "<f8"))
    if not fmt_ok:
        raise PlyFormatError(f"{path}: expected binary_little_endian format")
    if n_vertex is None:
        raise PlyFormatError(f"{path}: missing vertex element")

    names = [p[0] for p in props]
    n_rest = sum(1 for name in names if name.startswith("f_rest_"))
    sh_degree = sh_degree_from_count(n_rest // 3 + 1) if n_rest % 3 == 0 else None
    if sh_degree is None:
        raise PlyFormatError(f"{path}: f_rest count {n_rest} is not 3*((deg+1)^2-1)")
    required = _field_property_names(sh_degree)
    missing = [name for name in required if name not in names]
    if missing:
        raise PlyFormatError(f"{path}: missing properties: {', '.join(missing)}")

    dtype = np.dtype(props)
    if len(body) < n_vertex * dtype.itemsize:
        raise PlyFormatError(f"{path}: truncated body")
    rec = np.frombuffer(body[:n_vertex * dtype.itemsize], dtype=dtype)

    def col(name):
        return rec[name].astype(np.float64)

    centers = np.stack([col("x"), col("y"), col("z")], axis=1)
    sh = np.zeros((n_vertex, sh_coeff_count(sh_degree), 3), dtype=np.float64)
    sh[:, 0, 0] = col("f_dc_0")
    sh[:, 0, 1] = col("f_dc_1")
    sh[:, 0, 2] = col("f_dc_2")
    m = sh_coeff_count(sh_degree) - 1
    if m:
        rest = np.stack([col(f"f_rest_{i}") for i in range(3 * m)], axis=1)
        sh[:, 1:, :] = np.transpose(rest.reshape(n_vertex, 3, m), (0, 2, 1))
    centroid = centers.mean(axis=0) if n_vertex else np.zeros(3)
    extent = float(np.linalg.norm(centers - centroid, axis=1).max()) if n_vertex else 1.0
    return GaussianField(
        centers=centers,
        log_scales=np.stack([col("scale_0"), col("scale_1"), col("scale_2")], axis=1),
        quats=np.stack([col(f"rot_{i}") for i in range(4)], axis=1),
        opacity_logits=col("opacity"),
        sh=sh,
        sh_degree=sh_degree,
        scene_extent=max(extent, 1e-6),
    )
