"""Shared scene-construction utilities for the test suite."""

from __future__ import annotations

import numpy as np

from cellsplat.core import GaussianField, inverse_sigmoid, sh_coeff_count, SH_C0
from cellsplat.ingest import CameraView


def look_at_camera(eye, target, width=16, height=16, fx=12.0, fy=None,
                   image_id=0, name="view.png", up=(0.0, 0.0, 1.0)):
    """COLMAP-convention camera (x right, y down, z forward) looking at target."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    z = target - eye
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-6:
        x = np.cross(z, np.array([0.0, 1.0, 0.0]))
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=0)
    fy = fx if fy is None else fy
    return CameraView(
        image_id=image_id, name=name, width=width, height=height,
        fx=fx, fy=fy, cx=width / 2.0, cy=height / 2.0,
        rotation=rot, translation=-rot @ eye,
    )


def random_field(rng, n=10, sh_degree=2, center_box=((-1.2, -1.2, 2.5), (1.2, 1.2, 6.0)),
                 scale_range=(0.12, 0.45), opacity_range=(0.3, 0.9), rest_mag=0.03,
                 scene_extent=4.0):
    """Random field with parameters kept away from clamp/gate boundaries
    so finite differences stay smooth."""
    lo = np.asarray(center_box[0])
    hi = np.asarray(center_box[1])
    centers = rng.uniform(lo, hi, size=(n, 3))
    log_scales = np.log(rng.uniform(*scale_range, size=(n, 3)))
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opacity = inverse_sigmoid(rng.uniform(*opacity_range, size=n))
    k = sh_coeff_count(sh_degree)
    sh = rng.uniform(-rest_mag, rest_mag, size=(n, k, 3))
    base = rng.uniform(0.25, 0.85, size=(n, 3))
    sh[:, 0, :] = (base - 0.5) / SH_C0
    return GaussianField(
        centers=centers, log_scales=log_scales, quats=quats,
        opacity_logits=opacity, sh=sh, sh_degree=sh_degree,
        scene_extent=scene_extent,
    )


def front_camera(width=8, height=8, fx=6.0):
    """Camera at the origin looking down +Z."""
    return CameraView(
        image_id=0, name="front.png", width=width, height=height,
        fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
        rotation=np.eye(3), translation=np.zeros(3),
    )


def finite_difference(f, x0, eps=1e-5):
    """Central finite differences of scalar f over a flat parameter array."""
    x0 = np.asarray(x0, dtype=np.float64)
    grad = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xp.flat[i] += eps
        xm = x0.copy()
        xm.flat[i] -= eps
        grad.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return grad


def rel_err(analytic, numeric, floor=1e-7):
    """Worst relative error with an absolute floor on the denominator."""
    analytic = np.asarray(analytic, dtype=np.float64).ravel()
    numeric = np.asarray(numeric, dtype=np.float64).ravel()
    scale = np.maximum(np.abs(numeric), np.maximum(np.abs(analytic), floor))
    return float(np.max(np.abs(analytic - numeric) / scale))
