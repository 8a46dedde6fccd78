"""Gaussian primitive math shared by the renderer, trainer, and stitcher.

All functions are pure and operate on immutable inputs; the batched variants
take struct-of-array views of a whole field so callers can stay vectorized.
Scales are stored as logs and opacities as pre-sigmoid logits so that
unconstrained gradient steps keep them valid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit as sigmoid

# Real spherical-harmonic constants, community splat-file convention
# (Condon-Shortley signs folded into the odd-m bands).
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.4453057213202769,
    -0.5900435899266435,
)

MAX_SH_DEGREE = 3


class InvalidParameterError(ValueError):
    """Raised when a primitive parameter violates its invariant."""


def inverse_sigmoid(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def sh_coeff_count(degree: int) -> int:
    return (degree + 1) ** 2


def sh_degree_from_count(count: int) -> int:
    degree = int(round(np.sqrt(count))) - 1
    if sh_coeff_count(degree) != count or not (0 <= degree <= MAX_SH_DEGREE):
        raise InvalidParameterError(f"no SH degree has {count} coefficients")
    return degree


@dataclass
class GaussianSplat:
    """One anisotropic 3D Gaussian primitive."""

    center: np.ndarray          # (3,) world units
    log_scale: np.ndarray       # (3,) log of per-axis lengths
    quat: np.ndarray            # (4,) (w, x, y, z), normalized on use
    opacity_logit: float        # sigmoid(logit) in (0, 1)
    sh: np.ndarray              # ((deg+1)^2, 3) view-dependent color coefficients

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)


@dataclass
class GaussianField:
    """A set of splats stored struct-of-arrays for vectorized math."""

    centers: np.ndarray         # (N, 3)
    log_scales: np.ndarray      # (N, 3)
    quats: np.ndarray           # (N, 4)
    opacity_logits: np.ndarray  # (N,)
    sh: np.ndarray              # (N, (deg+1)^2, 3)
    sh_degree: int
    scene_extent: float

    def __post_init__(self):
        n = self.centers.shape[0]
        expected = (n, sh_coeff_count(self.sh_degree), 3)
        if self.sh.shape != expected:
            raise InvalidParameterError(
                f"sh array shape {self.sh.shape} does not match degree "
                f"{self.sh_degree} (expected {expected})"
            )
        if n and self.scene_extent <= 0:
            raise InvalidParameterError("scene_extent must be positive")

    @property
    def n(self) -> int:
        return self.centers.shape[0]

    def splat(self, i: int) -> GaussianSplat:
        return GaussianSplat(
            center=self.centers[i].copy(),
            log_scale=self.log_scales[i].copy(),
            quat=self.quats[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh=self.sh[i].copy(),
        )

    def copy(self) -> "GaussianField":
        return GaussianField(
            centers=self.centers.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
            sh_degree=self.sh_degree,
            scene_extent=self.scene_extent,
        )

    def select(self, mask_or_idx) -> "GaussianField":
        return GaussianField(
            centers=self.centers[mask_or_idx],
            log_scales=self.log_scales[mask_or_idx],
            quats=self.quats[mask_or_idx],
            opacity_logits=self.opacity_logits[mask_or_idx],
            sh=self.sh[mask_or_idx],
            sh_degree=self.sh_degree,
            scene_extent=self.scene_extent,
        )

    @staticmethod
    def from_splats(splats, scene_extent: float, sh_degree: int) -> "GaussianField":
        k = sh_coeff_count(sh_degree)
        for s in splats:
            if s.sh.shape[0] != k:
                raise InvalidParameterError("all splats must share sh_degree")
        return GaussianField(
            centers=np.array([s.center for s in splats], dtype=np.float64).reshape(-1, 3),
            log_scales=np.array([s.log_scale for s in splats], dtype=np.float64).reshape(-1, 3),
            quats=np.array([s.quat for s in splats], dtype=np.float64).reshape(-1, 4),
            opacity_logits=np.array([s.opacity_logit for s in splats], dtype=np.float64),
            sh=np.array([s.sh for s in splats], dtype=np.float64).reshape(-1, k, 3),
            sh_degree=sh_degree,
            scene_extent=scene_extent,
        )

    @staticmethod
    def concatenate(fields, scene_extent: float) -> "GaussianField":
        degrees = {f.sh_degree for f in fields}
        if len(degrees) > 1:
            raise InvalidParameterError(f"cannot merge fields with degrees {degrees}")
        degree = degrees.pop() if degrees else 0
        k = sh_coeff_count(degree)
        return GaussianField(
            centers=np.concatenate([f.centers for f in fields]) if fields else np.zeros((0, 3)),
            log_scales=np.concatenate([f.log_scales for f in fields]) if fields else np.zeros((0, 3)),
            quats=np.concatenate([f.quats for f in fields]) if fields else np.zeros((0, 4)),
            opacity_logits=np.concatenate([f.opacity_logits for f in fields]) if fields else np.zeros(0),
            sh=np.concatenate([f.sh for f in fields]) if fields else np.zeros((0, k, 3)),
            sh_degree=degree,
            scene_extent=scene_extent,
        )


@dataclass
class Ray:
    origin: np.ndarray     # (3,)
    direction: np.ndarray  # (3,) unit norm

    def __post_init__(self):
        n = np.linalg.norm(self.direction)
        if abs(n - 1.0) > 1e-9:
            raise InvalidParameterError(f"ray direction norm {n} is not 1")


@dataclass
class RayHit:
    psi: float     # peak of the 1D Gaussian along the ray, in [0, 1]
    t_star: float  # ray parameter of the peak, >= 0


def normalize_quat(quat: np.ndarray) -> np.ndarray:
    quat = np.asarray(quat, dtype=np.float64)
    norm = np.linalg.norm(quat, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("zero-norm quaternion")
    return quat / norm


def quat_to_rot(quat: np.ndarray) -> np.ndarray:
    """Rotation matrix from (w, x, y, z) quaternion(s); normalizes internally.

    Accepts (4,) or (N, 4); returns (3, 3) or (N, 3, 3). Columns are the
    splat's local axes expressed in world coordinates.
    """
    q = normalize_quat(quat)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((q.shape[0], 3, 3), dtype=np.float64)
    rot[:, 0, 0] = 1 - 2 * (y * y + z * z)
    rot[:, 0, 1] = 2 * (x * y - w * z)
    rot[:, 0, 2] = 2 * (x * z + w * y)
    rot[:, 1, 0] = 2 * (x * y + w * z)
    rot[:, 1, 1] = 1 - 2 * (x * x + z * z)
    rot[:, 1, 2] = 2 * (y * z - w * x)
    rot[:, 2, 0] = 2 * (x * z - w * y)
    rot[:, 2, 1] = 2 * (y * z + w * x)
    rot[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return rot[0] if single else rot


def quat_to_rot_with_jacobian(quat: np.ndarray):
    """Rotation matrices plus dR/dq for the raw (unnormalized) quaternion.

    Returns (rot (N,3,3), jac (N,3,3,4)); the Jacobian includes the chain
    through internal normalization, so it is valid for gradient steps taken
    directly on stored quaternion parameters.
    """
    raw = np.atleast_2d(np.asarray(quat, dtype=np.float64))
    norm = np.linalg.norm(raw, axis=1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("zero-norm quaternion")
    q = raw / norm
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    n = q.shape[0]
    zero = np.zeros(n)

    # dR/dq_hat for the normalized quaternion, one 3x3 slab per component.
    jw = np.stack([
        np.stack([zero, -z, y], axis=-1),
        np.stack([z, zero, -x], axis=-1),
        np.stack([-y, x, zero], axis=-1),
    ], axis=1) * 2.0
    jx = np.stack([
        np.stack([zero, y, z], axis=-1),
        np.stack([y, -2 * x, -w], axis=-1),
        np.stack([z, w, -2 * x], axis=-1),
    ], axis=1) * 2.0
    jy = np.stack([
        np.stack([-2 * y, x, w], axis=-1),
        np.stack([x, zero, z], axis=-1),
        np.stack([-w, z, -2 * y], axis=-1),
    ], axis=1) * 2.0
    jz = np.stack([
        np.stack([-2 * z, -w, x], axis=-1),
        np.stack([w, -2 * z, y], axis=-1),
        np.stack([x, y, zero], axis=-1),
    ], axis=1) * 2.0
    jac_hat = np.stack([jw, jx, jy, jz], axis=-1)  # (N, 3, 3, 4)

    # Chain through q_hat = q_raw / |q_raw|: d q_hat / d q_raw = (I - q q^T) / |q_raw|.
    proj = (np.eye(4)[None] - q[:, :, None] * q[:, None, :]) / norm[:, :, None]
    jac = np.einsum("nijk,nkl->nijl", jac_hat, proj)
    rot = quat_to_rot(q)
    return rot, jac


def build_covariance(log_scale: np.ndarray, quat: np.ndarray) -> np.ndarray:
    """Covariance of one or many splats: R S S^T R^T with S = diag(exp(log_scale)).

    Accepts (3,)/(4,) or (N,3)/(N,4); symmetric positive-definite by
    construction. Raises InvalidParameterError for a zero-norm quaternion.
    """
    rot = quat_to_rot(quat)
    scale = np.exp(np.asarray(log_scale, dtype=np.float64))
    rs = rot * scale[..., None, :]
    return rs @ np.swapaxes(rs, -1, -2)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Real SH basis values for unit directions: (N, (degree+1)^2)."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    out = np.empty((n, sh_coeff_count(degree)), dtype=np.float64)
    out[:, 0] = SH_C0
    if degree >= 1:
        out[:, 1] = -SH_C1 * y
        out[:, 2] = SH_C1 * z
        out[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 4] = SH_C2[0] * x * y
        out[:, 5] = SH_C2[1] * y * z
        out[:, 6] = SH_C2[2] * (2 * zz - xx - yy)
        out[:, 7] = SH_C2[3] * x * z
        out[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        out[:, 9] = SH_C3[0] * y * (3 * xx - yy)
        out[:, 10] = SH_C3[1] * x * y * z
        out[:, 11] = SH_C3[2] * y * (4 * zz - xx - yy)
        out[:, 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
        out[:, 13] = SH_C3[4] * x * (4 * zz - xx - yy)
        out[:, 14] = SH_C3[5] * z * (xx - yy)
        out[:, 15] = SH_C3[6] * x * (xx - 3 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d basis / d direction for unit directions: (N, (degree+1)^2, 3).

    Derivatives are w.r.t. the raw (x, y, z) components; chaining through a
    normalization is the caller's job.
    """
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = d[:, 0], d[:, 1], d[:, 2]
    n = d.shape[0]
    g = np.zeros((n, sh_coeff_count(degree), 3), dtype=np.float64)
    if degree >= 1:
        g[:, 1, 1] = -SH_C1
        g[:, 2, 2] = SH_C1
        g[:, 3, 0] = -SH_C1
    if degree >= 2:
        g[:, 4, 0] = SH_C2[0] * y
        g[:, 4, 1] = SH_C2[0] * x
        g[:, 5, 1] = SH_C2[1] * z
        g[:, 5, 2] = SH_C2[1] * y
        g[:, 6, 0] = SH_C2[2] * -2 * x
        g[:, 6, 1] = SH_C2[2] * -2 * y
        g[:, 6, 2] = SH_C2[2] * 4 * z
        g[:, 7, 0] = SH_C2[3] * z
        g[:, 7, 2] = SH_C2[3] * x
        g[:, 8, 0] = SH_C2[4] * 2 * x
        g[:, 8, 1] = SH_C2[4] * -2 * y
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[:, 9, 0] = SH_C3[0] * 6 * x * y
        g[:, 9, 1] = SH_C3[0] * 3 * (xx - yy)
        g[:, 10, 0] = SH_C3[1] * y * z
        g[:, 10, 1] = SH_C3[1] * x * z
        g[:, 10, 2] = SH_C3[1] * x * y
        g[:, 11, 0] = SH_C3[2] * -2 * x * y
        g[:, 11, 1] = SH_C3[2] * (4 * zz - xx - 3 * yy)
        g[:, 11, 2] = SH_C3[2] * 8 * y * z
        g[:, 12, 0] = SH_C3[3] * -6 * x * z
        g[:, 12, 1] = SH_C3[3] * -6 * y * z
        g[:, 12, 2] = SH_C3[3] * (6 * zz - 3 * xx - 3 * yy)
        g[:, 13, 0] = SH_C3[4] * (4 * zz - 3 * xx - yy)
        g[:, 13, 1] = SH_C3[4] * -2 * x * y
        g[:, 13, 2] = SH_C3[4] * 8 * x * z
        g[:, 14, 0] = SH_C3[5] * 2 * x * z
        g[:, 14, 1] = SH_C3[5] * -2 * y * z
        g[:, 14, 2] = SH_C3[5] * (xx - yy)
        g[:, 15, 0] = SH_C3[6] * 3 * (xx - yy)
        g[:, 15, 1] = SH_C3[6] * -6 * x * y
    return g


def eval_sh_color(sh_coeffs: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent color: clamp(sum_m basis_m(dir) * coeff_m + 0.5, >= 0).

    sh_coeffs is (K, 3) for one splat or (N, K, 3) with one direction per
    splat in view_dir (N, 3).
    """
    coeffs = np.asarray(sh_coeffs, dtype=np.float64)
    single = coeffs.ndim == 2
    coeffs = coeffs[None] if single else coeffs
    degree = sh_degree_from_count(coeffs.shape[1])
    basis = sh_basis(view_dir, degree)
    rgb = np.einsum("nk,nkc->nc", basis, coeffs) + 0.5
    rgb = np.maximum(rgb, 0.0)
    return rgb[0] if single else rgb


def ray_peak_terms(r_g: np.ndarray, d_g: np.ndarray, eps: float = 1e-12):
    """psi and t* from splat-frame ray terms r_g, d_g (broadcastable ..x3).

    psi = exp(-0.5 (|r_g|^2 - (r_g . d_g)^2 / |d_g|^2)), t* = -(r_g . d_g)/|d_g|^2.
    Degenerate |d_g|^2 <= eps yields psi = 0 so the splat is skipped.
    """
    a = np.sum(r_g * r_g, axis=-1)
    b = np.sum(r_g * d_g, axis=-1)
    c = np.sum(d_g * d_g, axis=-1)
    ok = c > eps
    c_safe = np.where(ok, c, 1.0)
    t_star = np.where(ok, -b / c_safe, 0.0)
    m = a - b * b / c_safe
    psi = np.where(ok, np.exp(-0.5 * np.maximum(m, 0.0)), 0.0)
    return psi, t_star


def ray_gaussian_peak(splat: GaussianSplat, ray: Ray) -> RayHit:
    """Peak contribution of one splat along one ray.

    The peak below t = 0 is clamped to the ray start so psi stays the
    supremum over points actually on the ray.
    """
    rot = quat_to_rot(splat.quat)
    inv_scale = np.exp(-splat.log_scale)
    r_g = inv_scale * (rot.T @ (ray.origin - splat.center))
    d_g = inv_scale * (rot.T @ ray.direction)
    psi, t_star = ray_peak_terms(r_g, d_g)
    psi, t_star = float(psi), float(t_star)
    if t_star < 0.0:
        t_star = 0.0
        psi = float(np.exp(-0.5 * np.dot(r_g, r_g)))
    return RayHit(psi=psi, t_star=t_star)
