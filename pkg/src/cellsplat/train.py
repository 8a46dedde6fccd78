"""Per-cell optimization: composite loss, analytic gradients, Adam updates,
and reinforced density control.

The loss is

    L = L_c + lambda1 * L_d + lambda2 * L_n
    L_c = L1(I_a, I_gt) + lambda3 * D-SSIM(I_r, I_gt)

with L_d the pairwise depth-distortion over each pixel's contribution list
and L_n the alignment of per-contribution splat normals against normals
derived from the rendered depth (N_D is treated as a constant per step).
Densification accumulates per-pixel screen-space gradient norms (instead of
the norm of the summed gradient) so opposing pixels cannot cancel, then
clones small splats and splits large ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field as dataclass_field, replace

import numpy as np
from scipy.spatial import cKDTree
from scipy.special import expit as sigmoid

from . import metrics
from .appearance import AppearanceModel
from .core import GaussianField, inverse_sigmoid, sh_coeff_count, SH_C0
from .ingest import CameraView
from .render import RenderOptions, RenderOutput, depth_to_normal, render, render_backward

SPLAT_KEYS = ("centers", "log_scales", "quats", "opacity_logits", "sh")


class ShapeMismatchError(ValueError):
    pass


class GradientNaNError(RuntimeError):
    pass


class TrainDivergedError(RuntimeError):
    pass


@dataclass
class LossWeights:
    depth_distortion: float = 100.0    # lambda_1
    normal_consistency: float = 0.05   # lambda_2
    dssim: float = 0.2                 # lambda_3

    def __post_init__(self):
        for v in (self.depth_distortion, self.normal_consistency, self.dssim):
            if not np.isfinite(v) or v < 0:
                raise ValueError("loss weights must be finite and nonnegative")


@dataclass
class LossBreakdown:
    total: float
    color: float
    depth: float
    normal: float
    l1: float
    dssim: float


@dataclass
class TrainConfig:
    iterations: int = 2000             # 60000 at full scale
    densify_interval: int = 100
    densify_start: int = 500
    densify_stop: int = 15000
    grad_threshold: float = 2e-4
    densify_scale_cutoff: float = 0.01  # times scene_extent: clone below, split above
    split_scale_shrink: float = 1.6
    prune_opacity: float = 0.005
    prune_scale_ratio: float = 0.2      # oversized-splat prune, times scene_extent
    opacity_reset_interval: int = 3000
    opacity_reset_cap: float = 0.01
    lr_centers: float = 1.6e-4          # times scene_extent, exponential decay
    lr_centers_final: float = 1.6e-6
    lr_sh: float = 2.5e-3
    lr_opacity: float = 5e-2
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_appearance: float = 1e-3
    sh_degree: int = 2
    background: tuple = (0.0, 0.0, 0.0)
    weights: LossWeights = dataclass_field(default_factory=LossWeights)

    def __post_init__(self):
        if self.densify_stop < self.densify_start:
            raise ValueError("densify_stop must be >= densify_start")
        if self.densify_interval < 1:
            raise ValueError("densify_interval must be >= 1")


@dataclass
class DensifyStats:
    """Accumulated view-position gradient magnitudes per splat."""

    grad_mag: np.ndarray   # (N,) sum over views/pixels of per-pixel norms
    grad_dir: np.ndarray   # (N, 3) plain vector sum, used to direct clones
    count: np.ndarray      # (N,) number of views the splat contributed to

    @staticmethod
    def zeros(n: int) -> "DensifyStats":
        return DensifyStats(np.zeros(n), np.zeros((n, 3)), np.zeros(n))

    def reset(self):
        self.grad_mag[:] = 0.0
        self.grad_dir[:] = 0.0
        self.count[:] = 0.0


def accumulate_view_gradient(stats: DensifyStats, splat_idx: np.ndarray,
                             pixel_grads: np.ndarray, jacobians: np.ndarray) -> DensifyStats:
    """Add one view's per-pixel position-gradient norms.

    pixel_grads holds one 2-vector per (pixel, splat) entry; jacobians is the
    per-splat 2x3 projection Jacobian. The product is formed per pixel and
    its norm accumulated, so gradients from different pixels cannot negate
    each other. The observation count increments once per touched splat.
    """
    if splat_idx.size:
        h = np.einsum("mi,mij->mj", pixel_grads, jacobians[splat_idx])
        mag = np.linalg.norm(h, axis=1)
        n = stats.grad_mag.size
        stats.grad_mag += np.bincount(splat_idx, weights=mag, minlength=n)
        for ax in range(3):
            stats.grad_dir[:, ax] += np.bincount(splat_idx, weights=h[:, ax], minlength=n)
        stats.count[np.unique(splat_idx)] += 1.0
    return stats


# ---------------------------------------------------------------------------
# Loss forward / backward
# ---------------------------------------------------------------------------

def _segment_prefix_sums(contribs):
    """Exclusive prefix/suffix sums of omega and omega*t per pixel segment."""
    omega, t, pix = contribs.omega, contribs.t, contribs.pixel
    n = omega.size
    idx = np.arange(n)
    starts = np.ones(n, dtype=bool)
    starts[1:] = pix[1:] != pix[:-1]
    start_idx = np.maximum.accumulate(np.where(starts, idx, 0))
    ends = np.ones(n, dtype=bool)
    if n:
        ends[:-1] = pix[1:] != pix[:-1]
    end_idx = np.flip(np.minimum.accumulate(np.flip(np.where(ends, idx, n - 1))))

    def excl_prefix(x):
        cs = np.cumsum(x)
        csm1 = np.concatenate([[0.0], cs[:-1]])
        return csm1 - csm1[start_idx], cs, csm1

    w_lt, w_cs, w_csm1 = excl_prefix(omega)
    s_lt, s_cs, s_csm1 = excl_prefix(omega * t)
    w_total = w_cs[end_idx] - w_csm1[start_idx]
    s_total = s_cs[end_idx] - s_csm1[start_idx]
    w_gt = w_total - w_lt - omega
    s_gt = s_total - s_lt - omega * t
    return w_lt, s_lt, w_gt, s_gt


def depth_distortion_loss(contribs, n_pixels: int):
    """Mean over pixels of sum_{i<j} w_i w_j |t_i - t_j| plus gradients."""
    w_lt, s_lt, w_gt, s_gt = _segment_prefix_sums(contribs)
    omega, t = contribs.omega, contribs.t
    per_contrib = omega * (t * w_lt - s_lt)
    value = float(per_contrib.sum()) / n_pixels
    g_omega = (t * w_lt - s_lt + s_gt - t * w_gt) / n_pixels
    g_t = omega * (w_lt - w_gt) / n_pixels
    return value, g_omega, g_t


def normal_consistency_loss(contribs, n_cam_splat: np.ndarray, n_d: np.ndarray, n_pixels: int, n_splats: int):
    """Mean over pixels of sum_i w_i (1 - n_i . N_D); N_D is detached."""
    nd_flat = n_d.reshape(-1, 3)
    nd_c = nd_flat[contribs.pixel]
    dots = np.einsum("ci,ci->c", n_cam_splat[contribs.splat], nd_c)
    terms = contribs.omega * (1.0 - dots)
    value = float(terms.sum()) / n_pixels
    g_omega = (1.0 - dots) / n_pixels
    g_n = np.zeros((n_splats, 3))
    scaled = -(contribs.omega[:, None] * nd_c) / n_pixels
    for ax in range(3):
        g_n[:, ax] = np.bincount(contribs.splat, weights=scaled[:, ax], minlength=n_splats)
    return value, g_omega, g_n


def compute_loss(render_out: RenderOutput, appearance_pair, gt: np.ndarray,
                 weights: LossWeights, intrinsics=None, n_d: np.ndarray | None = None) -> LossBreakdown:
    """Composite loss breakdown; appearance_pair is (I_a, I_r)."""
    i_a, i_r = appearance_pair
    if i_a.shape != gt.shape or i_r.shape != gt.shape:
        raise ShapeMismatchError(f"image shapes differ: {i_a.shape} / {i_r.shape} / {gt.shape}")
    l1 = float(np.mean(np.abs(i_a - gt)))
    dssim = metrics.d_ssim(i_r, gt)
    color = l1 + weights.dssim * dssim

    n_pixels = gt.shape[0] * gt.shape[1]
    contribs = render_out.contribs
    if contribs is None or contribs.splat.size == 0:
        depth_term, normal_term = 0.0, 0.0
    else:
        depth_term, _, _ = depth_distortion_loss(contribs, n_pixels)
        if n_d is None:
            if intrinsics is None:
                raise ShapeMismatchError("normal loss needs camera intrinsics or a precomputed N_D")
            n_d = depth_to_normal(render_out.depth, intrinsics)
        n_cam = render_out.view.n_cam
        normal_term, _, _ = normal_consistency_loss(contribs, n_cam, n_d, n_pixels, n_cam.shape[0])
    total = color + weights.depth_distortion * depth_term + weights.normal_consistency * normal_term
    return LossBreakdown(total=total, color=color, depth=depth_term, normal=normal_term,
                         l1=l1, dssim=dssim)


@dataclass
class LossGraph:
    """Everything the backward pass needs from one training forward pass."""

    field: GaussianField
    camera: CameraView
    opts: RenderOptions
    gt: np.ndarray
    weights: LossWeights
    out: RenderOutput
    n_d: np.ndarray
    breakdown: LossBreakdown
    appearance: AppearanceModel | None
    image_id: object
    app_cache: dict | None
    i_a: np.ndarray


def forward_pass(field: GaussianField, camera: CameraView, gt: np.ndarray,
                 weights: LossWeights, opts: RenderOptions | None = None,
                 appearance: AppearanceModel | None = None, image_id=None,
                 fixed_n_d: np.ndarray | None = None) -> LossGraph:
    """Render, apply the appearance transform, and evaluate the full loss."""
    opts = opts or RenderOptions()
    opts = replace(opts, capture_contribs=True)
    out = render(field, camera, opts)
    i_r = out.color
    if appearance is not None:
        _, i_a, app_cache = appearance.forward(i_r, image_id)
    else:
        i_a, app_cache = i_r, None
    n_d = fixed_n_d if fixed_n_d is not None else depth_to_normal(out.depth, (camera.fx, camera.fy, camera.cx, camera.cy))
    breakdown = compute_loss(out, (i_a, i_r), gt, weights, n_d=n_d)
    return LossGraph(field=field, camera=camera, opts=opts, gt=gt, weights=weights,
                     out=out, n_d=n_d, breakdown=breakdown, appearance=appearance,
                     image_id=image_id, app_cache=app_cache, i_a=i_a)


def backward(graph: LossGraph):
    """Analytic gradients for splat parameters, appearance weights, and
    embeddings; returns (splat_grads, appearance_grads, densify_info)."""
    field, out, gt, weights = graph.field, graph.out, graph.gt, graph.weights
    n_pixels = gt.shape[0] * gt.shape[1]
    size = gt.size

    g_l1_on_adjusted = np.sign(graph.i_a - gt) / size
    _, g_dssim = metrics.d_ssim_with_grad(out.color, gt)

    app_grads = {}
    if graph.appearance is not None:
        g_m, g_direct = graph.appearance.apply_chain(graph.app_cache, g_l1_on_adjusted)
        g_net_input, app_grads = graph.appearance.backward(graph.app_cache, g_m)
        g_color = g_direct + g_net_input + weights.dssim * g_dssim
    else:
        g_color = g_l1_on_adjusted + weights.dssim * g_dssim

    contribs = out.contribs
    g_omega_extra = None
    g_t = None
    g_n_cam = None
    if contribs is not None and contribs.splat.size:
        _, g_omega_d, g_t_d = depth_distortion_loss(contribs, n_pixels)
        _, g_omega_n, g_n = normal_consistency_loss(
            contribs, out.view.n_cam, graph.n_d, n_pixels, field.n)
        g_omega_extra = weights.depth_distortion * g_omega_d + weights.normal_consistency * g_omega_n
        g_t = weights.depth_distortion * g_t_d
        g_n_cam = weights.normal_consistency * g_n

    splat_grads, densify_info = render_backward(
        field, graph.camera, out, g_color,
        g_omega_extra=g_omega_extra, g_t=g_t, g_n_cam=g_n_cam, opts=graph.opts)

    for name, arr in splat_grads.items():
        if not np.all(np.isfinite(arr)):
            raise GradientNaNError(f"non-finite gradient in splat group '{name}'")
    for name, arr in app_grads.items():
        if not np.all(np.isfinite(arr)):
            raise GradientNaNError(f"non-finite gradient in appearance parameter '{name}'")
    return splat_grads, app_grads, densify_info


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

class Adam:
    """Adam over a dict of parameter arrays with per-key learning rates."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict, grads: dict, lrs: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for key, g in grads.items():
            if key not in self.m:
                self.m[key] = np.zeros_like(params[key])
                self.v[key] = np.zeros_like(params[key])
            self.m[key] = self.beta1 * self.m[key] + (1 - self.beta1) * g
            self.v[key] = self.beta2 * self.v[key] + (1 - self.beta2) * g * g
            m_hat = self.m[key] / bc1
            v_hat = self.v[key] / bc2
            params[key] -= lrs[key] * m_hat / (np.sqrt(v_hat) + self.eps)

    def select_rows(self, keep) -> None:
        for key in self.m:
            self.m[key] = self.m[key][keep]
            self.v[key] = self.v[key][keep]

    def append_rows(self, counts: dict) -> None:
        for key, n_new in counts.items():
            if key in self.m and n_new:
                pad = [(0, n_new)] + [(0, 0)] * (self.m[key].ndim - 1)
                self.m[key] = np.pad(self.m[key], pad)
                self.v[key] = np.pad(self.v[key], pad)

    def zero_state(self, key) -> None:
        if key in self.m:
            self.m[key][:] = 0.0
            self.v[key][:] = 0.0


def center_lr(config: TrainConfig, scene_extent: float, iteration: int) -> float:
    frac = min(max(iteration, 0) / max(config.iterations, 1), 1.0)
    lr0 = config.lr_centers * scene_extent
    lr1 = config.lr_centers_final * scene_extent
    return float(lr0 * (lr1 / lr0) ** frac)


def splat_lrs(config: TrainConfig, scene_extent: float, iteration: int) -> dict:
    return {
        "centers": center_lr(config, scene_extent, iteration),
        "log_scales": config.lr_scale,
        "quats": config.lr_rotation,
        "opacity_logits": config.lr_opacity,
        "sh": config.lr_sh,
    }


# ---------------------------------------------------------------------------
# Density control
# ---------------------------------------------------------------------------

def densify_and_prune(field: GaussianField, stats: DensifyStats, config: TrainConfig,
                      iteration: int, rng: np.random.Generator,
                      optimizer: Adam | None = None) -> tuple[GaussianField, DensifyStats]:
    """Clone/split high-gradient splats, prune dead or oversized ones.

    Clones are nudged a fraction of their size along the descent direction;
    split children sample positions from the parent Gaussian with scales
    shrunk by the configured factor. Opacity-reset iterations clamp every
    opacity logit to the configured cap. Stats are reset afterwards.
    """
    n = field.n
    mean_grad = stats.grad_mag / np.maximum(stats.count, 1.0)
    trigger = (mean_grad >= config.grad_threshold) & (stats.count > 0)
    max_scale = np.exp(field.log_scales.max(axis=1))
    cutoff = config.densify_scale_cutoff * field.scene_extent
    clone_mask = trigger & (max_scale < cutoff)
    split_mask = trigger & (max_scale >= cutoff)

    params = {key: getattr(field, key) for key in SPLAT_KEYS}
    new_rows = {key: [] for key in SPLAT_KEYS}

    clone_idx = np.flatnonzero(clone_mask)
    if clone_idx.size:
        direction = stats.grad_dir[clone_idx]
        norms = np.linalg.norm(direction, axis=1, keepdims=True)
        direction = np.where(norms > 1e-12, direction / np.maximum(norms, 1e-12), 0.0)
        step_len = 0.3 * np.exp(field.log_scales[clone_idx].mean(axis=1, keepdims=True))
        new_rows["centers"].append(field.centers[clone_idx] - step_len * direction)
        for key in ("log_scales", "quats", "opacity_logits", "sh"):
            new_rows[key].append(params[key][clone_idx])

    split_idx = np.flatnonzero(split_mask)
    if split_idx.size:
        from .core import quat_to_rot

        rot = quat_to_rot(field.quats[split_idx])
        scale = np.exp(field.log_scales[split_idx])
        for _ in range(2):
            eps = rng.normal(size=(split_idx.size, 3))
            offsets = np.einsum("nij,nj->ni", rot, scale * eps)
            new_rows["centers"].append(field.centers[split_idx] + offsets)
            new_rows["log_scales"].append(field.log_scales[split_idx] - np.log(config.split_scale_shrink))
            new_rows["quats"].append(field.quats[split_idx])
            new_rows["opacity_logits"].append(field.opacity_logits[split_idx])
            new_rows["sh"].append(field.sh[split_idx])

    keep = np.ones(n, dtype=bool)
    keep[split_idx] = False  # split parents are removed
    opacity = sigmoid(field.opacity_logits)
    keep &= opacity >= config.prune_opacity
    keep &= max_scale <= config.prune_scale_ratio * field.scene_extent

    merged = {}
    for key in SPLAT_KEYS:
        parts = [params[key][keep]] + new_rows[key]
        merged[key] = np.concatenate(parts) if len(parts) > 1 else parts[0]
    n_new = merged["centers"].shape[0] - int(keep.sum())

    if optimizer is not None:
        optimizer.select_rows(keep)
        optimizer.append_rows({key: n_new for key in SPLAT_KEYS})

    new_field = GaussianField(
        centers=merged["centers"], log_scales=merged["log_scales"],
        quats=merged["quats"], opacity_logits=merged["opacity_logits"],
        sh=merged["sh"], sh_degree=field.sh_degree, scene_extent=field.scene_extent,
    )

    if config.opacity_reset_interval > 0 and iteration > 0 and iteration % config.opacity_reset_interval == 0:
        cap = inverse_sigmoid(config.opacity_reset_cap)
        new_field.opacity_logits = np.minimum(new_field.opacity_logits, cap)
        if optimizer is not None:
            optimizer.zero_state("opacity_logits")

    return new_field, DensifyStats.zeros(new_field.n)


# ---------------------------------------------------------------------------
# Field initialization and the training loop
# ---------------------------------------------------------------------------

def init_field_from_points(points: np.ndarray, colors: np.ndarray,
                           sh_degree: int, scene_extent: float) -> GaussianField:
    """One isotropic splat per sparse point: scale from the mean distance to
    the 3 nearest neighbors, opacity 0.1, DC color from the point color."""
    n = points.shape[0]
    if n == 0:
        raise ValueError("cannot initialize a field from zero points")
    if n > 1:
        tree = cKDTree(points)
        k = min(4, n)
        dist, _ = tree.query(points, k=k)
        mean_nn = dist[:, 1:].mean(axis=1)
        mean_nn = np.maximum(mean_nn, 1e-7 * scene_extent)
    else:
        mean_nn = np.full(1, 0.1 * scene_extent)
    sh = np.zeros((n, sh_coeff_count(sh_degree), 3))
    sh[:, 0, :] = (np.clip(colors, 0.0, 1.0) - 0.5) / SH_C0
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianField(
        centers=points.astype(np.float64).copy(),
        log_scales=np.log(mean_nn)[:, None].repeat(3, axis=1),
        quats=quats,
        opacity_logits=np.full(n, float(inverse_sigmoid(0.1))),
        sh=sh,
        sh_degree=sh_degree,
        scene_extent=scene_extent,
    )


@dataclass
class TrainView:
    camera: CameraView
    image: np.ndarray
    image_id: int


@dataclass
class TrainResult:
    field: GaussianField
    appearance: AppearanceModel | None
    history: list           # rows of (iteration, L, L_c, L_d, L_n)
    splat_counts: list      # (iteration, count) after each densification


def train_field(field: GaussianField, views: list[TrainView], config: TrainConfig,
                rng: np.random.Generator, appearance: AppearanceModel | None = None,
                log_every: int = 50) -> TrainResult:
    """Optimize a field (and optional appearance model) against its views."""
    field = field.copy()
    opts = RenderOptions(background=config.background, capture_contribs=True)
    splat_opt = Adam()
    app_opt = Adam() if appearance is not None else None
    stats = DensifyStats.zeros(field.n)
    history = []
    splat_counts = [(0, field.n)]

    order = rng.permutation(len(views))
    cursor = 0

    for iteration in range(config.iterations):
        if cursor >= len(order):
            order = rng.permutation(len(views))
            cursor = 0
        view = views[order[cursor]]
        cursor += 1

        graph = forward_pass(field, view.camera, view.image, config.weights,
                             opts=opts, appearance=appearance, image_id=view.image_id)
        if not np.isfinite(graph.breakdown.total):
            raise TrainDivergedError(
                f"non-finite loss at iteration {iteration}: {graph.breakdown}")
        splat_grads, app_grads, densify_info = backward(graph)

        params = {key: getattr(field, key) for key in SPLAT_KEYS}
        splat_opt.step(params, splat_grads, splat_lrs(config, field.scene_extent, iteration))
        if appearance is not None and app_grads:
            app_opt.step(appearance.params, app_grads,
                         {key: config.lr_appearance for key in app_grads})

        splat_idx, pixel_grads, jac = densify_info
        accumulate_view_gradient(stats, splat_idx, pixel_grads, jac)

        if iteration % log_every == 0 or iteration == config.iterations - 1:
            b = graph.breakdown
            history.append((iteration, b.total, b.color, b.depth, b.normal))

        step = iteration + 1
        if (config.densify_start <= step <= config.densify_stop
                and step % config.densify_interval == 0):
            field, stats = densify_and_prune(field, stats, config, step, rng, splat_opt)
            splat_counts.append((step, field.n))

    return TrainResult(field=field, appearance=appearance, history=history,
                       splat_counts=splat_counts)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "L", "L_c", "L_d", "L_n"])
        writer.writerows(history)


# ---------------------------------------------------------------------------
# Config serialization and the per-cell entry point
# ---------------------------------------------------------------------------

def config_to_dict(config: TrainConfig) -> dict:
    d = {k: v for k, v in vars(config).items() if k != "weights"}
    d["background"] = list(config.background)
    d["weights"] = vars(config.weights).copy()
    return d


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    weights = LossWeights(**d.pop("weights", {}))
    if "background" in d:
        d["background"] = tuple(d["background"])
    return TrainConfig(weights=weights, **d)


def train_cell(manifest: dict, scene, config: TrainConfig,
               rng: np.random.Generator, out_dir=None,
               use_appearance: bool = True) -> TrainResult:
    """Train one cell from its manifest: initialize a splat per final point,
    optimize against the cell's selected views, and optionally write
    field.ply / appearance.ckpt / losses.csv into out_dir."""
    from pathlib import Path

    from .appearance import save_checkpoint
    from .ingest import export_field

    point_idx = np.asarray(manifest["points_final"], dtype=np.int64)
    if point_idx.size == 0:
        raise ValueError(f"cell {manifest.get('cell')}: no points to initialize from")
    extent = scene.scene_extent()
    field = init_field_from_points(scene.points[point_idx],
                                   scene.point_colors[point_idx],
                                   config.sh_degree, extent)

    selected = set(manifest["cameras_selected"])
    views = []
    for cam in scene.cameras:
        if cam.image_id in selected:
            if cam.image is None:
                raise ValueError(f"camera {cam.image_id} has no loaded image")
            views.append(TrainView(camera=cam, image=cam.image, image_id=cam.image_id))
    if not views:
        raise ValueError(f"cell {manifest.get('cell')}: no training views selected")

    appearance = None
    if use_appearance:
        app_rng = np.random.default_rng(rng.integers(2 ** 31))
        appearance = AppearanceModel([v.image_id for v in views], rng=app_rng)

    result = train_field(field, views, config, rng, appearance=appearance)

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        export_field(result.field, out_dir / "field.ply")
        if appearance is not None:
            save_checkpoint(appearance, out_dir / "appearance.ckpt")
        write_history_csv(out_dir / "losses.csv", result.history)
    return result
