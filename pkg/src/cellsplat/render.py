"""Forward synthesis from a Gaussian field via ray-Gaussian intersection.

Each pixel ray gathers the splats whose peak contribution alpha*psi passes
the 1/255 gate, sorts them by peak depth t*, and composites front to back:

    w_k = a_k * prod_{j<k} (1 - a_j),   a_k = alpha_k * psi_k

Culling uses a conservative splat-to-tile binning that never drops a splat
the gate would keep, so the tiled path agrees with an exhaustive renderer
to float precision. Training mode captures per-pixel contribution lists
(splat, weight, depth) for the losses, and render_backward propagates
image- and contribution-level gradients to every splat parameter.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dataclass_field

import numpy as np
from scipy.special import expit as sigmoid

from .core import (
    GaussianField,
    eval_sh_color,
    quat_to_rot,
    quat_to_rot_with_jacobian,
    sh_basis,
    sh_basis_grad,
)
from .ingest import CameraView


@dataclass
class RenderOptions:
    background: tuple = (0.0, 0.0, 0.0)
    near: float = 0.01                 # peaks at t* <= near are discarded
    contrib_threshold: float = 1.0 / 255.0
    transmittance_min: float = 1e-4    # compositing terminates below this
    tile_size: int = 16
    capture_contribs: bool = False
    max_alpha: float = 1.0 - 1e-7      # keeps log1p(-a) finite


@dataclass
class PixelContribs:
    """Flat per-contribution arrays sorted by (pixel, t*, splat id)."""

    pixel: np.ndarray    # (C,) int32 flat pixel index
    splat: np.ndarray    # (C,) int32 splat index
    t: np.ndarray        # (C,) ray parameter of the peak
    psi: np.ndarray      # (C,)
    a: np.ndarray        # (C,) alpha * psi (unclamped)
    omega: np.ndarray    # (C,) blend weight
    trans: np.ndarray    # (C,) transmittance before the contribution
    offsets: np.ndarray  # (P+1,) contribution range per pixel
    t_bg: np.ndarray     # (P,) final transmittance per pixel


@dataclass
class RenderOutput:
    color: np.ndarray    # (H, W, 3)
    depth: np.ndarray    # (H, W) blended camera-Z
    normal: np.ndarray   # (H, W, 3) camera space, zero where empty
    alpha: np.ndarray    # (H, W) accumulated opacity
    contribs: PixelContribs | None = None
    view: "ViewCache | None" = dataclass_field(default=None, repr=False)


@dataclass
class ViewCache:
    """Per-(field, camera) quantities reused by the backward pass."""

    origin: np.ndarray      # (3,)
    dirs: np.ndarray        # (P, 3) unit world-space ray directions
    dz: np.ndarray          # (P,) camera-space z of the unit direction
    inv_scale: np.ndarray   # (N, 3)
    rot: np.ndarray         # (N, 3, 3)
    emat: np.ndarray        # (N, 3, 3) S^-1 R^T
    r_g: np.ndarray         # (N, 3) splat-frame origin offset
    quad6: np.ndarray       # (N, 6) packed E^T E for |E d|^2 as a quadratic form
    b3: np.ndarray          # (N, 3) E^T r_g, so r_g . (E d) = d . b3
    a0: np.ndarray          # (N,) |r_g|^2
    alpha: np.ndarray       # (N,)
    view_dir: np.ndarray    # (N, 3) camera-to-center unit vectors
    view_dist: np.ndarray   # (N,)
    basis: np.ndarray       # (N, K) SH basis at view_dir
    raw_rgb: np.ndarray     # (N, 3) pre-clamp SH color
    colors: np.ndarray      # (N, 3) clamped color
    normal_axis: np.ndarray  # (N,) shortest-scale axis index
    normal_sign: np.ndarray  # (N,)
    n_world: np.ndarray     # (N, 3)
    n_cam: np.ndarray       # (N, 3)
    proj_jac: np.ndarray    # (N, 2, 3) pinhole Jacobian of the center
    proj_pinv: np.ndarray   # (N, 2, 3) (J J^T)^-1 J


def camera_rays(camera: CameraView):
    """Unit world-space rays through pixel centers plus their camera-z."""
    xs = (np.arange(camera.width, dtype=np.float64) + 0.5 - camera.cx) / camera.fx
    ys = (np.arange(camera.height, dtype=np.float64) + 0.5 - camera.cy) / camera.fy
    gx, gy = np.meshgrid(xs, ys)
    d_cam = np.stack([gx, gy, np.ones_like(gx)], axis=-1).reshape(-1, 3)
    norms = np.linalg.norm(d_cam, axis=1, keepdims=True)
    d_cam /= norms
    dirs = d_cam @ camera.rotation  # row-vector form of R^T d_cam
    return camera.center, dirs, d_cam[:, 2].copy()


def _view_cache(field: GaussianField, camera: CameraView) -> ViewCache:
    origin, dirs, dz = camera_rays(camera)
    n = field.n
    rot = quat_to_rot(field.quats) if n else np.zeros((0, 3, 3))
    inv_scale = np.exp(-field.log_scales)
    emat = np.swapaxes(rot, 1, 2) * inv_scale[:, :, None] if n else np.zeros((0, 3, 3))
    offset = origin[None, :] - field.centers
    r_g = np.einsum("nij,nj->ni", emat, offset) if n else np.zeros((0, 3))
    alpha = sigmoid(field.opacity_logits)
    if n:
        gram = np.einsum("nki,nkj->nij", emat, emat)
        quad6 = np.stack([gram[:, 0, 0], gram[:, 1, 1], gram[:, 2, 2],
                          gram[:, 0, 1], gram[:, 0, 2], gram[:, 1, 2]], axis=1)
        b3 = np.einsum("nij,ni->nj", emat, r_g)
        a0 = np.einsum("ni,ni->n", r_g, r_g)
    else:
        quad6 = np.zeros((0, 6))
        b3 = np.zeros((0, 3))
        a0 = np.zeros(0)

    to_center = -offset
    dist = np.linalg.norm(to_center, axis=1)
    safe = np.maximum(dist, 1e-12)
    view_dir = to_center / safe[:, None]
    basis = sh_basis(view_dir, field.sh_degree) if n else np.zeros((0, 1))
    raw_rgb = np.einsum("nk,nkc->nc", basis, field.sh) + 0.5 if n else np.zeros((0, 3))
    colors = np.maximum(raw_rgb, 0.0)

    # Splat normal: shortest-scale axis, flipped to face the camera.
    axis = np.argmin(field.log_scales, axis=1) if n else np.zeros(0, dtype=int)
    n_world = rot[np.arange(n), :, axis] if n else np.zeros((0, 3))
    sign = np.where(np.einsum("ni,ni->n", n_world, to_center) > 0, -1.0, 1.0)
    n_world = n_world * sign[:, None]
    n_cam = n_world @ camera.rotation.T

    # Pinhole Jacobian of the projected center, for densification stats.
    p_cam = field.centers @ camera.rotation.T + camera.translation
    proj_jac = np.zeros((n, 2, 3))
    proj_pinv = np.zeros((n, 2, 3))
    if n:
        z = p_cam[:, 2]
        front = z > 1e-6
        zs = np.where(front, z, 1.0)
        jc = np.zeros((n, 2, 3))
        jc[:, 0, 0] = camera.fx / zs
        jc[:, 0, 2] = -camera.fx * p_cam[:, 0] / zs ** 2
        jc[:, 1, 1] = camera.fy / zs
        jc[:, 1, 2] = -camera.fy * p_cam[:, 1] / zs ** 2
        proj_jac = np.einsum("nij,jk->nik", jc, camera.rotation)
        proj_jac[~front] = 0.0
        jjt = np.einsum("nij,nkj->nik", proj_jac, proj_jac)
        det = jjt[:, 0, 0] * jjt[:, 1, 1] - jjt[:, 0, 1] * jjt[:, 1, 0]
        ok = front & (np.abs(det) > 1e-18)
        inv = np.zeros_like(jjt)
        d_safe = np.where(ok, det, 1.0)
        inv[:, 0, 0] = jjt[:, 1, 1] / d_safe
        inv[:, 1, 1] = jjt[:, 0, 0] / d_safe
        inv[:, 0, 1] = -jjt[:, 0, 1] / d_safe
        inv[:, 1, 0] = -jjt[:, 1, 0] / d_safe
        proj_pinv = np.einsum("nij,njk->nik", inv, proj_jac)
        proj_pinv[~ok] = 0.0

    return ViewCache(
        origin=origin, dirs=dirs, dz=dz,
        inv_scale=inv_scale, rot=rot, emat=emat, r_g=r_g,
        quad6=quad6, b3=b3, a0=a0, alpha=alpha,
        view_dir=view_dir, view_dist=dist, basis=basis, raw_rgb=raw_rgb,
        colors=colors, normal_axis=axis, normal_sign=sign,
        n_world=n_world, n_cam=n_cam, proj_jac=proj_jac, proj_pinv=proj_pinv,
    )


def _tile_candidates(field, camera, cache, opts):
    """Conservative (tile -> splat list) binning.

    A splat is bound to every tile its cutoff sphere may project into; the
    cutoff radius is derived from the same alpha*psi >= threshold gate, so
    binning can only add candidates, never lose a passing contribution.
    """
    ts = opts.tile_size
    n_tx = (camera.width + ts - 1) // ts
    n_ty = (camera.height + ts - 1) // ts
    n = field.n
    p_cam = field.centers @ camera.rotation.T + camera.translation

    keep = np.ones(n, dtype=bool)
    everywhere = np.zeros(n, dtype=bool)
    if opts.contrib_threshold > 0:
        ratio = cache.alpha / opts.contrib_threshold
        keep = ratio > 1.0
        sigma_max = np.exp(field.log_scales.max(axis=1))
        r_cut = sigma_max * np.sqrt(2.0 * np.log(np.maximum(ratio, 1.0 + 1e-12)))
    else:
        r_cut = np.full(n, np.inf)
        everywhere = np.ones(n, dtype=bool)

    bbox = np.zeros((n, 4))
    finite = keep & ~everywhere
    if np.any(finite):
        idx = np.flatnonzero(finite)
        centers = p_cam[idx]
        rad = r_cut[idx]
        near_cross = centers[:, 2] - rad <= opts.near
        far_idx = idx[~near_cross]
        everywhere[idx[near_cross]] = True
        if far_idx.size:
            c = p_cam[far_idx]
            r = r_cut[far_idx]
            offs = np.array([[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)], dtype=np.float64)
            corners = c[:, None, :] + offs[None, :, :] * r[:, None, None]
            px = camera.fx * corners[:, :, 0] / corners[:, :, 2] + camera.cx
            py = camera.fy * corners[:, :, 1] / corners[:, :, 2] + camera.cy
            bbox[far_idx, 0] = px.min(axis=1)
            bbox[far_idx, 1] = px.max(axis=1)
            bbox[far_idx, 2] = py.min(axis=1)
            bbox[far_idx, 3] = py.max(axis=1)

    tile_lists = []
    for ty in range(n_ty):
        for tx in range(n_tx):
            x0, x1 = tx * ts, min((tx + 1) * ts, camera.width)
            y0, y1 = ty * ts, min((ty + 1) * ts, camera.height)
            finite_hit = finite & ~everywhere
            sel = everywhere.copy()
            sel |= finite_hit & (bbox[:, 0] <= x1) & (bbox[:, 1] >= x0) & (bbox[:, 2] <= y1) & (bbox[:, 3] >= y0)
            sel &= keep
            tile_lists.append(((y0, y1, x0, x1), np.flatnonzero(sel)))
    return tile_lists


def _composite(pix, splat, t, psi, a, n_pixels, opts):
    """Sort contributions and run front-to-back alpha blending.

    Returns the filtered, sorted PixelContribs (termination applied).
    """
    order = np.lexsort((splat, t, pix))
    pix, splat, t, psi, a = pix[order], splat[order], t[order], psi[order], a[order]

    a_cl = np.minimum(a, opts.max_alpha)
    log1m = np.log1p(-a_cl)
    cs = np.cumsum(log1m)
    csm1 = np.concatenate([[0.0], cs[:-1]])
    starts = np.ones(pix.size, dtype=bool)
    starts[1:] = pix[1:] != pix[:-1]
    start_idx = np.maximum.accumulate(np.where(starts, np.arange(pix.size), 0))
    seg_base = csm1[start_idx]
    trans = np.exp(csm1 - seg_base)

    if opts.transmittance_min > 0:
        kept = trans >= opts.transmittance_min
        pix, splat, t, psi, a, a_cl, trans = (
            arr[kept] for arr in (pix, splat, t, psi, a, a_cl, trans))

    omega = a_cl * trans
    offsets = np.searchsorted(pix, np.arange(n_pixels + 1))
    t_bg = np.ones(n_pixels)
    if pix.size:
        ends = np.ones(pix.size, dtype=bool)
        ends[:-1] = pix[1:] != pix[:-1]
        t_bg[pix[ends]] = trans[ends] * (1.0 - a_cl[ends])
    return PixelContribs(
        pixel=pix.astype(np.int64), splat=splat.astype(np.int64), t=t, psi=psi,
        a=a, omega=omega, trans=trans, offsets=offsets, t_bg=t_bg)


def render(field: GaussianField, camera: CameraView, opts: RenderOptions | None = None) -> RenderOutput:
    """Render color, depth, normal and alpha images for one camera."""
    opts = opts or RenderOptions()
    h, w = camera.height, camera.width
    n_pixels = h * w
    cache = _view_cache(field, camera)
    bg = np.asarray(opts.background, dtype=np.float64)

    pix_parts, splat_parts, t_parts, psi_parts = [], [], [], []
    if field.n:
        pixel_index = np.arange(n_pixels, dtype=np.int64).reshape(h, w)
        d = cache.dirs
        # |E d|^2 as a quadratic form: one (P,6) feature row per ray
        feats = np.stack([
            d[:, 0] * d[:, 0], d[:, 1] * d[:, 1], d[:, 2] * d[:, 2],
            2 * d[:, 0] * d[:, 1], 2 * d[:, 0] * d[:, 2], 2 * d[:, 1] * d[:, 2],
        ], axis=1)
        # conservative Mahalanobis prefilter; the exact a >= threshold gate
        # is re-applied after the exp so the fast path matches brute force
        with np.errstate(divide="ignore"):
            m_cut = (2.0 * np.log(cache.alpha / opts.contrib_threshold)
                     if opts.contrib_threshold > 0 else np.full(field.n, np.inf))
        for (y0, y1, x0, x1), cand in _tile_candidates(field, camera, cache, opts):
            if cand.size == 0:
                continue
            pix_tile = pixel_index[y0:y1, x0:x1].ravel()
            b = d[pix_tile] @ cache.b3[cand].T        # (P, K) r_g . d_g
            c = feats[pix_tile] @ cache.quad6[cand].T  # (P, K) |d_g|^2
            ok = c > 1e-12
            c_safe = np.where(ok, c, 1.0)
            t_star = -b / c_safe
            m = cache.a0[cand][None, :] - b * b / c_safe
            hit = ok & (t_star > opts.near) & (m <= m_cut[cand][None, :] + 1e-9)
            pi, ki = np.nonzero(hit)
            psi = np.exp(-0.5 * np.maximum(m[pi, ki], 0.0))
            a = cache.alpha[cand[ki]] * psi
            keep = a >= max(opts.contrib_threshold, 1e-300)
            pix_parts.append(pix_tile[pi[keep]])
            splat_parts.append(cand[ki[keep]])
            t_parts.append(t_star[pi[keep], ki[keep]])
            psi_parts.append(psi[keep])

    if pix_parts:
        pix = np.concatenate(pix_parts)
        splat = np.concatenate(splat_parts)
        t = np.concatenate(t_parts)
        psi = np.concatenate(psi_parts)
    else:
        pix = np.zeros(0, dtype=np.int64)
        splat = np.zeros(0, dtype=np.int64)
        t = psi = np.zeros(0)
    a = cache.alpha[splat] * psi if splat.size else np.zeros(0)
    contribs = _composite(pix, splat, t, psi, a, n_pixels, opts)

    pixw = contribs.omega
    pid = contribs.pixel
    alpha_img = np.bincount(pid, weights=pixw, minlength=n_pixels)
    color_img = np.empty((n_pixels, 3))
    for ch in range(3):
        color_img[:, ch] = np.bincount(pid, weights=pixw * cache.colors[contribs.splat, ch], minlength=n_pixels)
    color_img += contribs.t_bg[:, None] * bg[None, :]

    depth_ray = np.bincount(pid, weights=pixw * contribs.t, minlength=n_pixels)
    depth_img = depth_ray / np.maximum(alpha_img, 1e-8) * cache.dz

    normal_img = np.empty((n_pixels, 3))
    for ch in range(3):
        normal_img[:, ch] = np.bincount(pid, weights=pixw * cache.n_cam[contribs.splat, ch], minlength=n_pixels)
    norms = np.linalg.norm(normal_img, axis=1)
    normal_img = np.where(norms[:, None] > 1e-12, normal_img / np.maximum(norms, 1e-12)[:, None], 0.0)

    return RenderOutput(
        color=color_img.reshape(h, w, 3),
        depth=depth_img.reshape(h, w),
        normal=normal_img.reshape(h, w, 3),
        alpha=alpha_img.reshape(h, w),
        contribs=contribs if opts.capture_contribs else None,
        view=cache,
    )


def _alpha_chain(contribs: PixelContribs, g_omega: np.ndarray, g_tbg: np.ndarray, max_alpha: float):
    """dL/da_k for front-to-back weights given dL/dw_k and dL/dT_bg.

    Uses per-pixel suffix sums: moving a_k also rescales every later weight
    and the final transmittance in its pixel.
    """
    a_cl = np.minimum(contribs.a, max_alpha)
    q = g_omega * contribs.omega
    cum = np.cumsum(q)
    n = q.size
    starts = np.ones(n, dtype=bool)
    starts[1:] = contribs.pixel[1:] != contribs.pixel[:-1]
    start_idx = np.maximum.accumulate(np.where(starts, np.arange(n), 0))
    ends = np.ones(n, dtype=bool)
    if n:
        ends[:-1] = contribs.pixel[1:] != contribs.pixel[:-1]
    end_idx = np.flip(np.minimum.accumulate(np.flip(np.where(ends, np.arange(n), n - 1))))
    seg_total = cum[end_idx]
    suffix = seg_total - cum  # sum over j > k within the pixel

    tbg_term = g_tbg[contribs.pixel] * contribs.t_bg[contribs.pixel]
    da = g_omega * contribs.trans - (suffix + tbg_term) / (1.0 - a_cl)
    da[contribs.a >= max_alpha] = 0.0
    return da


def render_backward(
    field: GaussianField,
    camera: CameraView,
    out: RenderOutput,
    g_color: np.ndarray,
    g_omega_extra: np.ndarray | None = None,
    g_t: np.ndarray | None = None,
    g_n_cam: np.ndarray | None = None,
    opts: RenderOptions | None = None,
):
    """Analytic gradients of a scalar loss w.r.t. all splat parameters.

    g_color is dL/d(color image); g_omega_extra and g_t are per-contribution
    gradients (aligned with out.contribs) from losses that consume blend
    weights and depths directly; g_n_cam is dL/d(camera-space splat normal),
    already accumulated per splat. Returns (grads dict, densify info) where
    densify info carries the per-pixel screen-space gradient pieces for the
    densification statistics, computed from the color-image chain alone.
    """
    opts = opts or RenderOptions()
    contribs = out.contribs
    cache = out.view
    if contribs is None or cache is None:
        raise ValueError("render_backward needs capture_contribs=True output")
    n = field.n
    k_sh = field.sh.shape[1]
    grads = {
        "centers": np.zeros((n, 3)),
        "log_scales": np.zeros((n, 3)),
        "quats": np.zeros((n, 4)),
        "opacity_logits": np.zeros(n),
        "sh": np.zeros((n, k_sh, 3)),
    }
    cidx = contribs.splat
    npix = g_color.reshape(-1, 3).shape[0]
    gc_flat = g_color.reshape(-1, 3)
    bg = np.asarray(opts.background, dtype=np.float64)

    if cidx.size == 0:
        empty = (np.zeros(0, dtype=np.int64), np.zeros((0, 2)), cache.proj_jac)
        if g_n_cam is not None:
            _normal_chain(field, camera, cache, g_n_cam, grads)
        return grads, empty

    gc_contrib = gc_flat[contribs.pixel]  # (C, 3)
    colors_c = cache.colors[cidx]
    g_omega_color = np.einsum("ci,ci->c", gc_contrib, colors_c - bg[None, :])
    g_tbg = gc_flat @ bg  # (P,)

    g_omega_total = g_omega_color.copy()
    if g_omega_extra is not None:
        g_omega_total += g_omega_extra

    da_total = _alpha_chain(contribs, g_omega_total, g_tbg, opts.max_alpha)
    da_color = _alpha_chain(contribs, g_omega_color, g_tbg, opts.max_alpha)

    alpha_c = cache.alpha[cidx]
    dpsi = da_total * alpha_c
    dalpha = da_total * contribs.psi
    sig = cache.alpha
    grads["opacity_logits"] = np.bincount(cidx, weights=dalpha, minlength=n) * sig * (1.0 - sig)

    # Recompute splat-frame ray geometry for the touched pairs.
    dirs_c = cache.dirs[contribs.pixel]
    emat_c = cache.emat[cidx]
    r_g_c = cache.r_g[cidx]
    d_g_c = np.einsum("cij,cj->ci", emat_c, dirs_c)
    b = np.einsum("ci,ci->c", r_g_c, d_g_c)
    c = np.einsum("ci,ci->c", d_g_c, d_g_c)
    c = np.maximum(c, 1e-12)
    psi = contribs.psi

    gt = np.zeros_like(b) if g_t is None else g_t
    bc = b / c
    dr = (dpsi * psi)[:, None] * (-r_g_c + bc[:, None] * d_g_c) + (gt / -c)[:, None] * d_g_c
    dd = (dpsi * psi * bc)[:, None] * (r_g_c - bc[:, None] * d_g_c) + gt[:, None] * (-r_g_c / c[:, None] + (2 * bc / c)[:, None] * d_g_c)

    # Centers via the psi/t chain: r_g = E (o - u)  =>  dL/du = -E^T dL/dr_g.
    du_c = -np.einsum("cji,cj->ci", emat_c, dr)
    for ax in range(3):
        grads["centers"][:, ax] += np.bincount(cidx, weights=du_c[:, ax], minlength=n)

    # Log-scales: each splat-frame coordinate scales by exp(-s_i).
    ds_c = -(dr * r_g_c + dd * d_g_c)
    for ax in range(3):
        grads["log_scales"][:, ax] += np.bincount(cidx, weights=ds_c[:, ax], minlength=n)

    # Rotation: dL/dR = w (s^-1 . dr)^T + d (s^-1 . dd)^T, w = o - u.
    w_c = cache.origin[None, :] - field.centers[cidx]
    inv_s_c = cache.inv_scale[cidx]
    dR = w_c[:, :, None] * (inv_s_c * dr)[:, None, :] + dirs_c[:, :, None] * (inv_s_c * dd)[:, None, :]
    dR_splat = np.zeros((n, 3, 3))
    flat = dR.reshape(-1, 9)
    for comp in range(9):
        dR_splat.reshape(-1, 9)[:, comp] = np.bincount(cidx, weights=flat[:, comp], minlength=n)

    # SH colors and the view-direction chain back to the center.
    dcol = gc_contrib * contribs.omega[:, None]  # dL/d(clamped color) per contribution
    dcol_splat = np.zeros((n, 3))
    for ch in range(3):
        dcol_splat[:, ch] = np.bincount(cidx, weights=dcol[:, ch], minlength=n)
    clamp_mask = (cache.raw_rgb > 0.0).astype(np.float64)
    draw = dcol_splat * clamp_mask
    grads["sh"] += cache.basis[:, :, None] * draw[:, None, :]
    if field.sh_degree > 0:
        bgrad = sh_basis_grad(cache.view_dir, field.sh_degree)  # (N, K, 3)
        coef_dot = np.einsum("nkc,nc->nk", field.sh, draw)
        ddir = np.einsum("nk,nkd->nd", coef_dot, bgrad)
        proj = np.eye(3)[None] - cache.view_dir[:, :, None] * cache.view_dir[:, None, :]
        grads["centers"] += np.einsum("nij,nj->ni", proj, ddir) / np.maximum(cache.view_dist, 1e-12)[:, None]

    # Normal chain (adds into dR_splat) and quaternion Jacobian.
    if g_n_cam is not None:
        g_n_world = g_n_cam @ camera.rotation
        rows = np.arange(n)
        dR_splat[rows, :, cache.normal_axis] += cache.normal_sign[:, None] * g_n_world
    _, qjac = quat_to_rot_with_jacobian(field.quats)
    grads["quats"] += np.einsum("nijk,nij->nk", qjac, dR_splat)

    # Densification stat pieces from the color chain only.
    dpsi_col = da_color * alpha_c
    dr_col = (dpsi_col * psi)[:, None] * (-r_g_c + bc[:, None] * d_g_c)
    h_v = -np.einsum("cji,cj->ci", emat_c, dr_col)
    g2 = np.einsum("cij,cj->ci", cache.proj_pinv[cidx], h_v)
    return grads, (cidx, g2, cache.proj_jac)


def _normal_chain(field, camera, cache, g_n_cam, grads):
    n = field.n
    if n == 0:
        return
    g_n_world = g_n_cam @ camera.rotation
    dR_splat = np.zeros((n, 3, 3))
    rows = np.arange(n)
    dR_splat[rows, :, cache.normal_axis] += cache.normal_sign[:, None] * g_n_world
    _, qjac = quat_to_rot_with_jacobian(field.quats)
    grads["quats"] += np.einsum("nijk,nij->nk", qjac, dR_splat)


def save_raw(path, array: np.ndarray) -> None:
    """Raw float dump: ASCII header 'H W C' then little-endian float32."""
    arr = np.asarray(array, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{h} {w} {c}\n".encode("ascii"))
        fh.write(arr.astype("<f4").tobytes())


def load_raw(path) -> np.ndarray:
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        h, w, c = (int(v) for v in header)
        data = np.frombuffer(fh.read(), dtype="<f4", count=h * w * c)
    arr = data.reshape(h, w, c).astype(np.float64)
    return arr[:, :, 0] if c == 1 else arr


def depth_to_normal(depth: np.ndarray, intrinsics) -> np.ndarray:
    """Camera-space normals from the gradient of a camera-Z depth map.

    intrinsics is (fx, fy, cx, cy). Back-projects pixel centers, takes
    central differences (one-sided at borders), and orients normals against
    the viewing direction. Zero-depth pixels produce zero normals.
    """
    fx, fy, cx, cy = intrinsics
    h, w = depth.shape
    us = (np.arange(w, dtype=np.float64) + 0.5 - cx) / fx
    vs = (np.arange(h, dtype=np.float64) + 0.5 - cy) / fy
    gu, gv = np.meshgrid(us, vs)
    pts = np.stack([gu * depth, gv * depth, depth], axis=-1)

    dpdv = np.gradient(pts, axis=0)
    dpdu = np.gradient(pts, axis=1)
    normal = np.cross(dpdu, dpdv)
    norms = np.linalg.norm(normal, axis=-1)
    normal = np.where(norms[..., None] > 1e-12, normal / np.maximum(norms, 1e-12)[..., None], 0.0)

    view = np.stack([gu, gv, np.ones_like(gu)], axis=-1)
    flip = np.sum(normal * view, axis=-1) > 0
    normal[flip] = -normal[flip]
    normal[depth <= 0.0] = 0.0
    return normal
