"""ConvKAN decoupled appearance model.

Training-only module that turns a rendered image plus a per-image embedding
into a pixel-wise transformation map M in (0,1); the adjusted image is
I_a = clamp(I_r * 2M, 0, 1), which is the identity when the network output
sits at sigmoid(0) = 0.5. The stack: average-pool the rendered image by
2^D, concatenate the broadcast embedding, an initial 3x3 convolution,
D stride-2 convolution blocks (SiLU), one KAN convolution where every
kernel tap is a learnable cubic-spline function, sigmoid, and bilinear
upsampling back to full resolution.

Everything is ordinary numpy with explicit backward passes so the whole
pipeline stays finite-difference checkable in double precision.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.special import expit as sigmoid


class ShapeError(ValueError):
    pass


class MissingEmbeddingError(KeyError):
    pass


def silu(x):
    return x * sigmoid(x)


def silu_grad(x):
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def bspline_bases(x: np.ndarray, grid_size: int, with_deriv: bool = False):
    """Cubic B-spline basis values on a uniform grid over [-1, 1].

    Returns (..., grid_size + 3); inputs are assumed already clamped.
    """
    h = 2.0 / grid_size
    knots = -1.0 + h * np.arange(-3, grid_size + 4)
    xe = x[..., None]
    b = ((xe >= knots[:-1]) & (xe < knots[1:])).astype(np.float64)
    deriv = None
    for k in range(1, 4):
        if with_deriv and k == 3:
            deriv = (b[..., :-1] - b[..., 1:]) / h
        left = (xe - knots[: -(k + 1)]) / (knots[k:-1] - knots[: -(k + 1)]) * b[..., :-1]
        right = (knots[k + 1:] - xe) / (knots[k + 1:] - knots[1:-k]) * b[..., 1:]
        b = left + right
    return (b, deriv) if with_deriv else b


def _windows(x: np.ndarray, stride: int):
    """3x3 zero-padded sliding windows of (C, H, W): (C, Ho, Wo, 3, 3)."""
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ho = (h + 2 - 3) // stride + 1
    wo = (w + 2 - 3) // stride + 1
    s = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp, shape=(c, ho, wo, 3, 3),
        strides=(s[0], s[1] * stride, s[2] * stride, s[1], s[2]),
        writeable=False,
    ), (h, w)


def _scatter_windows(g_win: np.ndarray, hw, stride: int):
    """Adjoint of _windows: accumulate window gradients back to (C, H, W)."""
    h, w = hw
    c, ho, wo = g_win.shape[:3]
    gxp = np.zeros((c, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            gxp[:, dy:dy + ho * stride:stride, dx:dx + wo * stride:stride] += g_win[:, :, :, dy, dx]
    return gxp[:, 1:-1, 1:-1]


class Conv3x3:
    """Plain 3x3 convolution, zero padding, configurable stride."""

    def __init__(self, name, in_ch, out_ch, stride=1):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.stride = stride

    def init_params(self, params, rng=None):
        scale = 1.0 / np.sqrt(self.in_ch * 9)
        w = rng.normal(scale=scale, size=(self.out_ch, self.in_ch, 3, 3)) if rng is not None else np.zeros((self.out_ch, self.in_ch, 3, 3))
        params[f"{self.name}.weight"] = w
        params[f"{self.name}.bias"] = np.zeros(self.out_ch)

    def forward(self, params, x):
        if x.shape[0] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[0]}")
        win, hw = _windows(x, self.stride)
        w = params[f"{self.name}.weight"]
        y = np.einsum("chwkl,ockl->ohw", win, w) + params[f"{self.name}.bias"][:, None, None]
        return y, (win, hw)

    def backward(self, params, cache, gy, grads):
        win, hw = cache
        w = params[f"{self.name}.weight"]
        grads[f"{self.name}.weight"] = np.einsum("ohw,chwkl->ockl", gy, win)
        grads[f"{self.name}.bias"] = gy.sum(axis=(1, 2))
        g_win = np.einsum("ohw,ockl->chwkl", gy, w)
        return _scatter_windows(g_win, hw, self.stride)


class KanConv3x3:
    """3x3 convolution whose kernel entries are learnable univariate
    functions: phi(v) = w_b * silu(v) + sum_g c_g B_g(clamp(v, -1, 1))."""

    def __init__(self, name, in_ch, out_ch, grid_size=5):
        self.name = name
        self.in_ch = in_ch
        self.out_ch = out_ch
        self.grid_size = grid_size
        self.n_bases = grid_size + 3

    def init_params(self, params, rng=None, scale=0.0):
        shape_b = (self.out_ch, self.in_ch, 3, 3)
        shape_s = shape_b + (self.n_bases,)
        if rng is not None and scale > 0:
            params[f"{self.name}.base"] = rng.normal(scale=scale, size=shape_b)
            params[f"{self.name}.spline"] = rng.normal(scale=scale, size=shape_s)
        else:
            params[f"{self.name}.base"] = np.zeros(shape_b)
            params[f"{self.name}.spline"] = np.zeros(shape_s)

    def forward(self, params, x):
        if x.shape[0] != self.in_ch:
            raise ShapeError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[0]}")
        win, hw = _windows(x, 1)
        v = np.ascontiguousarray(win)
        vc = np.clip(v, -1.0, 1.0)
        bases = bspline_bases(vc, self.grid_size)
        sv = silu(v)
        wb = params[f"{self.name}.base"]
        ws = params[f"{self.name}.spline"]
        y = np.einsum("chwkl,ockl->ohw", sv, wb)
        y += np.einsum("chwklg,ocklg->ohw", bases, ws)
        return y, (v, vc, hw)

    def backward(self, params, cache, gy, grads):
        v, vc, hw = cache
        bases, dbases = bspline_bases(vc, self.grid_size, with_deriv=True)
        sv = silu(v)
        wb = params[f"{self.name}.base"]
        ws = params[f"{self.name}.spline"]
        grads[f"{self.name}.base"] = np.einsum("ohw,chwkl->ockl", gy, sv)
        grads[f"{self.name}.spline"] = np.einsum("ohw,chwklg->ocklg", gy, bases)

        g_v = silu_grad(v) * np.einsum("ohw,ockl->chwkl", gy, wb)
        in_range = ((v > -1.0) & (v < 1.0)).astype(np.float64)
        spline_g = np.einsum("ohw,ocklg->chwklg", gy, ws)
        g_v += in_range * np.einsum("chwklg,chwklg->chwkl", spline_g, dbases)
        return _scatter_windows(g_v, hw, 1)


def _avg_pool(x: np.ndarray, factor: int):
    """Edge-padded average pooling by an integer factor; returns (y, cache)."""
    c, h, w = x.shape
    hp = -(-h // factor) * factor
    wp = -(-w // factor) * factor
    xp = np.pad(x, ((0, 0), (0, hp - h), (0, wp - w)), mode="edge")
    y = xp.reshape(c, hp // factor, factor, wp // factor, factor).mean(axis=(2, 4))
    return y, (h, w, hp, wp)


def _avg_pool_backward(gy: np.ndarray, cache, factor: int):
    h, w, hp, wp = cache
    c = gy.shape[0]
    g = np.repeat(np.repeat(gy, factor, axis=1), factor, axis=2) / (factor * factor)
    g[:, h - 1, :] += g[:, h:, :].sum(axis=1)
    g = g[:, :h, :]
    g[:, :, w - 1] += g[:, :, w:].sum(axis=2)
    return g[:, :, :w]


def _bilinear_weights(n_src: int, n_dst: int):
    src = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
    src = np.clip(src, 0.0, n_src - 1.0)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_src - 1)
    w1 = src - i0
    return i0, i1, 1.0 - w1, w1


def _upsample_bilinear(x: np.ndarray, out_hw):
    c, h, w = x.shape
    oh, ow = out_hw
    r0, r1, wr0, wr1 = _bilinear_weights(h, oh)
    c0, c1, wc0, wc1 = _bilinear_weights(w, ow)
    rows = x[:, r0, :] * wr0[None, :, None] + x[:, r1, :] * wr1[None, :, None]
    y = rows[:, :, c0] * wc0[None, None, :] + rows[:, :, c1] * wc1[None, None, :]
    return y, (h, w, r0, r1, wr0, wr1, c0, c1, wc0, wc1)


def _upsample_bilinear_backward(gy: np.ndarray, cache):
    h, w, r0, r1, wr0, wr1, c0, c1, wc0, wc1 = cache
    cch = gy.shape[0]
    g_rows = np.zeros((cch, gy.shape[1], w))
    np.add.at(g_rows, (slice(None), slice(None), c0), gy * wc0[None, None, :])
    np.add.at(g_rows, (slice(None), slice(None), c1), gy * wc1[None, None, :])
    gx = np.zeros((cch, h, w))
    np.add.at(gx, (slice(None), r0, slice(None)), g_rows * wr0[None, :, None])
    np.add.at(gx, (slice(None), r1, slice(None)), g_rows * wr1[None, :, None])
    return gx


@dataclass
class AppearanceConfig:
    embed_dim: int = 64
    channels: int = 32
    n_downsample: int = 5
    kan_grid: int = 5


class AppearanceModel:
    """Per-image embedding plus the ConvKAN map network.

    Parameters live in a flat name->array dict so the optimizer and the
    checkpoint format can treat them uniformly. Zero initialization makes
    the transform an exact identity; the default initialization randomizes
    the hidden convolutions but keeps the final KAN layer at zero, which
    also yields M = 0.5 at the first step.
    """

    def __init__(self, image_ids, config: AppearanceConfig | None = None, rng=None, init="default"):
        self.config = config or AppearanceConfig()
        c = self.config
        self.layers = [Conv3x3("conv0", 3 + c.embed_dim, c.channels)]
        self.layers += [Conv3x3(f"down{i}", c.channels, c.channels, stride=2) for i in range(c.n_downsample)]
        self.kan = KanConv3x3("kan", c.channels, 3, grid_size=c.kan_grid)
        self.params: dict[str, np.ndarray] = {}
        hidden_rng = rng if init == "default" else None
        for layer in self.layers:
            layer.init_params(self.params, hidden_rng)
        self.kan.init_params(self.params)
        for image_id in image_ids:
            self.params[f"embed.{image_id}"] = np.zeros(c.embed_dim)

    def randomize(self, rng, scale=0.1):
        """Perturb every parameter; used by gradient tests."""
        for key in self.params:
            self.params[key] = self.params[key] + rng.normal(scale=scale, size=self.params[key].shape)

    def embedding_key(self, image_id) -> str:
        key = f"embed.{image_id}"
        if key not in self.params:
            raise MissingEmbeddingError(f"no embedding for image id {image_id}")
        return key

    def forward(self, image: np.ndarray, image_id):
        """image (H, W, 3) -> (map M (H, W, 3), I_a (H, W, 3), cache)."""
        key = self.embedding_key(image_id)
        h, w = image.shape[:2]
        factor = 2 ** self.config.n_downsample
        x_img = image.transpose(2, 0, 1)
        pooled, pool_cache = _avg_pool(x_img, factor)
        emb = self.params[key]
        emb_map = np.broadcast_to(emb[:, None, None], (emb.size,) + pooled.shape[1:])
        x = np.concatenate([pooled, emb_map], axis=0)

        caches = []
        acts = []
        for layer in self.layers:
            y, cache = layer.forward(self.params, x)
            caches.append(cache)
            acts.append(y)
            x = silu(y)
        y_kan, kan_cache = self.kan.forward(self.params, x)
        m_low = sigmoid(y_kan)
        m_up, up_cache = _upsample_bilinear(m_low, (h, w))
        m = m_up.transpose(1, 2, 0)
        adjusted = np.clip(image * (2.0 * m), 0.0, 1.0)
        cache = {
            "key": key, "pool": pool_cache, "caches": caches, "acts": acts,
            "kan": kan_cache, "m_low": m_low, "up": up_cache,
            "image": image, "m": m, "factor": factor, "pooled_shape": pooled.shape,
        }
        return m, adjusted, cache

    def backward(self, cache, g_m: np.ndarray):
        """Gradient of a scalar loss given dL/dM; returns
        (dL/d(input image) through the network path, grads dict)."""
        grads = {}
        g_up = g_m.transpose(2, 0, 1)
        g_low = _upsample_bilinear_backward(g_up, cache["up"])
        m_low = cache["m_low"]
        g_kan = g_low * m_low * (1.0 - m_low)
        gx = self.kan.backward(self.params, cache["kan"], g_kan, grads)
        for layer, layer_cache, act in zip(reversed(self.layers), reversed(cache["caches"]), reversed(cache["acts"])):
            gx = gx * silu_grad(act)
            gx = layer.backward(self.params, layer_cache, gx, grads)
        n_emb = self.params[cache["key"]].size
        grads[cache["key"]] = gx[3:3 + n_emb].sum(axis=(1, 2))
        g_pooled = gx[:3]
        g_image = _avg_pool_backward(g_pooled, cache["pool"], cache["factor"])
        return g_image.transpose(1, 2, 0), grads

    def apply_chain(self, cache, g_adjusted: np.ndarray):
        """Split dL/dI_a into (dL/dM, direct dL/dI_r); the clamp is a
        pass-through inside [0, 1] and blocks gradient outside."""
        image = cache["image"]
        m = cache["m"]
        raw = image * (2.0 * m)
        mask = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)
        g_raw = g_adjusted * mask
        return g_raw * 2.0 * image, g_raw * 2.0 * m


def appearance_forward(model: AppearanceModel, image: np.ndarray, image_id):
    """Spec-level entry point: returns (map, adjusted image)."""
    m, adjusted, _ = model.forward(image, image_id)
    return m, adjusted


def save_checkpoint(model: AppearanceModel, path) -> None:
    """Text header naming shapes, then one flat little-endian float64 blob."""
    keys = sorted(model.params)
    c = model.config
    buf = io.StringIO()
    buf.write("cellsplat-appearance 1\n")
    buf.write(f"config {c.embed_dim} {c.channels} {c.n_downsample} {c.kan_grid}\n")
    for key in keys:
        dims = " ".join(str(d) for d in model.params[key].shape)
        buf.write(f"param {key} {dims}\n".rstrip() + "\n")
    buf.write("end_header\n")
    with open(path, "wb") as fh:
        fh.write(buf.getvalue().encode("ascii"))
        for key in keys:
            fh.write(model.params[key].astype("<f8").tobytes())


def load_checkpoint(path) -> AppearanceModel:
    with open(path, "rb") as fh:
        blob = fh.read()
    end = blob.find(b"end_header\n")
    if end < 0 or not blob.startswith(b"cellsplat-appearance 1"):
        raise ShapeError(f"{path}: not an appearance checkpoint")
    header = blob[:end].decode("ascii").splitlines()
    body = blob[end + len(b"end_header\n"):]
    config = None
    shapes = []
    for line in header[1:]:
        parts = line.split()
        if parts[0] == "config":
            config = AppearanceConfig(*(int(v) for v in parts[1:5]))
        elif parts[0] == "param":
            shapes.append((parts[1], tuple(int(v) for v in parts[2:])))
    image_ids = [key.split(".", 1)[1] for key, _ in shapes if key.startswith("embed.")]
    model = AppearanceModel(image_ids, config)
    offset = 0
    for key, shape in shapes:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=offset).reshape(shape)
        model.params[key] = arr.copy()
        offset += n * 8
    return model
