"""Compact dynamic-texture decoder: (expression, view angle) -> texture region.

Architecture: 2-layer MLP (input -> 256 -> 1024) with leaky rectifiers,
reshape to a 16x16x4 grid, 1x1 convolution expanding 4 -> 64 channels, then
four stride-2 kernel-4 transposed-convolution blocks (64 -> 64 -> 32 -> 16 -> 3)
decoding to 256x256 RGB, an optional nearest 2x upsample to the texture
resolution, and a final sigmoid. Forward and backward passes are explicit
(numpy, float64) so gradients can be verified against finite differences;
weights serialize as float32 inside the AVF1 container.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import avf
from .camera import Camera
from .errors import InvalidInputError, InvalidStateError, TrainingDivergedError
from .headmodel import HeadModel, PoseParams, evaluate, rodrigues, rotation_to_rotvec
from .rasterize import (
    Texture,
    _bilinear_footprint,
    _uv_to_texel_coords,
    rasterize_geometry,
)
from .sh import irradiance

__all__ = [
    "DynTexNet",
    "DrivingVector",
    "TrainingSample",
    "TrainConfig",
    "init_dyntex_net",
    "forward",
    "forward_batch",
    "backward",
    "blend",
    "train",
    "view_angle",
    "RandomConvPyramid",
    "save_dyntex_net",
    "load_dyntex_net",
    "serialized_size_bytes",
    "gaussian_blur",
]

LEAKY_SLOPE = 0.2
BASE_GRID = 16
BASE_CHANNELS = 4
EXPAND_CHANNELS = 64
DECODER_CHANNELS = (64, 64, 32, 16, 3)  # in -> out per transposed-conv block


# ---------------------------------------------------------------------------
# Primitive ops (batch, channel, height, width layout)


def _leaky(x):
    return np.where(x >= 0, x, LEAKY_SLOPE * x)


def _leaky_grad(x, dy):
    return np.where(x >= 0, dy, LEAKY_SLOPE * dy)


@njit(cache=True, parallel=True)
def _deconv_compose_s2(taps, bias, pad, out):
    """Stride-2 kernel-4 gather: each output pixel sums exactly the 2x2 taps
    matching its parity. Bias added; channel-last output, one pass."""
    bs, h, wd, k, _, cout = taps.shape
    h_out = out.shape[1]
    w_out = out.shape[2]
    for oy in prange(h_out):
        ky_a = (oy + pad) % 2
        ky_b = ky_a + 2
        iy_a = (oy + pad - ky_a) // 2
        iy_b = (oy + pad - ky_b) // 2
        va = 0 <= iy_a < h
        vb = ky_b < k and 0 <= iy_b < h
        for ox in range(w_out):
            kx_a = (ox + pad) % 2
            kx_b = kx_a + 2
            ix_a = (ox + pad - kx_a) // 2
            ix_b = (ox + pad - kx_b) // 2
            wa = 0 <= ix_a < wd
            wb = kx_b < k and 0 <= ix_b < wd
            for b in range(bs):
                for c in range(cout):
                    acc = bias[c]
                    if va:
                        if wa:
                            acc += taps[b, iy_a, ix_a, ky_a, kx_a, c]
                        if wb:
                            acc += taps[b, iy_a, ix_b, ky_a, kx_b, c]
                    if vb:
                        if wa:
                            acc += taps[b, iy_b, ix_a, ky_b, kx_a, c]
                        if wb:
                            acc += taps[b, iy_b, ix_b, ky_b, kx_b, c]
                    out[b, oy, ox, c] = acc


def _deconv_fwd(x, w, b, stride=2, pad=1):
    """Transposed convolution on channel-last maps (B, H, W, C_in);
    w has shape (c_in, c_out, k, k).

    One fat GEMM over all kernel taps, then a fused gather/bias compose.
    Only the stride-2 configuration the decoder uses is implemented.
    """
    if stride != 2:
        raise InvalidInputError("transposed convolution supports stride 2 only")
    bs, h, wd, cin = x.shape
    _, cout, k, _ = w.shape
    h_out = stride * (h - 1) + k - 2 * pad
    w_out = stride * (wd - 1) + k - 2 * pad
    w_flat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(cin, k * k * cout)
    taps = (x.reshape(-1, cin) @ w_flat).reshape(bs, h, wd, k, k, cout)
    out = np.empty((bs, h_out, w_out, cout), dtype=taps.dtype)
    _deconv_compose_s2(taps, b.astype(taps.dtype), pad, out)
    return out


def _deconv_bwd(x, w, dy, stride=2, pad=1):
    """Gradients of _deconv_fwd (channel-last maps): returns (dx, dw, db)."""
    bs, h, wd, cin = x.shape
    _, cout, k, _ = w.shape
    h_out, w_out = dy.shape[1], dy.shape[2]
    dy_pad = np.zeros((bs, h_out + 2 * pad, w_out + 2 * pad, cout), dtype=dy.dtype)
    dy_pad[:, pad:pad + h_out, pad:pad + w_out, :] = dy
    taps = np.empty((bs, h, wd, k, k, cout), dtype=dy.dtype)
    for ky in range(k):
        for kx in range(k):
            taps[:, :, :, ky, kx, :] = dy_pad[:, ky:ky + stride * h:stride,
                                              kx:kx + stride * wd:stride, :]
    taps_flat = taps.reshape(-1, k * k * cout)
    w_flat = np.ascontiguousarray(w.transpose(0, 2, 3, 1)).reshape(cin, k * k * cout)
    dx = (taps_flat @ w_flat.T).reshape(bs, h, wd, cin)
    x_flat = np.ascontiguousarray(x).reshape(-1, cin)
    dw = (x_flat.T @ taps_flat).reshape(cin, k, k, cout).transpose(0, 3, 1, 2)
    db = dy.sum(axis=(0, 1, 2))
    return dx, np.ascontiguousarray(dw), db


def _conv_fwd(x, w, b, stride=2, pad=1):
    """Standard convolution; w has shape (c_out, c_in, k, k)."""
    bs, cin, h, wd = x.shape
    cout, _, k, _ = w.shape
    h_out = (h + 2 * pad - k) // stride + 1
    w_out = (wd + 2 * pad - k) // stride + 1
    x_pad = np.zeros((bs, h + 2 * pad, wd + 2 * pad, cin), dtype=x.dtype)
    x_pad[:, pad:pad + h, pad:pad + wd, :] = np.moveaxis(x, 1, 3)
    taps = np.empty((bs, h_out, w_out, k, k, cin), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            taps[:, :, :, ky, kx, :] = x_pad[:, ky:ky + stride * h_out:stride,
                                             kx:kx + stride * w_out:stride, :]
    w_flat = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    y = taps.reshape(-1, k * k * cin) @ w_flat + b
    return np.moveaxis(y.reshape(bs, h_out, w_out, cout), 3, 1)


def _conv_bwd_input(w, dy, in_shape, stride=2, pad=1):
    bs, cin, h, wd = in_shape
    cout, _, k, _ = w.shape
    h_out, w_out = dy.shape[2], dy.shape[3]
    dy_flat = np.ascontiguousarray(np.moveaxis(dy, 1, 3)).reshape(-1, cout)
    w_flat = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(k * k * cin, cout)
    taps = (dy_flat @ w_flat.T).reshape(bs, h_out, w_out, k, k, cin)
    dx_pad = np.zeros((bs, h + 2 * pad, wd + 2 * pad, cin), dtype=taps.dtype)
    for ky in range(k):
        for kx in range(k):
            dx_pad[:, ky:ky + stride * h_out:stride,
                   kx:kx + stride * w_out:stride, :] += taps[:, :, :, ky, kx, :]
    return np.moveaxis(dx_pad[:, pad:pad + h, pad:pad + wd, :], 3, 1)


@njit(cache=True, parallel=True)
def _upsample_sigmoid_hwc(x, factor, out):
    """Nearest upsample + sigmoid over channel-last maps."""
    bs, h, wd, ch = x.shape
    for oy in prange(h * factor):
        iy = oy // factor
        for ox in range(wd * factor):
            ix = ox // factor
            for b in range(bs):
                for c in range(ch):
                    v = x[b, iy, ix, c]
                    if v >= 0.0:
                        out[b, oy, ox, c] = 1.0 / (1.0 + np.exp(-v))
                    else:
                        e = np.exp(v)
                        out[b, oy, ox, c] = e / (1.0 + e)


# ---------------------------------------------------------------------------
# Network


@dataclass
class DynTexNet:
    params: dict[str, np.ndarray]
    n_input: int
    upsample: int = 2  # 256 -> 512 by default to match the texture resolution

    @property
    def output_size(self) -> int:
        return BASE_GRID * 16 * self.upsample

    def copy(self) -> "DynTexNet":
        return DynTexNet({k: v.copy() for k, v in self.params.items()},
                         self.n_input, self.upsample)


@dataclass
class DrivingVector:
    """Expression coefficients plus head-relative-to-camera rotation vector."""

    alpha: np.ndarray
    view_angle: np.ndarray

    def vector(self) -> np.ndarray:
        return np.concatenate([np.asarray(self.alpha, dtype=np.float64).ravel(),
                               np.asarray(self.view_angle, dtype=np.float64).ravel()])


def view_angle(pose: PoseParams, camera: Camera) -> np.ndarray:
    """Head orientation in the camera frame, as a rotation vector."""
    return rotation_to_rotvec(camera.rotation @ rodrigues(pose.theta_global))


def init_dyntex_net(n_input: int = 103, upsample: int = 2, seed: int = 0) -> DynTexNet:
    """He-initialized network; deterministic per seed."""
    rng = np.random.default_rng(seed)

    def he(shape, fan_in):
        return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

    params = {
        "fc1_w": he((256, n_input), n_input),
        "fc1_b": np.zeros(256),
        "fc2_w": he((1024, 256), 256),
        "fc2_b": np.zeros(1024),
        "expand_w": he((EXPAND_CHANNELS, BASE_CHANNELS, 1, 1), BASE_CHANNELS),
        "expand_b": np.zeros(EXPAND_CHANNELS),
    }
    for i in range(4):
        cin, cout = DECODER_CHANNELS[i], DECODER_CHANNELS[i + 1]
        params[f"dec{i}_w"] = he((cin, cout, 4, 4), cin * 16)
        params[f"dec{i}_b"] = np.zeros(cout)
    return DynTexNet(params, n_input, upsample)


def forward_batch(net: DynTexNet, X: np.ndarray, want_cache: bool = False):
    """Batched forward: X (B, n_input) -> (B, H, W, 3) in (0, 1)."""
    X = np.asarray(X, dtype=net.params["fc1_w"].dtype)
    if X.ndim != 2 or X.shape[1] != net.n_input:
        raise InvalidInputError(
            f"driving vectors must have shape (B, {net.n_input}), got {X.shape}")
    p = net.params
    cache: dict[str, np.ndarray] = {"x": X}

    z1 = X @ p["fc1_w"].T + p["fc1_b"]
    a1 = _leaky(z1)
    z2 = a1 @ p["fc2_w"].T + p["fc2_b"]
    a2 = _leaky(z2)
    grid = a2.reshape(-1, BASE_CHANNELS, BASE_GRID, BASE_GRID)
    z3 = _conv_fwd(grid, p["expand_w"], p["expand_b"], stride=1, pad=0)
    a3 = _leaky(z3)
    cache.update(z1=z1, a1=a1, z2=z2, a2=a2, grid=grid, z3=z3)
    # Decoder runs on channel-last maps: GEMM inputs flatten for free and
    # all per-pixel writes are contiguous.
    h = np.ascontiguousarray(np.moveaxis(a3, 1, 3))
    for i in range(4):
        cache[f"in{i}"] = h
        z = _deconv_fwd(h, p[f"dec{i}_w"], p[f"dec{i}_b"])
        cache[f"z{i + 4}"] = z
        h = _leaky(z) if i < 3 else z
    f = net.upsample
    img = np.empty((h.shape[0], h.shape[1] * f, h.shape[2] * f, h.shape[3]),
                   dtype=h.dtype)
    _upsample_sigmoid_hwc(h, f, img)
    cache["out_hwc"] = img
    if want_cache:
        return img, cache
    return img


def forward(net: DynTexNet, x) -> np.ndarray:
    """Single driving vector -> (H, W, 3) texture region in (0, 1)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    if x.shape[0] != net.n_input:
        raise InvalidInputError(
            f"driving vector must have length {net.n_input}, got {x.shape[0]}")
    return forward_batch(net, x[None, :])[0]


def backward(net: DynTexNet, cache: dict | None, d_out: np.ndarray):
    """Exact gradients under an output cotangent d_out (B, H, W, 3) or (H, W, 3).

    Returns (d_params, d_x). Requires the cache from forward_batch(...,
    want_cache=True); raises InvalidStateError otherwise.
    """
    if not cache or "out_hwc" not in cache:
        raise InvalidStateError("backward needs the cached forward activations")
    p = net.params
    d_out = np.asarray(d_out, dtype=p["fc1_w"].dtype)
    if d_out.ndim == 3:
        d_out = d_out[None]
    out = cache["out_hwc"]
    dy = d_out * out * (1.0 - out)       # sigmoid, channel-last
    f = net.upsample
    if f > 1:
        bs, hh, ww, ch = dy.shape
        dy = dy.reshape(bs, hh // f, f, ww // f, f, ch).sum(axis=(2, 4))

    grads: dict[str, np.ndarray] = {}
    for i in range(3, -1, -1):
        if i < 3:
            dy = _leaky_grad(cache[f"z{i + 4}"], dy)
        dx, dw, db = _deconv_bwd(cache[f"in{i}"], p[f"dec{i}_w"], dy)
        grads[f"dec{i}_w"] = dw
        grads[f"dec{i}_b"] = db
        dy = dx

    dy = np.ascontiguousarray(np.moveaxis(dy, 3, 1))  # expand stage is channel-first
    dy = _leaky_grad(cache["z3"], dy)
    grads["expand_b"] = dy.sum(axis=(0, 2, 3))
    grads["expand_w"] = np.einsum("bohw,bchw->oc", dy, cache["grid"])[:, :, None, None]
    d_grid = _conv_bwd_input(p["expand_w"], dy, cache["grid"].shape, stride=1, pad=0)
    d_a2 = d_grid.reshape(len(d_grid), -1)

    d_z2 = _leaky_grad(cache["z2"], d_a2)
    grads["fc2_w"] = d_z2.T @ cache["a1"]
    grads["fc2_b"] = d_z2.sum(axis=0)
    d_a1 = d_z2 @ p["fc2_w"]
    d_z1 = _leaky_grad(cache["z1"], d_a1)
    grads["fc1_w"] = d_z1.T @ cache["x"]
    grads["fc1_b"] = d_z1.sum(axis=0)
    d_x = d_z1 @ p["fc1_w"]
    return grads, d_x


def serialized_size_bytes(net: DynTexNet) -> int:
    """Size of the float32 on-disk weights."""
    return int(sum(v.size for v in net.params.values()) * 4)


def save_dyntex_net(net: DynTexNet, path) -> None:
    sections = {f"dyntex/{k}": v.astype(np.float32) for k, v in net.params.items()}
    sections["dyntex/meta"] = np.array([net.n_input, net.upsample], dtype=np.int64)
    avf.write_container(path, sections)


def load_dyntex_net(path, dtype=np.float64) -> DynTexNet:
    sections = avf.read_container(path)
    meta = sections.pop("dyntex/meta")
    params = {k[len("dyntex/"):]: v.astype(dtype)
              for k, v in sections.items() if k.startswith("dyntex/")}
    return DynTexNet(params, n_input=int(meta[0]), upsample=int(meta[1]))


def cast_net(net: DynTexNet, dtype) -> DynTexNet:
    """Same weights at another precision (float32 = the serialized format,
    the right choice for wall-clock-sensitive inference)."""
    return DynTexNet({k: v.astype(dtype) for k, v in net.params.items()},
                     net.n_input, net.upsample)


# ---------------------------------------------------------------------------
# Blending


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with reflect padding; sigma <= 0 is a no-op."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(np.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()

    def along(a, axis):
        pad = [(0, 0)] * a.ndim
        pad[axis] = (radius, radius)
        ap = np.pad(a, pad, mode="reflect")
        out = np.zeros_like(a)
        sl = [slice(None)] * a.ndim
        for i, kv in enumerate(kernel):
            sl[axis] = slice(i, i + a.shape[axis])
            out += kv * ap[tuple(sl)]
        return out

    return along(along(img, 0), 1)


@njit(cache=True, parallel=True)
def _blend_kernel(static, dyn, mask, out):
    for y in prange(static.shape[0]):
        for x in range(static.shape[1]):
            m = mask[y, x]
            for c in range(3):
                out[y, x, c] = m * dyn[y, x, c] + (1.0 - m) * static[y, x, c]


def blend(t_static: Texture, t_dyn: np.ndarray, blend_mask: np.ndarray,
          feather_sigma: float = 4.0) -> Texture:
    """Composite the dynamic region over the static texture.

    out = m * t_dyn + (1 - m) * t_static with m the blend mask feathered by a
    Gaussian of feather_sigma texels (0 = hard mask; pre-feathered masks can
    be passed with sigma 0). The result is texelwise convex in the sources.
    """
    t_dyn = np.asarray(t_dyn, dtype=np.float64)
    if t_dyn.shape != t_static.rgb.shape:
        raise InvalidInputError("dynamic texture dimensions disagree with the static")
    mask = np.asarray(blend_mask, dtype=np.float64)
    if mask.shape != t_static.rgb.shape[:2]:
        raise InvalidInputError("blend mask dimensions disagree with the texture")
    m = gaussian_blur(mask, feather_sigma)
    rgb = np.empty_like(t_static.rgb)
    _blend_kernel(np.ascontiguousarray(t_static.rgb),
                  np.ascontiguousarray(t_dyn), m, rgb)
    return Texture(rgb, t_static.coverage.copy())


# ---------------------------------------------------------------------------
# Perceptual feature loss


class FeatureLoss:
    """Interface: multi-scale image loss with an analytic input gradient."""

    def loss_and_grad(self, a: np.ndarray, b: np.ndarray):
        raise NotImplementedError


class RandomConvPyramid(FeatureLoss):
    """Frozen random 3-layer strided conv pyramid (channels 3 -> 8 -> 16 -> 32).

    A fixed-seed stand-in for a pretrained perceptual network: it compares
    multi-scale structure rather than raw pixels. L1 over each level's
    feature maps, averaged across levels.
    """

    def __init__(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        chans = (3, 8, 16, 32)
        self.weights = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            w = rng.normal(0.0, np.sqrt(2.0 / (cin * 9)), size=(cout, cin, 3, 3))
            self.weights.append(w)
        self.biases = [np.zeros(w.shape[0]) for w in self.weights]

    def _features(self, img):
        h = np.moveaxis(np.asarray(img, dtype=np.float64), 2, 0)[None]
        feats = []
        pre = []
        for w, b in zip(self.weights, self.biases):
            z = _conv_fwd(h, w, b, stride=2, pad=1)
            pre.append(z)
            h = _leaky(z)
            feats.append(h)
        return feats, pre

    def loss_and_grad(self, a: np.ndarray, b: np.ndarray):
        fa, pre_a = self._features(a)
        fb, _ = self._features(b)
        loss = 0.0
        d_feats = []
        for la, lb in zip(fa, fb):
            loss += float(np.abs(la - lb).mean())
            d_feats.append(np.sign(la - lb) / la.size)
        # Backprop the per-level cotangents down to the input.
        d_h = None
        for i in range(len(self.weights) - 1, -1, -1):
            dy = d_feats[i] if d_h is None else d_feats[i] + d_h
            dy = _leaky_grad(pre_a[i], dy)
            h_in = a.shape[0] if i == 0 else pre_a[i - 1].shape[2]
            w_in = a.shape[1] if i == 0 else pre_a[i - 1].shape[3]
            in_shape = (1, self.weights[i].shape[1], h_in, w_in)
            d_h = _conv_bwd_input(self.weights[i], dy, in_shape, stride=2, pad=1)
        d_a = np.moveaxis(d_h[0], 0, 2)
        return loss, d_a


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainingSample:
    """One clip frame with its recovered parameters."""

    image: np.ndarray          # (H, W, 3) linear target frame
    tracked: object            # TrackedFrame (alpha, pose, light)
    camera: Camera


@dataclass
class TrainConfig:
    beta: np.ndarray = None                 # identity coefficients (fixed)
    blend_mask: np.ndarray = None           # (H_t, W_t) dynamic-region mask
    lr: float = 4e-4
    iterations: int = 2500
    batch_size: int = 4
    perceptual_weight: float = 0.1
    feather_sigma: float = 4.0
    seed: int = 0
    perceptual: FeatureLoss | None = None
    texture_size: tuple[int, int] | None = None  # defaults to t_static dims


@dataclass
class _SampleCache:
    x: np.ndarray
    irr: np.ndarray          # (P, 3) clamped irradiance at covered pixels
    target: np.ndarray       # (P, 3)
    mask: np.ndarray         # (H, W) bool
    taps: tuple              # bilinear footprint into the texture
    target_image: np.ndarray  # masked full image for the perceptual term


def _prepare_sample(sample: TrainingSample, model: HeadModel, beta,
                    tex_hw) -> _SampleCache:
    tracked = sample.tracked
    mesh = evaluate(model, tracked.pose, beta, tracked.alpha)
    geom = rasterize_geometry(mesh, sample.camera)
    m = geom.mask
    irr = np.clip(irradiance(tracked.light, geom.normal[m]), 0.0, None)
    th, tw = tex_hw
    x_t, y_t = _uv_to_texel_coords(geom.uv[m], tw, th)
    taps = _bilinear_footprint(x_t, y_t, tw, th)
    target = np.asarray(sample.image, dtype=np.float64)
    target_masked = np.zeros_like(target)
    target_masked[m] = target[m]
    drive = DrivingVector(tracked.alpha, view_angle(tracked.pose, sample.camera))
    return _SampleCache(x=drive.vector(), irr=irr, target=target[m], mask=m,
                        taps=taps, target_image=target_masked)


def _shade_cached(sc: _SampleCache, tex_rgb):
    x0, x1, y0, y1, fx, fy = sc.taps
    fxc = fx[:, None]
    fyc = fy[:, None]
    sampled = ((1 - fyc) * ((1 - fxc) * tex_rgb[y0, x0] + fxc * tex_rgb[y0, x1])
               + fyc * ((1 - fxc) * tex_rgb[y1, x0] + fxc * tex_rgb[y1, x1]))
    return sampled * sc.irr


def _scatter_cached(sc: _SampleCache, d_pixels, tex_hw):
    th, tw = tex_hw
    x0, x1, y0, y1, fx, fy = sc.taps
    g = d_pixels * sc.irr
    d_tex = np.zeros((th * tw, 3))
    np.add.at(d_tex, y0 * tw + x0, g * ((1 - fx) * (1 - fy))[:, None])
    np.add.at(d_tex, y0 * tw + x1, g * (fx * (1 - fy))[:, None])
    np.add.at(d_tex, y1 * tw + x0, g * ((1 - fx) * fy)[:, None])
    np.add.at(d_tex, y1 * tw + x1, g * (fx * fy)[:, None])
    return d_tex.reshape(th, tw, 3)


def train(net: DynTexNet, samples: list[TrainingSample], model: HeadModel,
          t_static: Texture, config: TrainConfig):
    """Rendering-loss training of the dynamic-texture decoder.

    Per step: draw a minibatch, decode each sample's driving vector, blend the
    decoded region over the static texture, re-shade the cached per-frame
    visibility, and take the L1 + perceptual loss against the target frame on
    the rendered-face pixels. Gradients flow through the rasterizer's texture
    adjoint, the blend, and the network; adaptive-moment updates at config.lr.

    Returns (net, loss_trace). Raises TrainingDivergedError on non-finite loss.
    """
    if not samples:
        raise InvalidInputError("train needs at least one sample")
    if config.beta is None or config.blend_mask is None:
        raise InvalidInputError("config must carry beta and blend_mask")
    tex_hw = config.texture_size or t_static.rgb.shape[:2]
    if (t_static.rgb.shape[:2] != tex_hw
            or net.output_size != tex_hw[0] or net.output_size != tex_hw[1]):
        raise InvalidInputError(
            f"static texture {t_static.rgb.shape[:2]} and network output "
            f"{net.output_size} must agree")

    mask_f = gaussian_blur(np.asarray(config.blend_mask, dtype=np.float64),
                           config.feather_sigma)[:, :, None]
    static_part = (1.0 - mask_f) * t_static.rgb
    percep = config.perceptual
    if percep is None and config.perceptual_weight > 0:
        percep = RandomConvPyramid(seed=config.seed)

    caches = [_prepare_sample(s, model, config.beta, tex_hw) for s in samples]

    rng = np.random.default_rng(config.seed)
    order = rng.permutation(len(samples))
    cursor = 0

    adam_m = {k: np.zeros_like(v) for k, v in net.params.items()}
    adam_v = {k: np.zeros_like(v) for k, v in net.params.items()}
    t_step = 0
    trace = []

    for step in range(config.iterations):
        batch = []
        for _ in range(min(config.batch_size, len(samples))):
            if cursor >= len(order):
                order = rng.permutation(len(samples))
                cursor = 0
            batch.append(int(order[cursor]))
            cursor += 1

        X = np.stack([caches[i].x for i in batch])
        dyn, cache = forward_batch(net, X, want_cache=True)

        loss_total = 0.0
        d_out = np.zeros_like(dyn)
        for bi, si in enumerate(batch):
            sc = caches[si]
            blended = mask_f * dyn[bi] + static_part
            pixels = _shade_cached(sc, blended)
            res = pixels - sc.target
            n_vals = max(res.size, 1)
            loss = float(np.abs(res).mean())
            d_pixels = np.sign(res) / n_vals
            if percep is not None and config.perceptual_weight > 0:
                img = np.zeros_like(sc.target_image)
                img[sc.mask] = pixels
                p_loss, d_img = percep.loss_and_grad(img, sc.target_image)
                loss += config.perceptual_weight * p_loss
                d_pixels = d_pixels + config.perceptual_weight * d_img[sc.mask]
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}", step=step, sample_id=si)
            loss_total += loss
            d_tex = _scatter_cached(sc, d_pixels, tex_hw)
            d_out[bi] = mask_f * d_tex
        loss_total /= len(batch)
        trace.append(loss_total)

        grads, _ = backward(net, cache, d_out / len(batch))
        t_step += 1
        for k in net.params:
            g = grads[k]
            adam_m[k] = 0.9 * adam_m[k] + 0.1 * g
            adam_v[k] = 0.999 * adam_v[k] + 0.001 * g * g
            mh = adam_m[k] / (1 - 0.9 ** t_step)
            vh = adam_v[k] / (1 - 0.999 ** t_step)
            net.params[k] -= config.lr * mh / (np.sqrt(vh) + 1e-8)
    return net, trace
