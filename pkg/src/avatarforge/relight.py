"""Static-texture finishing: UV normal maps, joint light/albedo de-lighting
with a light-only warmup and a brightness hinge, and patch-based outpainting
of never-observed texels.

Re-exports the spherical-harmonics primitives (sh module) so callers find the
whole relighting surface here.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .errors import InvalidInputError
from .geometry import Mesh
from .rasterize import Texture, texel_surface_points, uv_coverage
from .sh import SHLight, irradiance, sh_basis, sh_basis_array  # noqa: F401

__all__ = [
    "SHLight",
    "sh_basis",
    "sh_basis_array",
    "irradiance",
    "NormalMapUV",
    "bake_normal_map",
    "DelightConfig",
    "delight",
    "outpaint",
]


# ---------------------------------------------------------------------------
# UV-space normal map


@dataclass
class NormalMapUV:
    normals: np.ndarray  # (H, W, 3) world-frame unit normals
    valid: np.ndarray    # (H, W) bool


def bake_normal_map(mesh: Mesh, size: tuple[int, int] = (512, 512)) -> NormalMapUV:
    """Rasterize interpolated world-space normals into UV space.

    UV-overlapping triangles resolve last-writer-wins with a warning.
    """
    if mesh.uvs is None:
        raise InvalidInputError("bake_normal_map needs a mesh with UVs")
    h, w = size
    uvr = uv_coverage(mesh, h, w)
    if uvr.overwrites > 0:
        warnings.warn(
            f"UV layout overlaps on {uvr.overwrites} texels; last writer wins",
            RuntimeWarning, stacklevel=2)
    normals = np.zeros((h, w, 3))
    m = uvr.mask
    if m.any():
        _, nrm = texel_surface_points(mesh, uvr)
        normals[m] = nrm
    return NormalMapUV(normals, m)


# ---------------------------------------------------------------------------
# De-lighting


@dataclass
class DelightConfig:
    steps: int = 2000
    warmup_steps: int = 50          # light-only updates first
    lr: float = 1e-2                # adaptive-moment step size
    hinge_weight: float = 0.1       # penalty on irradiance above 1
    mono_light: bool = False        # single 9-coefficient light shared by RGB
    albedo_clip: tuple[float, float] = (0.0, 1.0)
    min_coverage_fraction: float = 0.01
    normalize_scale: bool = True    # mean irradiance over covered texels -> 1


_DELIGHT_CHUNKS = 64  # fixed partial-sum count keeps reductions deterministic


@njit(cache=True, parallel=True)
def _delight_fused(T, Y, A, m, v, coeff, w, lr_a, t_a, lo, hi, update_albedo,
                   A_out, m_out, v_out, partials):
    """One pass: loss and light gradient at (A, coeff), and the next albedo
    candidate (Adam step, clipped) written into the out buffers.

    partials has shape (_DELIGHT_CHUNKS, 28): 27 light-gradient entries plus
    the loss, accumulated per fixed chunk so the reduction order never depends
    on the thread count.
    """
    K = T.shape[0]
    chunk = (K + partials.shape[0] - 1) // partials.shape[0]
    b1 = 0.9
    b2 = 0.999
    c1 = 1.0 - b1 ** t_a
    c2 = 1.0 - b2 ** t_a
    for ci in prange(partials.shape[0]):
        start = ci * chunk
        end = min(start + chunk, K)
        loc = np.zeros(28)
        for k in range(start, end):
            for c in range(3):
                irr = 0.0
                for j in range(9):
                    irr += Y[k, j] * coeff[c, j]
                r = T[k, c] - A[k, c] * irr
                loc[27] += abs(r)
                s = 0.0
                if r > 0.0:
                    s = 1.0
                elif r < 0.0:
                    s = -1.0
                g_irr = -s * A[k, c]
                if irr > 1.0:
                    loc[27] += w * (irr - 1.0)
                    g_irr += w
                base = c * 9
                for j in range(9):
                    loc[base + j] += g_irr * Y[k, j]
                if update_albedo:
                    g_a = -s * irr
                    gm = b1 * m[k, c] + (1.0 - b1) * g_a
                    gv = b2 * v[k, c] + (1.0 - b2) * g_a * g_a
                    m_out[k, c] = gm
                    v_out[k, c] = gv
                    val = A[k, c] - lr_a * (gm / c1) / (np.sqrt(gv / c2) + 1e-8)
                    if val < lo:
                        val = lo
                    elif val > hi:
                        val = hi
                    A_out[k, c] = val
                else:
                    A_out[k, c] = A[k, c]
                    m_out[k, c] = m[k, c]
                    v_out[k, c] = v[k, c]
        partials[ci] = loc


class _Adam:
    """Adam with the usual bias correction; state is revertible for the
    monotone step-rejection scheme."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, grad):
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mh = self.m / (1 - self.beta1 ** self.t)
        vh = self.v / (1 - self.beta2 ** self.t)
        return self.lr * mh / (np.sqrt(vh) + self.eps)

    def snapshot(self):
        return (self.m.copy(), self.v.copy(), self.t, self.lr)

    def restore(self, snap):
        self.m, self.v, self.t, self.lr = snap[0].copy(), snap[1].copy(), snap[2], snap[3]


def delight(t_unwrapped: Texture, normals: NormalMapUV,
            config: DelightConfig | None = None):
    """Split a merged unwrap into albedo x spherical-harmonics irradiance.

    L1 data term plus a hinge penalty on irradiance above 1; the light starts
    as uniform ambient (irradiance exactly 1), the albedo as the input texels,
    and the first `warmup_steps` steps move the light only. Steps that would
    increase the objective are rejected (parameters and moments revert, the
    step size halves), which is what makes the returned per-step loss trace
    non-increasing. Albedo stays clamped to the texture range.

    Returns (t_albedo, light, loss_trace).
    """
    config = config or DelightConfig()
    covered = (t_unwrapped.coverage > 0) & normals.valid
    if covered.sum() < config.min_coverage_fraction * covered.size:
        raise InvalidInputError("too few covered texels to estimate lighting")

    T = t_unwrapped.rgb[covered]                      # (K, 3)
    Y = sh_basis_array(normals.normals[covered])      # (K, 9)
    lo, hi = config.albedo_clip
    A = np.clip(T, lo, hi)
    n_ch = 1 if config.mono_light else 3
    coeff = np.zeros((n_ch, 9))
    coeff[:, 0] = 1.0 / sh_basis_array(np.array([0.0, 0.0, 1.0]))[0]  # irradiance 1
    w = config.hinge_weight

    # Deferred-accept optimization: each step runs ONE fused pass that scores
    # the current state and simultaneously produces the next albedo candidate.
    # Warmup always accepts (the ambient init sits exactly on the hinge kink,
    # where every direction raises the penalty first-order); after warmup a
    # state scoring worse than its predecessor is dropped, the step sizes
    # halve, and the candidate is re-produced from the accepted predecessor —
    # which is what makes the recorded trace non-increasing.
    slots = [
        {"A": A, "m": np.zeros_like(A), "v": np.zeros_like(A)},
        {"A": np.empty_like(A), "m": np.empty_like(A), "v": np.empty_like(A)},
        {"A": np.empty_like(A), "m": np.empty_like(A), "v": np.empty_like(A)},
    ]
    partials = np.zeros((_DELIGHT_CHUNKS, 28))

    def c3(c_cur):
        return np.repeat(c_cur, 3, axis=0) if n_ch == 1 else c_cur

    def reduce_dc(flat):
        d_full = flat[:27].reshape(3, 9)
        return d_full.sum(axis=0, keepdims=True) if n_ch == 1 else d_full

    def produce(src, dst, c_cur, update_albedo, lr_a, t_a):
        _delight_fused(T, Y, slots[src]["A"], slots[src]["m"], slots[src]["v"],
                       c3(c_cur), w, lr_a, t_a, lo, hi, update_albedo,
                       slots[dst]["A"], slots[dst]["m"], slots[dst]["v"], partials)
        flat = partials.sum(axis=0)
        return float(flat[27]), reduce_dc(flat)

    opt_c = _Adam(coeff.shape, config.lr)
    lr_a = config.lr
    t_a = 0
    cur, free, prev = 0, 1, 2
    loss_prev = np.inf
    coeff_prev = coeff.copy()
    opt_snap_prev = opt_c.snapshot()
    trace = []
    for step in range(config.steps):
        light_only = step < config.warmup_steps
        loss_cur, d_c = produce(cur, free, coeff, not light_only, lr_a, t_a + 1)
        if light_only or loss_cur <= loss_prev:
            trace.append(loss_cur)
            loss_prev = loss_cur
            coeff_prev = coeff.copy()
            opt_snap_prev = opt_c.snapshot()
            coeff = coeff - opt_c.step(d_c)
            if not light_only:
                t_a += 1
            opt_c.lr = min(opt_c.lr * 1.05, config.lr)
            lr_a = min(lr_a * 1.05, config.lr)
            prev, cur, free = cur, free, prev
        else:
            trace.append(loss_prev)
            # Roll back to the accepted predecessor, halve both step sizes,
            # and re-produce a smaller candidate from it.
            opt_c.restore(opt_snap_prev)
            opt_c.lr = max(opt_c.lr * 0.5, 1e-12)
            lr_a = max(lr_a * 0.5, 1e-12)
            _, d_c_prev = produce(prev, cur, coeff_prev, not light_only,
                                  lr_a, t_a + 1)
            coeff = coeff_prev - opt_c.step(d_c_prev)
    A = slots[prev]["A"]
    coeff = coeff_prev

    light_coeff = np.repeat(coeff, 3, axis=0) if n_ch == 1 else coeff
    light = SHLight(light_coeff)
    if config.normalize_scale:
        irr = Y @ light.coefficients.T
        mean_irr = irr.mean(axis=0)
        scale = np.where(np.abs(mean_irr) > 1e-9, mean_irr, 1.0)
        light = SHLight(light.coefficients / scale[:, None])
        A = A * scale[None, :]

    rgb = t_unwrapped.rgb.copy()
    rgb[covered] = A
    return Texture(rgb, t_unwrapped.coverage.copy()), light, trace


# ---------------------------------------------------------------------------
# Patch-based outpainting (randomized nearest-neighbor field + voting)


@njit(cache=True)
def _patch_dist(img, src_ok, ay, ax, by, bx, radius, best_so_far):
    """Masked SSD between patches at a (hole) and b (source), early-exit."""
    d = 0.0
    count = 0
    h, w = img.shape[:2]
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            sy = by + dy
            sx = bx + dx
            if sy < 0 or sy >= h or sx < 0 or sx >= w or not src_ok[sy, sx]:
                continue
            ty = min(max(ay + dy, 0), h - 1)
            tx = min(max(ax + dx, 0), w - 1)
            for c in range(3):
                diff = img[ty, tx, c] - img[sy, sx, c]
                d += diff * diff
            count += 1
        if count > 0 and d / count >= best_so_far:
            return d / count
    if count == 0:
        return 1e30
    return d / count


@njit(cache=True)
def _pm_iterate(img, src_ok, hole_ys, hole_xs, nn_y, nn_x, nn_d, radius,
                rand_stream, reverse):
    h, w = img.shape[:2]
    n = len(hole_ys)
    r = 0
    order = range(n - 1, -1, -1) if reverse else range(n)
    for i in order:
        ay = hole_ys[i]
        ax = hole_xs[i]
        best_d = nn_d[i]
        best_y = nn_y[i]
        best_x = nn_x[i]
        # Propagation from already-visited scanline neighbors.
        for j in range(2):
            if reverse:
                ny = ay + (1 if j == 0 else 0)
                nx = ax + (0 if j == 0 else 1)
            else:
                ny = ay - (1 if j == 0 else 0)
                nx = ax - (0 if j == 0 else 1)
            if ny < 0 or ny >= h or nx < 0 or nx >= w:
                continue
            k = -1
            # hole pixels are indexed row-major; binary search the flat id
            flat = ny * w + nx
            lo_i = 0
            hi_i = n - 1
            while lo_i <= hi_i:
                mid = (lo_i + hi_i) // 2
                f = hole_ys[mid] * w + hole_xs[mid]
                if f == flat:
                    k = mid
                    break
                if f < flat:
                    lo_i = mid + 1
                else:
                    hi_i = mid - 1
            if k < 0:
                continue
            cy = nn_y[k] - (ny - ay)
            cx = nn_x[k] - (nx - ax)
            if cy < 0 or cy >= h or cx < 0 or cx >= w or not src_ok[cy, cx]:
                continue
            d = _patch_dist(img, src_ok, ay, ax, cy, cx, radius, best_d)
            if d < best_d:
                best_d = d
                best_y = cy
                best_x = cx
        # Random search around the current best, exponentially shrinking.
        radius_s = max(h, w)
        while radius_s >= 1:
            ry = best_y + int((rand_stream[r] * 2.0 - 1.0) * radius_s)
            r += 1
            rx = best_x + int((rand_stream[r] * 2.0 - 1.0) * radius_s)
            r += 1
            if r >= len(rand_stream) - 2:
                r = 0
            if 0 <= ry < h and 0 <= rx < w and src_ok[ry, rx]:
                d = _patch_dist(img, src_ok, ay, ax, ry, rx, radius, best_d)
                if d < best_d:
                    best_d = d
                    best_y = ry
                    best_x = rx
            radius_s //= 2
        nn_y[i] = best_y
        nn_x[i] = best_x
        nn_d[i] = best_d


@njit(cache=True)
def _vote(img, out, src_ok, hole_mask, hole_ys, hole_xs, nn_y, nn_x, radius):
    h, w = img.shape[:2]
    acc = np.zeros((h, w, 3))
    wsum = np.zeros((h, w))
    n = len(hole_ys)
    for i in range(n):
        ay = hole_ys[i]
        ax = hole_xs[i]
        by = nn_y[i]
        bx = nn_x[i]
        for dy in range(-radius, radius + 1):
            for dx in range(-radius, radius + 1):
                ty = ay + dy
                tx = ax + dx
                sy = by + dy
                sx = bx + dx
                if ty < 0 or ty >= h or tx < 0 or tx >= w:
                    continue
                if not hole_mask[ty, tx]:
                    continue
                if sy < 0 or sy >= h or sx < 0 or sx >= w or not src_ok[sy, sx]:
                    continue
                for c in range(3):
                    acc[ty, tx, c] += img[sy, sx, c]
                wsum[ty, tx] += 1.0
    for y in range(h):
        for x in range(w):
            if hole_mask[y, x] and wsum[y, x] > 0:
                for c in range(3):
                    out[y, x, c] = acc[y, x, c] / wsum[y, x]


def _diffuse_fill(rgb, known_mask, iters=200):
    """Deterministic onion-peel initialization of unknown pixels."""
    out = rgb.copy()
    known = known_mask.copy()
    for _ in range(iters):
        if known.all():
            break
        shifted = []
        weights = []
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            s = np.roll(out, (dy, dx), axis=(0, 1))
            k = np.roll(known, (dy, dx), axis=(0, 1))
            if dy == 1:
                s[0] = 0
                k[0] = False
            if dy == -1:
                s[-1] = 0
                k[-1] = False
            if dx == 1:
                s[:, 0] = 0
                k[:, 0] = False
            if dx == -1:
                s[:, -1] = 0
                k[:, -1] = False
            shifted.append(s * k[:, :, None])
            weights.append(k)
        num = sum(shifted)
        den = sum(w.astype(np.float64) for w in weights)
        new = ~known & (den > 0)
        out[new] = num[new] / den[new][:, None]
        known = known | new
    return out


def _downsample2(img):
    h, w = img.shape[:2]
    h2, w2 = h // 2, w // 2
    img = img[: h2 * 2, : w2 * 2]
    if img.ndim == 3:
        return img.reshape(h2, 2, w2, 2, -1).mean(axis=(1, 3))
    return img.reshape(h2, 2, w2, 2).mean(axis=(1, 3))


def _upsample2(img, shape):
    rep = np.repeat(np.repeat(img, 2, axis=0), 2, axis=1)
    return rep[: shape[0], : shape[1]]


def outpaint(t_albedo: Texture, source_region: np.ndarray,
             patch_size: int = 7, pm_iterations: int = 5,
             em_iterations: int = 3, seed: int = 0) -> Texture:
    """Fill uncovered texels by example-based synthesis from the source region.

    Coarse-to-fine: at each pyramid level a randomized nearest-neighbor field
    (scanline propagation + shrinking random search) matches each unknown
    patch to the source region, and overlapping matched patches vote for the
    unknown colors. Covered texels are returned bit-identical; the output has
    coverage 1 everywhere.
    """
    source_region = np.asarray(source_region, dtype=bool)
    if source_region.shape != t_albedo.coverage.shape:
        raise InvalidInputError("source_region dimensions disagree with the texture")
    if not source_region.any():
        raise InvalidInputError("outpaint needs a non-empty source region")
    hole_full = t_albedo.coverage <= 0
    if not hole_full.any():
        out = t_albedo.copy()
        out.coverage = np.ones_like(out.coverage)
        return out

    radius = max(1, patch_size // 2)
    rng = np.random.default_rng(seed)

    # Build pyramid of (rgb, source mask, hole mask).
    levels = [(t_albedo.rgb, source_region, hole_full)]
    while min(levels[-1][0].shape[:2]) >= 4 * patch_size:
        rgb_l, src_l, hole_l = levels[-1]
        levels.append((
            _downsample2(rgb_l),
            _downsample2(src_l.astype(np.float64)) > 0.5,
            _downsample2(hole_l.astype(np.float64)) > 0.5,
        ))

    filled = None
    for li in range(len(levels) - 1, -1, -1):
        rgb_l, src_l, hole_l = levels[li]
        img = rgb_l.copy()
        if filled is None:
            img = _diffuse_fill(img, ~hole_l)
        else:
            up = _upsample2(filled, img.shape[:2])
            img[hole_l] = up[hole_l]
        if not src_l.any() or not hole_l.any():
            filled = img
            continue

        hys, hxs = np.nonzero(hole_l)
        order = np.argsort(hys * img.shape[1] + hxs)  # row-major for propagation
        hys = np.ascontiguousarray(hys[order])
        hxs = np.ascontiguousarray(hxs[order])
        sys_, sxs = np.nonzero(src_l)
        pick = rng.integers(0, len(sys_), size=len(hys))
        nn_y = np.ascontiguousarray(sys_[pick])
        nn_x = np.ascontiguousarray(sxs[pick])
        nn_d = np.full(len(hys), 1e30)
        src_ok = np.ascontiguousarray(src_l)

        for i in range(len(hys)):
            nn_d[i] = _patch_dist(img, src_ok, hys[i], hxs[i],
                                  nn_y[i], nn_x[i], radius, 1e30)
        for em in range(em_iterations):
            for it in range(pm_iterations):
                stream = rng.random(4 * len(hys) + 64)
                _pm_iterate(img, src_ok, hys, hxs, nn_y, nn_x, nn_d, radius,
                            stream, bool(it % 2))
            out_img = img.copy()
            _vote(img, out_img, src_ok, hole_l, hys, hxs, nn_y, nn_x, radius)
            img = out_img
            if em < em_iterations - 1:
                for i in range(len(hys)):
                    nn_d[i] = _patch_dist(img, src_ok, hys[i], hxs[i],
                                          nn_y[i], nn_x[i], radius, 1e30)
        filled = img

    rgb = t_albedo.rgb.copy()
    rgb[hole_full] = filled[hole_full]
    return Texture(rgb, np.ones_like(t_albedo.coverage))
