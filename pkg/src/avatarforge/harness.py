"""Synthetic ground-truth scenes and evaluation metrics.

Generates end-to-end test inputs with every quantity known — a procedural
head at known identity, a camera ring, images rendered under a known light,
an expression clip with animated mouth-interior content — and writes them in
exactly the formats the real-data ingestion path reads, so harness output and
real captures are interchangeable. PSNR/SSIM close the loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .camera import Camera, look_at, project_points, save_camera_manifest
from .errors import InvalidInputError
from .fitting import bake_region_texel_mask
from .geometry import Mesh, save_obj
from .headmodel import (
    HeadModel,
    PoseParams,
    evaluate,
    generate_synthetic_model,
    save_head_model,
)
from .images import write_png
from .rasterize import Texture, rasterize, rasterize_geometry
from .sh import SHLight, save_light_json
from .tracking import TrackedFrame

__all__ = [
    "IdentityScene",
    "ExpressionClip",
    "make_identity_scene",
    "make_expression_clip",
    "frame_texture",
    "psnr",
    "ssim",
    "write_scene",
    "write_clip",
    "region_image_mask",
]


@dataclass
class IdentityScene:
    seed: int
    model: HeadModel
    beta_true: np.ndarray
    s_raw: Mesh                       # neutral head, plus clutter when enabled
    hair_vertices: np.ndarray         # clutter vertex indices into s_raw
    cameras: list[Camera]
    images: list[np.ndarray]
    key_index: int
    landmarks_2d: np.ndarray          # (68, 2) in the key view
    texture_gt: Texture
    light_gt: SHLight


@dataclass
class ExpressionClip:
    seed: int
    camera: Camera
    images: list[np.ndarray]
    landmarks: list[np.ndarray]       # (68, 2) per frame
    alpha_true: np.ndarray            # (F, n_expr)
    poses_true: list[PoseParams]
    mouth_mask: np.ndarray            # texel mask of the animated region
    scene: IdentityScene


def _procedural_texture(rng, size: int) -> Texture:
    """Smooth color fields plus fine speckle; values kept below PNG clipping."""
    yy, xx = np.meshgrid(np.linspace(0, 1, size), np.linspace(0, 1, size),
                         indexing="ij")
    rgb = np.zeros((size, size, 3))
    for c in range(3):
        g = np.zeros((size, size))
        for _ in range(4):
            fy, fx = rng.uniform(0.5, 3.0, 2)
            py, px = rng.uniform(0, 2 * np.pi, 2)
            g += rng.normal() * np.cos(2 * np.pi * fy * yy + py) * np.cos(2 * np.pi * fx * xx + px)
        g /= max(np.abs(g).max(), 1e-9)
        rgb[:, :, c] = 0.42 + 0.20 * g
    rgb += rng.uniform(-0.12, 0.12, size=(size, size, 3))
    return Texture(np.clip(rgb, 0.05, 0.80), np.ones((size, size)))


def _hair_cap(rng, radii=np.array([0.075, 0.100, 0.085])) -> Mesh:
    """Clutter geometry: an offset shell over the top of the head."""
    rows, cols = 6, 16
    v = np.linspace(0.02, 0.16, rows + 1)
    u = np.linspace(0.0, 1.0, cols + 1)
    uu, vv = np.meshgrid(u, v)
    phi = vv.ravel() * math.pi
    lam = (uu.ravel() - 0.5) * 2 * math.pi
    scale = 1.0 + 0.06 + 0.02 * rng.random(phi.shape)
    pos = np.stack([
        scale * radii[0] * np.sin(phi) * np.sin(lam),
        scale * radii[1] * np.cos(phi),
        scale * radii[2] * np.sin(phi) * np.cos(lam),
    ], axis=1)
    tris = []
    nu = cols + 1
    for r in range(rows):
        for c in range(cols):
            a = r * nu + c
            tris.append((a, a + nu, a + nu + 1))
            tris.append((a, a + nu + 1, a + 1))
    uvs = np.full((len(pos), 2), [0.995, 0.005])  # corner texel: dark hair color
    return Mesh(pos, np.asarray(tris, dtype=np.int32), uvs=uvs)


def _merge(a: Mesh, b: Mesh) -> tuple[Mesh, np.ndarray]:
    verts = np.vstack([a.vertices, b.vertices])
    tris = np.vstack([a.triangles, b.triangles + a.n_vertices]).astype(np.int32)
    uvs = np.vstack([a.uvs, b.uvs]) if a.uvs is not None and b.uvs is not None else None
    merged = Mesh(verts, tris, uvs=uvs)
    merged.recompute_normals()
    extra = np.arange(a.n_vertices, len(verts))
    return merged, extra


def make_identity_scene(seed: int, n_vertices: int = 1600, n_id: int = 100,
                        n_expr: int = 100, image_size: int = 256,
                        n_cameras: int = 12, texture_size: int = 256,
                        clutter: bool = True, beta_scale: float = 0.35) -> IdentityScene:
    """Neutral-expression capture: a camera semicircle sweep in front of the
    face, images under a known light, exact 2D landmarks for the key view."""
    model = generate_synthetic_model(seed, n_vertices=n_vertices,
                                     n_id=n_id, n_expr=n_expr)
    rng = np.random.default_rng([seed, 101])
    beta_true = rng.normal(0.0, beta_scale, model.n_id)
    neutral = evaluate(model, PoseParams(), beta_true, np.zeros(model.n_expr))

    if clutter:
        cap = _hair_cap(rng)
        s_raw, hair = _merge(neutral, cap)
    else:
        s_raw = neutral.copy()
        hair = np.zeros(0, dtype=np.int64)
    s_raw.labels["hair"] = hair

    texture_gt = _procedural_texture(rng, texture_size)
    texture_gt.rgb[:8, -8:] = 0.08  # the clutter cap's dark corner
    coeffs = np.zeros((3, 9))
    coeffs[:, 0] = 0.95 / 0.28209479177387814
    coeffs[:, 1:4] = rng.uniform(-0.10, 0.10, (3, 3))
    light_gt = SHLight(coeffs)

    dist = 3.2 * 0.110
    cameras = []
    images = []
    azimuths = np.linspace(-1.3, 1.3, n_cameras)
    center = neutral.vertices.mean(axis=0)
    for az in azimuths:
        eye = center + dist * np.array([math.sin(az), 0.0, math.cos(az)])
        cam = look_at(eye, center, width=image_size, height=image_size, fov_deg=46.0)
        cameras.append(cam)
        images.append(rasterize(s_raw, cam, texture_gt, light_gt).image)

    key_index = n_cameras // 2
    lm_pix, _ = project_points(cameras[key_index],
                               neutral.vertices[model.landmark_indices])
    return IdentityScene(seed, model, beta_true, s_raw, hair, cameras, images,
                         key_index, lm_pix, texture_gt, light_gt)


# ---------------------------------------------------------------------------
# Expression clip with mouth-interior animation


N_ACTIVE_EXPR = 8


def _drivers(rng, n_frames: int, n_dims: int, amplitude: float) -> np.ndarray:
    """Band-limited smooth random walks (sums of low-frequency sinusoids).

    Frequencies are bounded in cycles per frame, so the frame-to-frame step is
    bounded by 2*pi*0.06*amplitude regardless of clip length.
    """
    t = np.arange(n_frames, dtype=np.float64)
    out = np.zeros((n_frames, n_dims))
    for d in range(n_dims):
        for _ in range(3):
            f = rng.uniform(0.01, 0.06)
            ph = rng.uniform(0, 2 * np.pi)
            out[:, d] += rng.uniform(0.3, 1.0) * np.sin(2 * np.pi * f * t + ph)
    peak = np.abs(out).max()
    if peak > 0:
        out *= amplitude / peak
    return out


def frame_texture(clip_or_scene, mouth_mask: np.ndarray, alpha_t: np.ndarray,
                  alpha_scale: float) -> Texture:
    """Ground-truth texture of one clip frame: the scene texture with the
    mouth-interior texels replaced by an expression-driven pattern the static
    texture cannot represent (the content the dynamic decoder must learn)."""
    scene = clip_or_scene.scene if isinstance(clip_or_scene, ExpressionClip) else clip_or_scene
    tex = scene.texture_gt.copy()
    h, w = tex.rgb.shape[:2]
    ys, xs = np.nonzero(mouth_mask)
    u = xs / max(w - 1, 1)
    v = ys / max(h - 1, 1)
    a0 = float(alpha_t[0]) / alpha_scale
    a1 = float(alpha_t[1]) / alpha_scale if len(alpha_t) > 1 else 0.0
    stripe = 0.5 + 0.5 * np.sin(2 * np.pi * (3.0 * u + 5.0 * v) + 3.0 * a0)
    level = 0.10 + 0.62 * stripe * (0.55 + 0.45 * a1)
    tex.rgb[ys, xs, 0] = level
    tex.rgb[ys, xs, 1] = 0.10 + 0.50 * (1.0 - stripe) * (0.55 + 0.45 * a0)
    tex.rgb[ys, xs, 2] = 0.12 + 0.20 * stripe
    tex.rgb = np.clip(tex.rgb, 0.0, 0.95)
    return tex


ALPHA_WALK_SCALE = 0.8


def make_expression_clip(scene: IdentityScene, n_frames: int, seed: int,
                         texture_size: int | None = None) -> ExpressionClip:
    """Fixed-camera clip: smooth expression walks, small head motion, exact
    per-frame landmarks, and time-varying mouth-interior texture content."""
    if n_frames < 1:
        raise InvalidInputError("n_frames must be >= 1")
    model = scene.model
    rng = np.random.default_rng([scene.seed, seed, 202])
    tex_size = texture_size or scene.texture_gt.rgb.shape[0]
    mouth_mask = bake_region_texel_mask(model, "mouth", (tex_size, tex_size))

    alpha = np.zeros((n_frames, model.n_expr))
    n_active = min(N_ACTIVE_EXPR, model.n_expr)
    alpha[:, :n_active] = _drivers(rng, n_frames, n_active, ALPHA_WALK_SCALE)
    if n_frames == 1:
        alpha[:] = 0.0  # degenerate clip starts neutral

    rot = _drivers(rng, n_frames, 3, 0.12)
    trans = _drivers(rng, n_frames, 3, 0.004)
    camera = scene.cameras[scene.key_index]

    images = []
    landmarks = []
    poses = []
    for t in range(n_frames):
        pose = PoseParams(theta_global=rot[t], translation=trans[t])
        poses.append(pose)
        mesh = evaluate(model, pose, scene.beta_true, alpha[t])
        tex_t = frame_texture(scene, mouth_mask, alpha[t], ALPHA_WALK_SCALE)
        images.append(rasterize(mesh, camera, tex_t, scene.light_gt).image)
        pix, _ = project_points(camera, mesh.vertices[model.landmark_indices])
        landmarks.append(pix)

    return ExpressionClip(seed, camera, images, landmarks, alpha, poses,
                          mouth_mask, scene)


def clip_tracked_frames(clip: ExpressionClip) -> list[TrackedFrame]:
    """Ground-truth parameters packaged as tracked frames."""
    out = []
    for i, pose in enumerate(clip.poses_true):
        out.append(TrackedFrame(i, clip.alpha_true[i].copy(), pose.copy(),
                                clip.scene.light_gt.copy()))
    return out


def region_image_mask(model: HeadModel, mesh: Mesh, camera: Camera,
                      texel_mask: np.ndarray) -> np.ndarray:
    """Image-space mask of pixels whose surface uv falls in a texel mask."""
    geom = rasterize_geometry(mesh, camera)
    h, w = texel_mask.shape
    out = np.zeros(geom.mask.shape, dtype=bool)
    m = geom.mask
    uv = geom.uv[m]
    xs = np.clip((uv[:, 0] * w).astype(np.int64), 0, w - 1)
    ys = np.clip(((1.0 - uv[:, 1]) * h).astype(np.int64), 0, h - 1)
    out[m] = texel_mask[ys, xs]
    return out


# ---------------------------------------------------------------------------
# Metrics


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray) -> float:
    """10 log10(1 / MSE) over masked pixels; identical inputs give inf."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("psnr needs images of equal dimensions")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidInputError("psnr mask is empty")
    diff = (a - b)[mask]
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


def _gauss_kernel_1d(size=11, sigma=1.5):
    t = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (t / sigma) ** 2)
    return k / k.sum()


def _filter2d(img: np.ndarray, k1d: np.ndarray) -> np.ndarray:
    """Separable 'same' filtering with edge-mirrored (symmetric) padding."""
    r = (len(k1d) - 1) // 2
    out = img
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (r, r)
        padded = np.pad(out, pad, mode="symmetric")
        acc = np.zeros_like(out)
        sl = [slice(None)] * out.ndim
        for i, kv in enumerate(k1d):
            sl[axis] = slice(i, i + out.shape[axis])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def ssim(a: np.ndarray, b: np.ndarray, mask: np.ndarray,
         k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) over masked pixels.

    Channels are scored independently and averaged; the dynamic range is 1.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError("ssim needs images of equal dimensions")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise InvalidInputError("ssim mask is empty")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    c1 = k1 * k1
    c2 = k2 * k2
    k = _gauss_kernel_1d()
    mu_a = _filter2d(a, k)
    mu_b = _filter2d(b, k)
    var_a = _filter2d(a * a, k) - mu_a * mu_a
    var_b = _filter2d(b * b, k) - mu_b * mu_b
    cov = _filter2d(a * b, k) - mu_a * mu_b
    ssim_map = (((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    return float(ssim_map[mask].mean())


# ---------------------------------------------------------------------------
# Scene bundles on disk (the same formats the real-data path ingests)


def write_scene(scene: IdentityScene, out_dir) -> None:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    save_obj(scene.s_raw, out / "scan.obj")
    save_head_model(scene.model, out / "model.avf")
    entries = []
    for i, (cam, img) in enumerate(zip(scene.cameras, scene.images)):
        rel = f"images/view_{i:02d}.png"
        write_png(out / rel, img)
        entries.append((rel, cam))
    save_camera_manifest(out / "cameras.json", entries)
    (out / "landmarks.json").write_text(json.dumps({
        "image_path": f"images/view_{scene.key_index:02d}.png",
        "key_index": scene.key_index,
        "points": [[float(x), float(y)] for x, y in scene.landmarks_2d],
    }, sort_keys=True))
    (out / "gt" / "beta.json").write_text(json.dumps(
        {"beta": [float(b) for b in scene.beta_true], "seed": scene.seed},
        sort_keys=True))
    save_light_json(out / "gt" / "light.json", scene.light_gt)
    write_png(out / "gt" / "texture.png", scene.texture_gt.rgb)


def write_clip(clip: ExpressionClip, out_dir) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "landmarks").mkdir(parents=True, exist_ok=True)
    (out / "gt").mkdir(parents=True, exist_ok=True)
    entries = []
    for i, img in enumerate(clip.images):
        rel = f"frames/frame_{i:04d}.png"
        write_png(out / rel, img)
        entries.append((rel, clip.camera))
        (out / "landmarks" / f"frame_{i:04d}.json").write_text(json.dumps({
            "image_path": rel,
            "points": [[float(x), float(y)] for x, y in clip.landmarks[i]],
        }, sort_keys=True))
    save_camera_manifest(out / "camera.json", entries[:1])
    (out / "gt" / "params.json").write_text(json.dumps({
        "alpha": [[float(v) for v in row] for row in clip.alpha_true],
        "theta_global": [[float(v) for v in p.theta_global] for p in clip.poses_true],
        "translation": [[float(v) for v in p.translation] for p in clip.poses_true],
        "seed": clip.seed,
    }, sort_keys=True))
