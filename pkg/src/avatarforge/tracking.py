"""Identity-fixed per-frame tracking: expression, pose and auxiliary lighting
recovered from a fixed-camera clip, with sequential warm starts inside chunks
and independent chunks for parallel execution.

The camera stays at the world-origin calibration; the subject's motion is what
gets estimated. Identity coefficients are never modified here.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, project_points
from .errors import InvalidInputError
from .headmodel import HeadModel, PoseParams, evaluate, parameter_jacobian
from .rasterize import RenderOutput, Texture, rasterize_geometry, sample_texture
from .sh import SHLight, sh_basis_array

__all__ = [
    "TrackedFrame",
    "TrackConfig",
    "ChunkPlan",
    "TrackResult",
    "track_frame",
    "track_sequence",
    "neutral_frame",
    "save_tracked_jsonl",
    "load_tracked_jsonl",
]


@dataclass
class TrackedFrame:
    frame_index: int
    alpha: np.ndarray
    pose: PoseParams
    light: SHLight
    landmark_rms: float = 0.0      # pixels
    photometric_l1: float = 0.0    # face-masked mean absolute
    converged: bool = True

    def copy(self) -> "TrackedFrame":
        return TrackedFrame(self.frame_index, self.alpha.copy(), self.pose.copy(),
                            self.light.copy(), self.landmark_rms,
                            self.photometric_l1, self.converged)


@dataclass
class ChunkPlan:
    """Contiguous frame ranges, each starting from the global calibration."""

    boundaries: list[tuple[int, int]]  # half-open [start, end)

    @classmethod
    def split(cls, n_frames: int, n_chunks: int) -> "ChunkPlan":
        if n_chunks < 1 or n_frames < 1:
            raise InvalidInputError("need n_chunks >= 1 and n_frames >= 1")
        n_chunks = min(n_chunks, n_frames)
        sizes = np.full(n_chunks, n_frames // n_chunks)
        sizes[: n_frames % n_chunks] += 1
        bounds = []
        start = 0
        for s in sizes:
            bounds.append((start, start + int(s)))
            start += int(s)
        return cls(bounds)


@dataclass
class TrackConfig:
    landmark_iterations: int = 25
    landmark_tol: float = 1e-10
    alpha_prior: float = 1e-3          # pulls expressions toward zero
    temporal_prior: float = 1e-2       # pulls expressions toward the warm start
    damping_init: float = 1e-4
    max_rejects: int = 6
    light_steps: int = 40
    light_lr: float = 0.05
    resolution_schedule: tuple[float, ...] = (0.5, 1.0)
    optimize_intrinsics: bool = False  # adds fx, fy to the per-frame solve
    photometric: bool = True


def neutral_frame(model: HeadModel, frame_index: int = 0) -> TrackedFrame:
    """Chunk-head initialization derived from the global calibration: the
    subject at rest at the origin under ambient light."""
    return TrackedFrame(frame_index, np.zeros(model.n_expr), PoseParams(),
                        SHLight.ambient(1.0))


def _landmark_residual(model, camera, alpha, pose, landmarks_2d, fx_fy=None):
    lm_idx = model.landmark_indices
    verts = evaluate(model, pose, np.zeros(model.n_id), alpha).vertices
    # identity is injected by the caller through the model's template; see
    # track_frame, which bakes beta into a shifted model once per call.
    pix, depth = project_points(camera, verts[lm_idx])
    if fx_fy is not None:
        # re-project with overridden intrinsics
        cam_pts = verts[lm_idx] @ camera.rotation.T + camera.translation
        z = cam_pts[:, 2]
        pix = np.stack([fx_fy[0] * cam_pts[:, 0] / z + camera.cx,
                        fx_fy[1] * cam_pts[:, 1] / z + camera.cy], axis=1)
    return (pix - landmarks_2d), depth, verts


def _bake_identity(model: HeadModel, beta) -> HeadModel:
    """Model with identity coefficients folded into the template (kept fixed)."""
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (model.n_id,):
        raise InvalidInputError("beta dimension mismatch")
    shifted = model.template + np.tensordot(beta, model.identity_basis, axes=1)
    return HeadModel(
        template=shifted,
        identity_basis=np.zeros((0, model.n_vertices, 3)),
        expression_basis=model.expression_basis,
        joint_rest=model.joint_rest,
        joint_parent=model.joint_parent,
        skin_weights=model.skin_weights,
        landmark_indices=model.landmark_indices,
        uvs=model.uvs,
        triangles=model.triangles,
        region_vertices=model.region_vertices,
    )


def _fit_light(geom: RenderOutput, t_static: Texture, image: np.ndarray,
               light: SHLight, steps: int, lr: float) -> tuple[SHLight, float]:
    """Photometric light refinement with the texture fixed (analytic gradient).

    Rendered color is albedo(uv) * (Y(n) . c); the L1 gradient in c is exact.
    Returns (light, final masked L1).
    """
    m = geom.mask
    if not m.any():
        return light, float("inf")
    albedo = sample_texture(t_static, geom.uv[m])
    Y = sh_basis_array(geom.normal[m])
    target = image[m]
    c = light.coefficients.copy()

    def loss_of(cc):
        rendered = albedo * np.clip(Y @ cc.T, 0.0, None)
        return float(np.abs(rendered - target).mean()), rendered

    best, _ = loss_of(c)
    step = lr
    for _ in range(steps):
        irr = Y @ c.T
        rendered = albedo * np.clip(irr, 0.0, None)
        sign = np.sign(rendered - target)
        active = (irr > 0.0).astype(np.float64)
        grad = ((sign * albedo * active).T @ Y) / len(Y)
        cand = c - step * grad / max(np.abs(grad).max(), 1e-12)
        cand_loss, _ = loss_of(cand)
        if cand_loss <= best:
            c = cand
            best = cand_loss
            step = min(step * 1.3, lr * 4)
        else:
            step *= 0.5
            if step < 1e-6:
                break
    return SHLight(c), best


def track_frame(image: np.ndarray, landmarks_2d, camera: Camera,
                model: HeadModel, beta, t_static: Texture,
                init: TrackedFrame, config: TrackConfig | None = None) -> TrackedFrame:
    """Recover (alpha, pose, light) for one frame with identity fixed.

    Damped Gauss-Newton on the 2D landmark reprojection with expression and
    temporal priors, then photometric light refinement against the static
    texture at the configured resolution schedule. Divergence (worse landmark
    RMS than the warm start) returns the init parameters flagged unconverged.
    """
    config = config or TrackConfig()
    landmarks_2d = np.asarray(landmarks_2d, dtype=np.float64)
    baked = _bake_identity(model, beta)
    n_expr = baked.n_expr
    lm_idx = baked.landmark_indices

    alpha = init.alpha.copy()
    pose = init.pose.copy()
    alpha0 = init.alpha.copy()
    fx_fy = np.array([camera.fx, camera.fy]) if config.optimize_intrinsics else None

    def lm_rms(a, p, ff):
        r, _, _ = _landmark_residual(baked, camera, a, p, landmarks_2d, ff)
        return float(np.sqrt(np.mean(np.sum(r * r, axis=1)))), r

    def prior_cost(a):
        return (config.alpha_prior * float(a @ a)
                + config.temporal_prior * float((a - alpha0) @ (a - alpha0)))

    rms, r = lm_rms(alpha, pose, fx_fy)
    cost = rms * rms * len(landmarks_2d) + prior_cost(alpha)
    init_rms = rms
    mu = config.damping_init
    converged = True

    n_pose = 6
    n_int = 2 if config.optimize_intrinsics else 0
    for _ in range(config.landmark_iterations):
        # d(pixel)/d(vertex) rows at the current landmark depths.
        verts = evaluate(baked, pose, np.zeros(0), alpha).vertices[lm_idx]
        cam_pts = verts @ camera.rotation.T + camera.translation
        z = np.where(np.abs(cam_pts[:, 2]) < 1e-12, 1e-12, cam_pts[:, 2])
        fx = fx_fy[0] if fx_fy is not None else camera.fx
        fy = fx_fy[1] if fx_fy is not None else camera.fy
        dpix_dcam = np.zeros((len(lm_idx), 2, 3))
        dpix_dcam[:, 0, 0] = fx / z
        dpix_dcam[:, 0, 2] = -fx * cam_pts[:, 0] / (z * z)
        dpix_dcam[:, 1, 1] = fy / z
        dpix_dcam[:, 1, 2] = -fy * cam_pts[:, 1] / (z * z)
        dpix_dvert = np.einsum("nab,bc->nac", dpix_dcam, camera.rotation)

        J_alpha = parameter_jacobian(baked, pose, np.zeros(0), alpha, "alpha",
                                     vertex_indices=lm_idx).reshape(len(lm_idx), 3, -1)
        J_pose_full = parameter_jacobian(baked, pose, np.zeros(0), alpha, "pose",
                                         vertex_indices=lm_idx).reshape(len(lm_idx), 3, -1)
        J_pose = np.concatenate([J_pose_full[:, :, 0:3], J_pose_full[:, :, 15:18]], axis=2)
        J3 = np.concatenate([J_alpha, J_pose], axis=2)
        J = np.einsum("nac,ncp->nap", dpix_dvert, J3).reshape(2 * len(lm_idx), -1)
        if config.optimize_intrinsics:
            J_int = np.zeros((len(lm_idx), 2, 2))
            J_int[:, 0, 0] = cam_pts[:, 0] / z
            J_int[:, 1, 1] = cam_pts[:, 1] / z
            J = np.hstack([J, J_int.reshape(2 * len(lm_idx), 2)])

        g = J.T @ r.ravel()
        H = J.T @ J
        g[:n_expr] += config.alpha_prior * alpha + config.temporal_prior * (alpha - alpha0)
        H[np.arange(n_expr), np.arange(n_expr)] += config.alpha_prior + config.temporal_prior
        diag_mean = max(float(np.trace(H)) / len(H), 1e-300)

        stepped = False
        rejects = 0
        while rejects < config.max_rejects:
            Hd = H + mu * diag_mean * np.eye(len(H))
            try:
                delta = np.linalg.solve(Hd, -g)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(Hd, -g, rcond=None)[0]
            a_c = alpha + delta[:n_expr]
            p_c = pose.copy()
            p_c.theta_global = pose.theta_global + delta[n_expr:n_expr + 3]
            p_c.translation = pose.translation + delta[n_expr + 3:n_expr + 6]
            ff_c = fx_fy
            if config.optimize_intrinsics:
                ff_c = fx_fy + delta[n_expr + n_pose:n_expr + n_pose + n_int]
            rms_c, r_c = lm_rms(a_c, p_c, ff_c)
            cost_c = rms_c * rms_c * len(landmarks_2d) + prior_cost(a_c)
            if cost_c <= cost * (1.0 + 1e-14):
                improved = cost - cost_c
                alpha, pose, fx_fy, rms, r, cost = a_c, p_c, ff_c, rms_c, r_c, cost_c
                mu = max(mu * 0.5, 1e-14)
                stepped = True
                break
            mu *= 10.0
            rejects += 1
        if not stepped:
            break
        if improved <= config.landmark_tol * max(cost, 1e-300):
            break

    if rms > init_rms * (1.0 + 1e-9) and init_rms > 0:
        # Diverged: clamp to the warm start.
        out = init.copy()
        out.frame_index = init.frame_index
        out.converged = False
        return out

    light = init.light.copy()
    photometric = 0.0
    if config.photometric and t_static is not None:
        mesh = evaluate(baked, pose, np.zeros(0), alpha)
        for scale in config.resolution_schedule:
            cam_s = camera.scaled(scale) if scale != 1.0 else camera
            img_s = _downscale_image(image, scale)
            geom = rasterize_geometry(mesh, cam_s)
            light, photometric = _fit_light(geom, t_static, img_s, light,
                                            config.light_steps, config.light_lr)

    return TrackedFrame(init.frame_index, alpha, pose, light,
                        landmark_rms=rms, photometric_l1=photometric,
                        converged=converged)


def _downscale_image(image: np.ndarray, scale: float) -> np.ndarray:
    if scale == 1.0:
        return image
    step = int(round(1.0 / scale))
    h, w = image.shape[:2]
    h2, w2 = h // step, w // step
    return image[: h2 * step, : w2 * step].reshape(h2, step, w2, step, -1).mean(axis=(1, 3))


@dataclass
class TrackResult:
    frames: list[TrackedFrame]
    gaps: list[int] = field(default_factory=list)
    plan: ChunkPlan | None = None


def track_sequence(frames: list[np.ndarray], landmarks: list, camera_global: Camera,
                   model: HeadModel, beta, t_static: Texture, n_chunks: int = 1,
                   config: TrackConfig | None = None, jobs: int | None = None) -> TrackResult:
    """Track an ordered clip in independent contiguous chunks.

    Within a chunk, frames run sequentially warm-started from the previous
    result; every chunk starts from the global-calibration neutral state, so
    chunks can run concurrently with no shared mutable state. Frames whose
    landmarks are missing (None) are recorded as gaps, not fabricated.
    Raises InvalidInputError if every frame fails.
    """
    if len(frames) != len(landmarks):
        raise InvalidInputError("frames and landmarks must align")
    if len(frames) == 0:
        raise InvalidInputError("empty sequence")
    config = config or TrackConfig()
    plan = ChunkPlan.split(len(frames), n_chunks)
    beta = np.asarray(beta, dtype=np.float64).copy()

    def run_chunk(bounds):
        start, end = bounds
        out = []
        gaps = []
        warm = neutral_frame(model, start)
        for fi in range(start, end):
            if landmarks[fi] is None:
                gaps.append(fi)
                continue
            warm.frame_index = fi
            result = track_frame(frames[fi], landmarks[fi], camera_global,
                                 model, beta, t_static, warm, config)
            out.append(result)
            warm = result.copy()
        return out, gaps

    if len(plan.boundaries) == 1:
        chunk_results = [run_chunk(plan.boundaries[0])]
    else:
        workers = jobs or len(plan.boundaries)
        with ThreadPoolExecutor(max_workers=workers) as pool:
            chunk_results = list(pool.map(run_chunk, plan.boundaries))

    tracked: list[TrackedFrame] = []
    gaps: list[int] = []
    for out, g in chunk_results:
        tracked.extend(out)
        gaps.extend(g)
    if not tracked:
        raise InvalidInputError("every frame failed to track")
    tracked.sort(key=lambda f: f.frame_index)
    return TrackResult(tracked, gaps, plan)


# ---------------------------------------------------------------------------
# JSON-lines serialization (one TrackedFrame per line)


def save_tracked_jsonl(path, result: TrackResult) -> None:
    lines = []
    for f in result.frames:
        lines.append(json.dumps({
            "frame_index": f.frame_index,
            "alpha": [float(x) for x in f.alpha],
            "theta_global": [float(x) for x in f.pose.theta_global],
            "theta_joints": [float(x) for x in f.pose.theta_joints.ravel()],
            "translation": [float(x) for x in f.pose.translation],
            "light": [float(x) for x in f.light.coefficients.ravel()],
            "landmark_rms": f.landmark_rms,
            "photometric_l1": f.photometric_l1,
            "converged": f.converged,
        }, sort_keys=True))
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_tracked_jsonl(path) -> TrackResult:
    frames = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        frames.append(TrackedFrame(
            frame_index=int(d["frame_index"]),
            alpha=np.asarray(d["alpha"], dtype=np.float64),
            pose=PoseParams(np.asarray(d["theta_global"]),
                            np.asarray(d["theta_joints"]).reshape(4, 3),
                            np.asarray(d["translation"])),
            light=SHLight(np.asarray(d["light"]).reshape(3, 9)),
            landmark_rms=float(d["landmark_rms"]),
            photometric_l1=float(d["photometric_l1"]),
            converged=bool(d["converged"]),
        ))
    return TrackResult(frames)
