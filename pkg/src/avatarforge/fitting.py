"""Identity-preserving registration: face-plane estimation, scan cropping,
closed-form rigid alignment, and damped Gauss-Newton identity-shape fitting.

The rigid stage is an index-corresponded point-to-point solve (orthogonal
Procrustes, global optimum). The non-rigid stage is ICP-style: model vertices
chase their nearest points on the cropped scan surface while articulated
joints and expressions stay frozen at zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import CropFailureError, InvalidInputError, NonConvergenceError
from .geometry import Mesh, build_bvh, closest_points_on_mesh
from .headmodel import (
    HeadModel,
    PoseParams,
    evaluate_vertices,
    parameter_jacobian,
    rotation_to_rotvec,
)
from .rasterize import uv_coverage

__all__ = [
    "RigidTransform",
    "FitReport",
    "FitConfig",
    "estimate_face_plane",
    "crop_face",
    "rigid_align",
    "fit_identity",
    "bake_region_texel_mask",
]

NOSE_TIP_INDEX = 30  # canonical 68-landmark ordering


@dataclass
class RigidTransform:
    """Proper rigid motion x -> R @ x + t."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    def apply(self, points) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def inverse(self) -> "RigidTransform":
        return RigidTransform(self.rotation.T, -self.rotation.T @ self.translation)


@dataclass
class FitReport:
    iterations: int
    initial_rms: float
    final_rms: float
    residual_trace: list[float]
    converged: bool


# ---------------------------------------------------------------------------
# Face plane and crop


def estimate_face_plane(p_mesh, nose_index: int = NOSE_TIP_INDEX):
    """Least-squares plane through the 3D landmarks.

    Returns (normal, centroid); the normal is oriented so the nose-tip
    landmark lies on its positive side (outward from the face).
    """
    pts = np.asarray(p_mesh, dtype=np.float64)
    if len(pts) < 3:
        raise InvalidInputError("need at least 3 landmarks to fit a plane")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    _, s, vt = np.linalg.svd(centered, full_matrices=False)
    if s[1] < 1e-12 * max(s[0], 1e-300):
        raise InvalidInputError("landmarks are collinear; plane is undefined")
    normal = vt[2]
    if np.dot(pts[nose_index] - centroid, normal) < 0:
        normal = -normal
    return normal, centroid


def _rotation_between(a, b) -> np.ndarray:
    """Smallest rotation taking unit vector a to unit vector b."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    c = float(np.dot(a, b))
    axis = np.cross(a, b)
    s = np.linalg.norm(axis)
    if s < 1e-12:
        if c > 0:
            return np.eye(3)
        # Opposite vectors: rotate pi about any perpendicular axis.
        perp = np.array([1.0, 0.0, 0.0])
        if abs(a[0]) > 0.9:
            perp = np.array([0.0, 1.0, 0.0])
        axis = np.cross(a, perp)
        axis /= np.linalg.norm(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    axis /= s
    k = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def crop_face(s_raw: Mesh, p_mesh, hair_vertex_mask=None,
              margin: float = 0.2, back_margin: float = 0.4,
              nose_index: int = NOSE_TIP_INDEX):
    """Extract the face region of a raw scan.

    Removes hair-masked vertices, rotates the scan so the face normal points
    along +z, and keeps triangles touching the landmark bounding box expanded
    by `margin` per side (`back_margin` toward -z). Returns (s_crop, alignment)
    where alignment maps original coordinates into the cropped frame, so the
    inverse recovers every kept vertex exactly.
    """
    p_mesh = np.asarray(p_mesh, dtype=np.float64)
    verts = s_raw.vertices
    tris = s_raw.triangles

    keep_vertex = np.ones(len(verts), dtype=bool)
    if hair_vertex_mask is not None:
        hair = np.asarray(hair_vertex_mask)
        if hair.dtype == bool:
            keep_vertex &= ~hair
        else:
            keep_vertex[hair] = False

    normal, centroid = estimate_face_plane(p_mesh, nose_index=nose_index)
    R = _rotation_between(normal, np.array([0.0, 0.0, 1.0]))
    alignment = RigidTransform(R, -R @ centroid)

    rot_verts = alignment.apply(verts)
    rot_lm = alignment.apply(p_mesh)
    lo = rot_lm.min(axis=0)
    hi = rot_lm.max(axis=0)
    extent = hi - lo
    lo_box = lo - margin * extent
    hi_box = hi + margin * extent
    lo_box[2] = lo[2] - back_margin * extent[2]

    inside = keep_vertex & (rot_verts >= lo_box).all(axis=1) & (rot_verts <= hi_box).all(axis=1)
    tri_hair_free = keep_vertex[tris].all(axis=1)
    tri_keep = tri_hair_free & inside[tris].any(axis=1)
    if not tri_keep.any():
        raise CropFailureError("face crop removed every triangle")

    used = np.unique(tris[tri_keep])
    remap = np.full(len(verts), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    new_tris = remap[tris[tri_keep]].astype(np.int32)
    labels = {}
    for name, idx in s_raw.labels.items():
        kept = remap[idx]
        labels[name] = kept[kept >= 0]
    crop = Mesh(
        rot_verts[used], new_tris,
        uvs=None if s_raw.uvs is None else s_raw.uvs[used],
        labels=labels,
    )
    crop.recompute_normals()
    return crop, alignment


# ---------------------------------------------------------------------------
# Rigid alignment (orthogonal Procrustes)


def rigid_align(s_lm, model_lm) -> RigidTransform:
    """Least-squares rigid motion taking model_lm onto s_lm (by index).

    Closed-form SVD solution with reflection correction; the returned
    transform is the global optimum of the point-to-point objective.
    """
    s = np.asarray(s_lm, dtype=np.float64)
    m = np.asarray(model_lm, dtype=np.float64)
    if s.shape != m.shape or len(s) < 3:
        raise InvalidInputError("rigid_align needs matching point sets of >= 3 points")
    cs = s.mean(axis=0)
    cm = m.mean(axis=0)
    H = (m - cm).T @ (s - cs)
    U, sv, Vt = np.linalg.svd(H)
    if sv[1] < 1e-12 * max(sv[0], 1e-300):
        raise InvalidInputError("degenerate landmark configuration (rank < 2)")
    d = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ np.diag([1.0, 1.0, d]) @ U.T
    t = cs - R @ cm
    return RigidTransform(R, t)


# ---------------------------------------------------------------------------
# Identity fitting (point-to-surface Gauss-Newton on beta)


@dataclass
class FitConfig:
    max_iterations: int = 600
    tol: float = 1e-6
    tikhonov: float = 1e-3          # scaled by mean squared basis magnitude
    damping_init: float = 1e-4
    refine_pose: bool = True        # also solve global rotation/translation
    vertex_region: str | None = "face"  # model region for correspondences
    landmark_box_margin: float | None = 0.2  # clip fit region to landmark bbox
    keep_fraction: float = 0.95     # trimmed least squares over the best matches
    point_weight: float = 0.1       # point-to-point stabilizer vs point-to-plane
    rms_floor_rel: float = 1e-5     # residual below this x bbox diag is converged
    max_rejects: int = 5


def _pose_from_rigid(model: HeadModel, init: RigidTransform) -> PoseParams:
    """Convert x -> R x + t into the model's rotate-about-global-joint pose."""
    g = model.joint_rest[0]
    theta = rotation_to_rotvec(init.rotation)
    translation = init.translation + init.rotation @ g - g
    return PoseParams(theta_global=theta, translation=translation)


def fit_identity(s_crop: Mesh, model: HeadModel, init: RigidTransform,
                 config: FitConfig | None = None):
    """Recover identity shape coefficients from a cropped scan.

    ICP outer loop: evaluate the model, find each fit vertex's nearest point on
    s_crop through a BVH, then take a Levenberg-damped Gauss-Newton step on
    beta (re-refining the global pose unless disabled) for the Tikhonov-
    regularized point-to-surface objective. Articulated joints and expressions
    stay zero. The accept test uses the true trimmed RMS surface distance; the
    step itself linearizes point-to-plane (plus a small point-to-point term),
    which is the same objective gradient with far better GN curvature.

    Returns (beta, pose, report). Raises NonConvergenceError (carrying the
    report) after `max_rejects` consecutive non-decreasing damped retries.
    """
    config = config or FitConfig()
    if s_crop.n_triangles == 0:
        raise InvalidInputError("s_crop is empty")
    bvh = build_bvh(s_crop)

    if config.vertex_region and config.vertex_region in model.region_vertices:
        fit_idx = model.region_vertices[config.vertex_region]
    else:
        fit_idx = np.arange(model.n_vertices)
    if config.landmark_box_margin is not None:
        # Only fit where the crop can have surface: the scan was cropped to the
        # landmark bounding box, so clip the fit region to the model's own
        # landmark box (template frame, same margin convention as crop_face).
        lm_t = model.template[model.landmark_indices]
        lo = lm_t.min(axis=0)
        hi = lm_t.max(axis=0)
        pad = config.landmark_box_margin * (hi - lo)
        tpl = model.template[fit_idx]
        in_box = ((tpl[:, :2] >= lo[:2] - pad[:2]) & (tpl[:, :2] <= hi[:2] + pad[:2])).all(axis=1)
        if in_box.any():
            fit_idx = fit_idx[in_box]
    n_keep = max(4, int(np.ceil(config.keep_fraction * len(fit_idx))))

    beta = np.zeros(model.n_id)
    alpha = np.zeros(model.n_expr)
    pose = _pose_from_rigid(model, init)

    basis_scale = float(np.mean(np.sum(model.identity_basis ** 2, axis=2)))
    lam = config.tikhonov * max(basis_scale, 1e-300)

    corners = s_crop.triangle_corners()
    face_n = np.cross(corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0])
    norms = np.linalg.norm(face_n, axis=1, keepdims=True)
    norms[norms < 1e-300] = 1.0
    face_n /= norms

    def residual_rms(b, p):
        """Trimmed point-to-surface RMS over the best-matching fixed count.

        A fixed keep count makes the trimmed objective comparable across
        iterations, so accepted steps are provably non-increasing.
        """
        v = evaluate_vertices(model, p, b, alpha, vertex_indices=fit_idx)
        q, tri, d = closest_points_on_mesh(v, bvh)
        if n_keep < len(fit_idx):
            kept = np.argpartition(d, n_keep - 1)[:n_keep]
        else:
            kept = np.arange(len(fit_idx))
        r = v[kept] - q[kept]
        rms = float(np.sqrt(np.mean(np.sum(r * r, axis=1))))
        return rms, r, kept, tri

    rms, r, kept, tri = residual_rms(beta, pose)
    trace = [rms]
    initial_rms = rms
    mu = config.damping_init
    converged = False
    iterations = 0
    rejects = 0
    w_pp = math.sqrt(max(config.point_weight, 0.0))
    diag = s_crop.bbox_diagonal()
    abs_floor = 1e-12 * diag
    rms_floor = config.rms_floor_rel * diag

    for it in range(config.max_iterations):
        iterations = it + 1
        if rms <= rms_floor:
            # Dead fit: residual at the solver's geometric noise floor, where
            # trimmed-correspondence churn swamps any further descent.
            converged = True
            break
        rows = fit_idx[kept]
        J = parameter_jacobian(model, pose, beta, alpha, "beta", vertex_indices=rows)
        n_beta = model.n_id
        if config.refine_pose:
            Jp = parameter_jacobian(model, pose, beta, alpha, "pose", vertex_indices=rows)
            J = np.hstack([J, Jp[:, 0:3], Jp[:, 15:18]])
        n_q = face_n[tri[kept]]
        J3 = J.reshape(len(kept), 3, -1)
        J_pl = np.einsum("nc,ncp->np", n_q, J3)
        r_pl = np.einsum("nc,nc->n", n_q, r)
        rhs = J_pl.T @ r_pl + (w_pp * w_pp) * (J.T @ r.ravel())
        rhs[:n_beta] += lam * beta
        H = J_pl.T @ J_pl + (w_pp * w_pp) * (J.T @ J)
        H[np.arange(n_beta), np.arange(n_beta)] += lam
        diag_mean = max(float(np.trace(H)) / len(H), 1e-300)

        stepped = False
        best_candidate = np.inf
        while rejects < config.max_rejects:
            Hd = H + (mu * diag_mean) * np.eye(len(H))
            try:
                delta = np.linalg.solve(Hd, -rhs)
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(Hd, -rhs, rcond=None)[0]
            beta_c = beta + delta[:n_beta]
            pose_c = pose
            if config.refine_pose:
                pose_c = pose.copy()
                pose_c.theta_global = pose.theta_global + delta[n_beta:n_beta + 3]
                pose_c.translation = pose.translation + delta[n_beta + 3:n_beta + 6]
            rms_c, r_c, kept_c, tri_c = residual_rms(beta_c, pose_c)
            if rms_c <= rms * (1.0 + 1e-12):
                beta, pose, rms, r, kept, tri = beta_c, pose_c, rms_c, r_c, kept_c, tri_c
                mu = max(mu * 0.5, 1e-12)
                rejects = 0
                stepped = True
                break
            best_candidate = min(best_candidate, rms_c)
            mu *= 10.0
            rejects += 1
        if not stepped:
            stall_band = max(1e-3, 10.0 * config.tol)  # trimmed-set churn scale
            if best_candidate <= rms * (1.0 + stall_band) + abs_floor:
                # Damped retries stalled within tolerance of the current
                # residual: the solve sits at its floor, not diverging.
                converged = True
                break
            report = FitReport(iterations, initial_rms, rms, trace, False)
            raise NonConvergenceError(
                f"identity fit stalled after {config.max_rejects} damped retries",
                report=report)
        trace.append(rms)
        if len(trace) >= 2:
            prev = trace[-2]
            if prev > 0 and abs(prev - rms) / prev < config.tol:
                converged = True
                break
        if rms <= abs_floor:
            converged = True
            break

    report = FitReport(iterations, initial_rms, rms, trace, converged)
    return beta, pose, report


def fit_region_submesh(model: HeadModel, mesh: Mesh, config: FitConfig | None = None) -> Mesh:
    """Triangles of an evaluated model mesh whose vertices all lie in the fit
    region (same selection fit_identity uses for correspondences)."""
    config = config or FitConfig()
    if config.vertex_region and config.vertex_region in model.region_vertices:
        idx = model.region_vertices[config.vertex_region]
    else:
        idx = np.arange(model.n_vertices)
    if config.landmark_box_margin is not None:
        lm_t = model.template[model.landmark_indices]
        lo = lm_t.min(axis=0)
        hi = lm_t.max(axis=0)
        pad = config.landmark_box_margin * (hi - lo)
        tpl = model.template[idx]
        in_box = ((tpl[:, :2] >= lo[:2] - pad[:2]) & (tpl[:, :2] <= hi[:2] + pad[:2])).all(axis=1)
        idx = idx[in_box]
    sel = np.zeros(model.n_vertices, dtype=bool)
    sel[idx] = True
    tri_keep = sel[model.triangles].all(axis=1)
    sub = Mesh(mesh.vertices.copy(), model.triangles[tri_keep].copy(),
               uvs=None if mesh.uvs is None else mesh.uvs.copy())
    sub.recompute_normals()
    return sub


def crop_region_hausdorff(model: HeadModel, fitted: Mesh, s_crop: Mesh,
                          samples_per_triangle: int = 4, seed: int = 0,
                          config: FitConfig | None = None):
    """Symmetric Hausdorff between the fitted surface and the crop, measured
    where both surfaces exist.

    Forward: fit-region submesh samples -> crop surface. Backward: crop
    samples -> full fitted head (the head always covers the crop's footprint,
    so neither direction is polluted by coverage-boundary artifacts).
    Returns (forward, backward, symmetric).
    """
    from .geometry import build_bvh, closest_points_on_mesh, sample_surface

    sub = fit_region_submesh(model, fitted, config)
    fwd_pts = sample_surface(sub, samples_per_triangle, seed)
    _, _, d_f = closest_points_on_mesh(fwd_pts, build_bvh(s_crop))
    bwd_pts = sample_surface(s_crop, samples_per_triangle, seed)
    _, _, d_b = closest_points_on_mesh(bwd_pts, build_bvh(fitted))
    forward = float(d_f.max())
    backward = float(d_b.max())
    return forward, backward, max(forward, backward)


# ---------------------------------------------------------------------------
# Texture-space region masks (eyes/mouth blending mask)


def bake_region_texel_mask(model: HeadModel, regions, size: tuple[int, int]):
    """Rasterize vertex regions into a UV texel mask.

    `regions` is a region name or list of names from model.region_vertices.
    A texel is set when the interpolated vertex-region indicator reaches 0.5.
    """
    if isinstance(regions, str):
        regions = [regions]
    indicator = np.zeros(model.n_vertices)
    for name in regions:
        if name not in model.region_vertices:
            raise InvalidInputError(f"model has no region {name!r}")
        indicator[model.region_vertices[name]] = 1.0
    mesh = Mesh(model.template, model.triangles, uvs=model.uvs)
    h, w = size
    uvr = uv_coverage(mesh, h, w)
    mask = np.zeros((h, w), dtype=bool)
    m = uvr.mask
    vals = np.einsum("pk,pk->p", uvr.bary[m], indicator[model.triangles[uvr.tri_id[m]]])
    mask[m] = vals >= 0.5
    return mask
