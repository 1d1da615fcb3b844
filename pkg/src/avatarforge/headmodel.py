"""Parametric head: linear identity/expression blendshapes over a skinned 5-joint
skeleton, analytic parameter Jacobians, and a procedural model generator.

The model evaluates as
    vertices = LBS(template + sum(beta_i * B_id_i) + sum(alpha_j * B_expr_j); theta) + t
with rotation-vector joint parameters (1 global + neck + jaw + two eye joints)
and rest-pose joint locations fixed in the model. Identity fitting freezes the
articulated joints, so regressing joints from shape is deliberately omitted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import avf
from .errors import InvalidInputError
from .geometry import Mesh, compute_vertex_normals

__all__ = [
    "HeadModel",
    "PoseParams",
    "evaluate",
    "parameter_jacobian",
    "generate_synthetic_model",
    "rodrigues",
    "rodrigues_jacobian",
    "rotation_to_rotvec",
    "save_head_model",
    "load_head_model",
]

N_JOINTS = 5  # global, neck, jaw, left eye, right eye


# ---------------------------------------------------------------------------
# Rotation helpers


def rodrigues(rvec) -> np.ndarray:
    """Rotation vector (radians * unit axis) to a 3x3 rotation matrix."""
    v = np.asarray(rvec, dtype=np.float64)
    theta = float(np.linalg.norm(v))
    if theta < 1e-12:
        return np.eye(3)
    k = v / theta
    kx = _skew(k)
    return np.eye(3) + math.sin(theta) * kx + (1.0 - math.cos(theta)) * (kx @ kx)


def rotation_to_rotvec(R) -> np.ndarray:
    """Log map of a rotation matrix; magnitude kept in [0, pi]."""
    R = np.asarray(R, dtype=np.float64)
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_t)
    if theta < 1e-12:
        return np.zeros(3)
    if math.pi - theta < 1e-6:
        # Near pi the off-diagonal formula degenerates; use the symmetric part.
        A = (R + np.eye(3)) / 2.0
        axis = np.sqrt(np.clip(np.diag(A), 0.0, None))
        # Fix signs from the largest component.
        i = int(np.argmax(axis))
        axis = axis * np.sign(A[i] + (A[i] == 0))
        axis /= np.linalg.norm(axis)
        return theta * axis
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    return theta / (2.0 * math.sin(theta)) * w


def _skew(v) -> np.ndarray:
    return np.array([
        [0.0, -v[2], v[1]],
        [v[2], 0.0, -v[0]],
        [-v[1], v[0], 0.0],
    ])


def rodrigues_jacobian(rvec) -> np.ndarray:
    """d(rodrigues)/d(rvec): array (3, 3, 3), entry [k] = dR/dv_k.

    Closed form after Gallego & Yezzi; falls back to skew generators at zero.
    """
    v = np.asarray(rvec, dtype=np.float64)
    theta_sq = float(v @ v)
    out = np.empty((3, 3, 3))
    if theta_sq < 1e-16:
        for k in range(3):
            e = np.zeros(3)
            e[k] = 1.0
            out[k] = _skew(e)
        return out
    R = rodrigues(v)
    for k in range(3):
        e = np.zeros(3)
        e[k] = 1.0
        term = v[k] * _skew(v) + _skew(np.cross(v, (np.eye(3) - R) @ e))
        out[k] = (term / theta_sq) @ R
    return out


# ---------------------------------------------------------------------------
# Types


@dataclass
class PoseParams:
    """Rotation-vector pose: global rotation + 4 articulated joints + translation."""

    theta_global: np.ndarray = field(default_factory=lambda: np.zeros(3))
    theta_joints: np.ndarray = field(default_factory=lambda: np.zeros((4, 3)))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.theta_global = np.asarray(self.theta_global, dtype=np.float64).reshape(3)
        self.theta_joints = np.asarray(self.theta_joints, dtype=np.float64).reshape(4, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    def copy(self) -> "PoseParams":
        return PoseParams(self.theta_global.copy(), self.theta_joints.copy(),
                          self.translation.copy())

    def as_vector(self) -> np.ndarray:
        """(18,) layout: theta_global, theta_joints (row-major), translation."""
        return np.concatenate([self.theta_global, self.theta_joints.ravel(),
                               self.translation])

    @classmethod
    def from_vector(cls, vec) -> "PoseParams":
        vec = np.asarray(vec, dtype=np.float64).reshape(18)
        return cls(vec[:3], vec[3:15].reshape(4, 3), vec[15:])


@dataclass
class HeadModel:
    """Immutable-by-convention blendshape head. Evaluate/jacobian are pure."""

    template: np.ndarray            # (N, 3)
    identity_basis: np.ndarray      # (n_id, N, 3)
    expression_basis: np.ndarray    # (n_expr, N, 3)
    joint_rest: np.ndarray          # (5, 3)
    joint_parent: np.ndarray        # (5,), -1 for the root
    skin_weights: np.ndarray        # (N, 5) convex rows
    landmark_indices: np.ndarray    # (68,)
    uvs: np.ndarray                 # (N, 2)
    triangles: np.ndarray           # (M, 3)
    region_vertices: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def n_vertices(self) -> int:
        return len(self.template)

    @property
    def n_id(self) -> int:
        return len(self.identity_basis)

    @property
    def n_expr(self) -> int:
        return len(self.expression_basis)

    def validate(self) -> None:
        w = self.skin_weights
        if (w < -1e-9).any() or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
            raise InvalidInputError("skin weights must be convex per row")
        lm = self.landmark_indices
        if len(np.unique(lm)) != len(lm) or lm.max() >= self.n_vertices:
            raise InvalidInputError("landmark indices must be distinct and in range")
        for basis in (self.identity_basis, self.expression_basis):
            if basis.shape[1] != self.n_vertices:
                raise InvalidInputError("basis vertex count mismatch")


# ---------------------------------------------------------------------------
# Evaluation


def _joint_transforms(model: HeadModel, pose: PoseParams):
    """World affine transform (R, t) per joint, rotating about its rest position."""
    thetas = np.vstack([pose.theta_global[None, :], pose.theta_joints])
    world_R = np.empty((N_JOINTS, 3, 3))
    world_t = np.empty((N_JOINTS, 3))
    for j in range(N_JOINTS):
        Rl = rodrigues(thetas[j])
        r = model.joint_rest[j]
        tl = r - Rl @ r
        p = model.joint_parent[j]
        if p < 0:
            world_R[j] = Rl
            world_t[j] = tl
        else:
            world_R[j] = world_R[p] @ Rl
            world_t[j] = world_R[p] @ tl + world_t[p]
    return world_R, world_t


def _shaped_vertices(model: HeadModel, beta, alpha) -> np.ndarray:
    beta = np.asarray(beta, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if beta.shape != (model.n_id,):
        raise InvalidInputError(f"beta must have shape ({model.n_id},), got {beta.shape}")
    if alpha.shape != (model.n_expr,):
        raise InvalidInputError(f"alpha must have shape ({model.n_expr},), got {alpha.shape}")
    shaped = model.template.copy()
    if model.n_id:
        shaped += np.tensordot(beta, model.identity_basis, axes=1)
    if model.n_expr:
        shaped += np.tensordot(alpha, model.expression_basis, axes=1)
    return shaped


def _skin(model: HeadModel, shaped, world_R, world_t):
    blend_R = np.einsum("nj,jab->nab", model.skin_weights, world_R)
    blend_t = model.skin_weights @ world_t
    return np.einsum("nab,nb->na", blend_R, shaped) + blend_t


def evaluate(model: HeadModel, pose: PoseParams, beta, alpha) -> Mesh:
    """Evaluate the model to a mesh with recomputed normals."""
    shaped = _shaped_vertices(model, beta, alpha)
    world_R, world_t = _joint_transforms(model, pose)
    verts = _skin(model, shaped, world_R, world_t) + pose.translation
    mesh = Mesh(verts, model.triangles.copy(), uvs=model.uvs.copy(),
                labels={k: v.copy() for k, v in model.region_vertices.items()})
    mesh.recompute_normals()
    return mesh


def evaluate_vertices(model: HeadModel, pose: PoseParams, beta, alpha,
                      vertex_indices=None) -> np.ndarray:
    """Vertices only (optionally a subset), skipping mesh/normal construction."""
    shaped = _shaped_vertices(model, beta, alpha)
    if vertex_indices is not None:
        shaped = shaped[vertex_indices]
        weights = model.skin_weights[vertex_indices]
    else:
        weights = model.skin_weights
    world_R, world_t = _joint_transforms(model, pose)
    blend_R = np.einsum("nj,jab->nab", weights, world_R)
    blend_t = weights @ world_t
    return np.einsum("nab,nb->na", blend_R, shaped) + blend_t + pose.translation


def _subtree_mask(parent: np.ndarray, j: int) -> np.ndarray:
    mask = np.zeros(N_JOINTS, dtype=bool)
    mask[j] = True
    for m in range(N_JOINTS):
        k = m
        while k >= 0:
            if mask[k]:
                mask[m] = True
                break
            k = parent[k]
    return mask


def parameter_jacobian(model: HeadModel, pose: PoseParams, beta, alpha,
                       which: str, vertex_indices=None) -> np.ndarray:
    """Analytic d(vertices)/d(params), shape (3*S, n_params).

    which selects:
      "beta"  -> n_id columns (skinned identity basis directions)
      "alpha" -> n_expr columns
      "pose"  -> 18 columns: theta_global (3), theta_joints (12), translation (3)
    Rows are taken over vertex_indices when given, else all vertices.
    """
    if which not in ("beta", "alpha", "pose"):
        raise InvalidInputError(f"unknown parameter selector {which!r}")
    shaped = _shaped_vertices(model, beta, alpha)
    idx = np.arange(model.n_vertices) if vertex_indices is None else np.asarray(vertex_indices)
    weights = model.skin_weights[idx]
    world_R, world_t = _joint_transforms(model, pose)
    blend_R = np.einsum("nj,jab->nab", weights, world_R)

    if which in ("beta", "alpha"):
        basis = model.identity_basis if which == "beta" else model.expression_basis
        # LBS is affine in positions, so basis displacements rotate by the
        # blended rotation and pick up no translation.
        cols = np.einsum("nab,knb->kna", blend_R, basis[:, idx, :])
        return cols.reshape(len(basis), -1).T

    # Pose Jacobian via per-parameter world-transform derivatives.
    n_sub = len(idx)
    jac = np.zeros((3 * n_sub, 18))
    thetas = np.vstack([pose.theta_global[None, :], pose.theta_joints])

    def affine4(R, t):
        m = np.eye(4)
        m[:3, :3] = R
        m[:3, 3] = t
        return m

    world4 = [affine4(world_R[j], world_t[j]) for j in range(N_JOINTS)]
    parent4 = [np.eye(4) if model.joint_parent[j] < 0 else world4[model.joint_parent[j]]
               for j in range(N_JOINTS)]
    shaped_sub = shaped[idx]

    col = 0
    for j in range(N_JOINTS):
        sub = _subtree_mask(model.joint_parent, j)
        dR_loc = rodrigues_jacobian(thetas[j])
        r = model.joint_rest[j]
        inv_j = np.linalg.inv(world4[j])
        for k in range(3):
            dL = np.zeros((4, 4))
            dL[:3, :3] = dR_loc[k]
            dL[:3, 3] = -dR_loc[k] @ r
            dR_all = np.zeros((N_JOINTS, 3, 3))
            dt_all = np.zeros((N_JOINTS, 3))
            for m in range(N_JOINTS):
                if not sub[m]:
                    continue
                dA = parent4[j] @ dL @ (inv_j @ world4[m])
                dR_all[m] = dA[:3, :3]
                dt_all[m] = dA[:3, 3]
            d_blend_R = np.einsum("nj,jab->nab", weights, dR_all)
            dv = np.einsum("nab,nb->na", d_blend_R, shaped_sub) + weights @ dt_all
            jac[:, col] = dv.ravel()
            col += 1
    # Translation: constant unit patterns.
    for k in range(3):
        jac[k::3, 15 + k] = 1.0
    return jac


# ---------------------------------------------------------------------------
# Procedural synthetic model


def _smooth_field(rng, u, v, envelope=None):
    """Low-frequency random scalar field on the (u, v) grid, periodic in u."""
    g = np.zeros_like(u)
    for q in range(3):
        for p in range(3):
            amp = rng.normal()
            phase_u = rng.uniform(0.0, 1.0)
            phase_v = rng.uniform(0.0, math.pi)
            g += amp * np.cos(2.0 * math.pi * q * (u + phase_u)) * np.cos(math.pi * p * v + phase_v)
    if envelope is not None:
        g = g * envelope
    peak = np.abs(g).max()
    if peak > 0:
        g /= peak
    return g


# Canonical 68-landmark template in (u, v) face coordinates: 17 jaw, 2x5 brows,
# 4 nose bridge + 5 base, 2x6 eyes, 12 outer + 8 inner mouth. Index 30 (bridge
# bottom) is the nose tip and coincides with the protrusion below.
def _landmark_template_uv() -> np.ndarray:
    pts = []
    for t in np.linspace(0.0, 1.0, 17):
        pts.append((0.36 + 0.28 * t, 0.47 + 0.22 * math.sin(math.pi * t)))
    for t in np.linspace(0.0, 1.0, 5):
        pts.append((0.375 + 0.085 * t, 0.405 - 0.02 * math.sin(math.pi * t)))
    for t in np.linspace(0.0, 1.0, 5):
        pts.append((0.54 + 0.085 * t, 0.405 - 0.02 * math.sin(math.pi * t)))
    for t in np.linspace(0.0, 1.0, 4):
        pts.append((0.5, 0.425 + 0.075 * t))  # index 30 = tip at v = 0.5
    for t in np.linspace(0.0, 1.0, 5):
        pts.append((0.458 + 0.084 * t, 0.545))
    for cx in (0.425, 0.575):
        for ang in np.linspace(0.0, 2.0 * math.pi, 6, endpoint=False):
            pts.append((cx + 0.028 * math.cos(ang), 0.45 + 0.014 * math.sin(ang)))
    for ang in np.linspace(0.0, 2.0 * math.pi, 12, endpoint=False):
        pts.append((0.5 + 0.052 * math.cos(ang), 0.615 + 0.028 * math.sin(ang)))
    for ang in np.linspace(0.0, 2.0 * math.pi, 8, endpoint=False):
        pts.append((0.5 + 0.030 * math.cos(ang), 0.615 + 0.014 * math.sin(ang)))
    return np.asarray(pts)


NOSE_TIP_LANDMARK = 30


def generate_synthetic_model(seed: int, n_vertices: int = 2500,
                             n_id: int = 100, n_expr: int = 100) -> HeadModel:
    """Deterministic head-like blendshape model standing in for a licensed asset.

    Ellipsoidal template with a nose protrusion, smooth random blendshapes
    (peak displacement <= 5% of head size), a 5-joint chain, a valid UV atlas,
    68 front-face landmarks, and eye/mouth/face vertex regions. The vertex
    count is the closest (rows+1)x(cols+1) grid at or above n_vertices.
    """
    if n_vertices < 100:
        raise InvalidInputError("n_vertices must be >= 100")
    rng = np.random.default_rng(seed)

    rows = max(9, int(round(math.sqrt(n_vertices / 1.5))))
    cols = max(12, int(math.ceil(n_vertices / (rows + 1))) - 1)
    while (rows + 1) * (cols + 1) < n_vertices:
        cols += 1
    nu, nv = cols + 1, rows + 1

    u = np.linspace(0.0, 1.0, nu)
    v = np.linspace(0.0, 1.0, nv)
    uu, vv = np.meshgrid(u, v)          # (nv, nu)
    u_flat = uu.ravel()
    v_flat = vv.ravel()

    radii = np.array([0.075, 0.100, 0.085])  # half-extents: x, y (up), z (forward)
    phi = (0.06 + 0.88 * v_flat) * math.pi     # polar, poles excluded
    lam = (u_flat - 0.5) * 2.0 * math.pi       # azimuth, 0 faces +z
    pos = np.stack([
        radii[0] * np.sin(phi) * np.sin(lam),
        radii[1] * np.cos(phi),
        radii[2] * np.sin(phi) * np.cos(lam),
    ], axis=1)

    # Nose protrusion, radially outward, centered at the nose-tip landmark uv.
    bump = np.exp(-0.5 * (((u_flat - 0.5) / 0.045) ** 2 + ((v_flat - 0.5) / 0.055) ** 2))
    radial = pos / np.linalg.norm(pos, axis=1, keepdims=True)
    pos = pos + (0.18 * radii[2]) * bump[:, None] * radial

    head_size = float((pos.max(axis=0) - pos.min(axis=0)).max())

    tris = []
    for r in range(rows):
        for c in range(cols):
            v00 = r * nu + c
            v01 = v00 + 1
            v10 = v00 + nu
            v11 = v10 + 1
            tris.append((v00, v10, v11))
            tris.append((v00, v11, v01))
    triangles = np.asarray(tris, dtype=np.int32)
    normals = compute_vertex_normals(pos, triangles)

    uvs = np.stack([u_flat, 1.0 - v_flat], axis=1)

    # Landmarks snapped to distinct grid vertices.
    taken = set()
    landmark_indices = []
    for lu, lv in _landmark_template_uv():
        iu = int(round(lu * cols))
        iv = int(round(lv * rows))
        found = None
        for ring in range(4):
            for dv_ in range(-ring, ring + 1):
                for du_ in range(-ring, ring + 1):
                    if max(abs(du_), abs(dv_)) != ring:
                        continue
                    cand = (iv + dv_) * nu + (iu + du_)
                    if 0 <= iu + du_ < nu and 0 <= iv + dv_ < nv and cand not in taken:
                        found = cand
                        break
                if found is not None:
                    break
            if found is not None:
                break
        if found is None:
            raise InvalidInputError(
                "model grid too coarse to place 68 distinct landmarks")
        taken.add(found)
        landmark_indices.append(found)
    landmark_indices = np.asarray(landmark_indices, dtype=np.int64)

    def region(mask):
        return np.flatnonzero(mask).astype(np.int64)

    face_mask = (u_flat >= 0.30) & (u_flat <= 0.70) & (v_flat >= 0.22) & (v_flat <= 0.78)
    eye_mask = np.zeros(len(pos), dtype=bool)
    for cx in (0.425, 0.575):
        eye_mask |= (((u_flat - cx) / 0.045) ** 2 + ((v_flat - 0.45) / 0.030) ** 2) <= 1.0
    mouth_mask = (((u_flat - 0.5) / 0.085) ** 2 + ((v_flat - 0.615) / 0.052) ** 2) <= 1.0
    regions = {
        "face": region(face_mask),
        "eyes": region(eye_mask),
        "mouth": region(mouth_mask),
    }

    # Blendshapes: normal-directed smooth fields; expressions enveloped on the face.
    max_amp = 0.05 * head_size
    envelope = np.exp(-0.5 * (((u_flat - 0.5) / 0.16) ** 2 + ((v_flat - 0.52) / 0.20) ** 2))
    id_basis = np.empty((n_id, len(pos), 3))
    for k in range(n_id):
        g = _smooth_field(rng, u_flat, v_flat)
        id_basis[k] = (max_amp * rng.uniform(0.4, 1.0)) * g[:, None] * normals
    # Expression shapes are orthogonalized over the landmark vertices so each
    # coefficient has a distinguishable landmark signature (the recoverability
    # a PCA-style expression basis provides); fields stay smooth because the
    # Gram-Schmidt updates are combinations of smooth fields.
    expr_basis = np.empty((n_expr, len(pos), 3))
    lm_rows = landmark_indices
    for k in range(n_expr):
        attempts = 0
        while True:
            g = _smooth_field(rng, u_flat, v_flat, envelope=envelope)
            field_k = g[:, None] * normals
            for j in range(k):
                prev = expr_basis[j]
                denom = float(np.sum(prev[lm_rows] * prev[lm_rows]))
                if denom > 0:
                    coef = float(np.sum(field_k[lm_rows] * prev[lm_rows])) / denom
                    field_k = field_k - coef * prev
            peak = np.linalg.norm(field_k, axis=1).max()
            lm_norm = np.linalg.norm(field_k[lm_rows])
            attempts += 1
            if (peak > 1e-9 and lm_norm > 1e-6 * peak) or attempts > 8:
                break
        expr_basis[k] = (max_amp * rng.uniform(0.4, 1.0) / max(peak, 1e-300)) * field_k

    centroid = pos.mean(axis=0)
    joint_rest = np.stack([
        centroid,
        centroid + np.array([0.0, -0.85 * radii[1], -0.1 * radii[2]]),
        _uv_to_pos(pos, nu, cols, rows, 0.5, 0.64),
        _uv_to_pos(pos, nu, cols, rows, 0.425, 0.45) * 0.9 + centroid * 0.1,
        _uv_to_pos(pos, nu, cols, rows, 0.575, 0.45) * 0.9 + centroid * 0.1,
    ])
    joint_parent = np.array([-1, 0, 1, 1, 1], dtype=np.int64)

    w = np.zeros((len(pos), N_JOINTS))
    w[:, 0] = 1.0
    w[:, 1] = 2.0 * np.clip((v_flat - 0.82) / 0.18, 0.0, 1.0) ** 2
    w[:, 2] = 1.5 * np.exp(-0.5 * (((u_flat - 0.5) / 0.09) ** 2 + ((v_flat - 0.66) / 0.08) ** 2))
    w[:, 3] = 1.2 * np.exp(-0.5 * (((u_flat - 0.425) / 0.035) ** 2 + ((v_flat - 0.45) / 0.025) ** 2))
    w[:, 4] = 1.2 * np.exp(-0.5 * (((u_flat - 0.575) / 0.035) ** 2 + ((v_flat - 0.45) / 0.025) ** 2))
    w /= w.sum(axis=1, keepdims=True)

    model = HeadModel(
        template=pos,
        identity_basis=id_basis,
        expression_basis=expr_basis,
        joint_rest=joint_rest,
        joint_parent=joint_parent,
        skin_weights=w,
        landmark_indices=landmark_indices,
        uvs=uvs,
        triangles=triangles,
        region_vertices=regions,
    )
    model.validate()
    return model


def _uv_to_pos(pos, nu, cols, rows, u, v):
    return pos[int(round(v * rows)) * nu + int(round(u * cols))]


# ---------------------------------------------------------------------------
# Serialization


def save_head_model(model: HeadModel, path) -> None:
    sections = {
        "head/template": model.template,
        "head/identity_basis": model.identity_basis,
        "head/expression_basis": model.expression_basis,
        "head/joint_rest": model.joint_rest,
        "head/joint_parent": model.joint_parent,
        "head/skin_weights": model.skin_weights,
        "head/landmark_indices": model.landmark_indices,
        "head/uvs": model.uvs,
        "head/triangles": model.triangles,
    }
    for name, idx in model.region_vertices.items():
        sections[f"head/region/{name}"] = np.asarray(idx, dtype=np.int64)
    avf.write_container(path, sections)


def load_head_model(path) -> HeadModel:
    sections = avf.read_container(path)
    regions = {}
    for name, arr in sections.items():
        if name.startswith("head/region/"):
            regions[name[len("head/region/"):]] = arr
    model = HeadModel(
        template=sections["head/template"],
        identity_basis=sections["head/identity_basis"],
        expression_basis=sections["head/expression_basis"],
        joint_rest=sections["head/joint_rest"],
        joint_parent=sections["head/joint_parent"],
        skin_weights=sections["head/skin_weights"],
        landmark_indices=sections["head/landmark_indices"],
        uvs=sections["head/uvs"],
        triangles=np.ascontiguousarray(sections["head/triangles"], dtype=np.int32),
        region_vertices=regions,
    )
    model.validate()
    return model
