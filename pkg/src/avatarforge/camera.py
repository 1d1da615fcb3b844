"""Pinhole cameras: projection, landmark back-projection, and manifest ingestion.

Convention: right-handed, x_cam = R @ x_world + t, +z forward in the camera
frame, y-down image coordinates. Pixel (i, j) covers the unit square whose
center is at continuous coordinates (j + 0.5, i + 0.5). No lens distortion;
manifests carrying nonzero distortion fields are rejected.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyCorrespondenceError, InvalidInputError
from .geometry import Bvh, Mesh, build_bvh, ray_mesh_intersect_batch

__all__ = [
    "Camera",
    "project",
    "project_points",
    "backproject_landmarks",
    "load_camera_manifest",
    "save_camera_manifest",
]


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray     # (3, 3) world -> camera
    translation: np.ndarray  # (3,)
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidInputError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image dimensions must be >= 1")
        if np.abs(self.rotation @ self.rotation.T - np.eye(3)).max() > 1e-6:
            raise InvalidInputError("camera rotation must be orthonormal")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, factor: float) -> "Camera":
        """Same view at a scaled resolution (used by coarse-to-fine passes)."""
        return Camera(
            fx=self.fx * factor, fy=self.fy * factor,
            cx=self.cx * factor, cy=self.cy * factor,
            rotation=self.rotation.copy(), translation=self.translation.copy(),
            width=max(1, int(round(self.width * factor))),
            height=max(1, int(round(self.height * factor))),
        )


def look_at(eye, target, up=(0.0, 1.0, 0.0), fov_deg: float = 45.0,
            width: int = 512, height: int = 512) -> Camera:
    """Camera at `eye` looking at `target` (y-down image, +z forward)."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)  # y-down image axis
    R = np.stack([right, down, fwd])
    f = 0.5 * width / math.tan(math.radians(fov_deg) / 2.0)
    return Camera(fx=f, fy=f, cx=width / 2.0, cy=height / 2.0,
                  rotation=R, translation=-R @ eye, width=width, height=height)


def project(camera: Camera, point) -> tuple[np.ndarray, float]:
    """Perspective projection of one world point: (pixel (2,), depth).

    depth <= 0 means the point is behind the camera; callers filter.
    """
    pix, depth = project_points(camera, np.asarray(point, dtype=np.float64)[None, :])
    return pix[0], float(depth[0])


def project_points(camera: Camera, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection: returns (pixels (N, 2), depths (N,))."""
    pts = np.asarray(points, dtype=np.float64)
    cam = pts @ camera.rotation.T + camera.translation
    z = cam[:, 2]
    safe = np.where(np.abs(z) < 1e-300, 1e-300, z)
    pix = np.stack([
        camera.fx * cam[:, 0] / safe + camera.cx,
        camera.fy * cam[:, 1] / safe + camera.cy,
    ], axis=1)
    return pix, z


def pixel_rays(camera: Camera, pixels) -> tuple[np.ndarray, np.ndarray]:
    """World-space unit rays through continuous pixel coordinates."""
    pix = np.asarray(pixels, dtype=np.float64)
    d_cam = np.stack([
        (pix[:, 0] - camera.cx) / camera.fx,
        (pix[:, 1] - camera.cy) / camera.fy,
        np.ones(len(pix)),
    ], axis=1)
    d_world = d_cam @ camera.rotation
    d_world /= np.linalg.norm(d_world, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.center, d_world.shape).copy()
    return origins, d_world


def backproject_landmarks(camera: Camera, pixels, mesh: Mesh,
                          bvh: Bvh | None = None):
    """Lift 2D landmarks onto the mesh along their camera rays.

    Returns (points (N, 3), hit_mask (N,), triangle_ids (N,)). Missed rays are
    flagged in the mask (their rows are zero), never fabricated. Raises
    EmptyCorrespondenceError when every ray misses.
    """
    if mesh.n_triangles == 0:
        raise InvalidInputError("cannot back-project onto an empty mesh")
    if bvh is None:
        bvh = build_bvh(mesh)
    origins, dirs = pixel_rays(camera, pixels)
    tri, t, _ = ray_mesh_intersect_batch(origins, dirs, bvh)
    hits = tri >= 0
    if not hits.any():
        raise EmptyCorrespondenceError("no landmark ray hit the mesh")
    points = np.zeros((len(origins), 3))
    points[hits] = origins[hits] + t[hits, None] * dirs[hits]
    return points, hits, tri


# ---------------------------------------------------------------------------
# Manifest: JSON array of {image_path, fx, fy, cx, cy, R (row-major 9), t, width, height}

_DISTORTION_KEYS = ("k1", "k2", "k3", "p1", "p2", "distortion")


def load_camera_manifest(path) -> list[tuple[str, Camera]]:
    entries = json.loads(Path(path).read_text())
    if not isinstance(entries, list):
        raise InvalidInputError("camera manifest must be a JSON array")
    out = []
    for i, e in enumerate(entries):
        for key in _DISTORTION_KEYS:
            val = e.get(key)
            if val and np.any(np.asarray(val, dtype=float) != 0.0):
                raise InvalidInputError(
                    f"manifest entry {i}: nonzero lens distortion ({key}) is unsupported")
        cam = Camera(
            fx=float(e["fx"]), fy=float(e["fy"]),
            cx=float(e["cx"]), cy=float(e["cy"]),
            rotation=np.asarray(e["R"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(e["t"], dtype=np.float64),
            width=int(e["width"]), height=int(e["height"]),
        )
        out.append((e["image_path"], cam))
    return out


def save_camera_manifest(path, entries: list[tuple[str, Camera]]) -> None:
    payload = []
    for image_path, cam in entries:
        payload.append({
            "image_path": image_path,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "R": [float(x) for x in cam.rotation.ravel()],
            "t": [float(x) for x in cam.translation],
            "width": cam.width, "height": cam.height,
        })
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))
