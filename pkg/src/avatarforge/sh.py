"""Order-2 real spherical harmonics and the 27-coefficient RGB light.

The light stores 9 coefficients per color channel (monochrome lights simply
repeat one row). Irradiance is the raw SH dot product; it can go negative for
extreme coefficients, so shading clamps it at evaluation time.

Basis order: Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

__all__ = ["SHLight", "sh_basis", "sh_basis_array", "irradiance",
           "save_light_json", "load_light_json"]

SH_C0 = 0.28209479177387814   # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199    # sqrt(3 / (4 pi))
SH_C2 = 1.0925484305920792    # sqrt(15 / (4 pi))
SH_C20 = 0.31539156525252005  # sqrt(5 / (16 pi))
SH_C22 = 0.5462742152960396   # sqrt(15 / (16 pi))


@dataclass
class SHLight:
    """9 coefficients per RGB channel, shape (3, 9)."""

    coefficients: np.ndarray = field(
        default_factory=lambda: np.zeros((3, 9)))

    def __post_init__(self):
        self.coefficients = np.asarray(self.coefficients, dtype=np.float64).reshape(3, 9)

    @classmethod
    def ambient(cls, value: float = 1.0) -> "SHLight":
        """Uniform light whose irradiance equals `value` at every normal."""
        c = np.zeros((3, 9))
        c[:, 0] = value / SH_C0
        return cls(c)

    def copy(self) -> "SHLight":
        return SHLight(self.coefficients.copy())


def sh_basis_array(normals: np.ndarray) -> np.ndarray:
    """Evaluate the 9 basis functions at (..., 3) unit normals -> (..., 9)."""
    n = np.asarray(normals, dtype=np.float64)
    x, y, z = n[..., 0], n[..., 1], n[..., 2]
    return np.stack([
        np.full_like(x, SH_C0),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2 * x * y,
        SH_C2 * y * z,
        SH_C20 * (3.0 * z * z - 1.0),
        SH_C2 * x * z,
        SH_C22 * (x * x - y * y),
    ], axis=-1)


def sh_basis(normal) -> np.ndarray:
    """Basis at a single unit normal; rejects non-unit inputs (tol 1e-4)."""
    n = np.asarray(normal, dtype=np.float64).reshape(3)
    if abs(np.linalg.norm(n) - 1.0) > 1e-4:
        raise InvalidInputError("sh_basis expects a unit normal")
    return sh_basis_array(n)


def irradiance(light: SHLight, normals: np.ndarray) -> np.ndarray:
    """Per-channel irradiance at (..., 3) normals -> (..., 3). Unclamped."""
    basis = sh_basis_array(normals)
    return basis @ light.coefficients.T


def save_light_json(path, light: SHLight) -> None:
    payload = {
        "basis_order": ["Y00", "Y1-1", "Y10", "Y11", "Y2-2", "Y2-1", "Y20", "Y21", "Y22"],
        "channels": "rgb",
        "coefficients": [[float(v) for v in row] for row in light.coefficients],
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=1))


def load_light_json(path) -> SHLight:
    payload = json.loads(Path(path).read_text())
    return SHLight(np.asarray(payload["coefficients"], dtype=np.float64))
