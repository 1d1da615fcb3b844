"""Software z-buffer rasterizer, UV-space texture unwrapping, and the exact
adjoint of the texture path (the only gradients the pipeline needs: geometry
stays fixed while textures and the dynamic-texture network train).

Rasterization is perspective-correct with nearest-depth ties broken by the
lower triangle index. Texture sampling is bilinear with clamp-to-edge; there
is no mipmapping, no soft visibility, and no geometry gradient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit, prange

from .camera import Camera, project_points
from .errors import InvalidInputError
from .geometry import Mesh
from .sh import SHLight, irradiance

__all__ = [
    "Texture",
    "RenderOutput",
    "rasterize",
    "rasterize_geometry",
    "shade",
    "unwrap_texture",
    "average_textures",
    "image_to_texture_gradient",
    "uv_coverage",
    "sample_bilinear",
]


@dataclass
class Texture:
    """UV-space RGB with per-texel observation coverage in [0, 1]."""

    rgb: np.ndarray       # (H, W, 3) float64
    coverage: np.ndarray  # (H, W) float64

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.coverage = np.asarray(self.coverage, dtype=np.float64)
        if self.rgb.shape[:2] != self.coverage.shape:
            raise InvalidInputError("texture rgb/coverage dimensions disagree")

    @property
    def height(self) -> int:
        return self.rgb.shape[0]

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @classmethod
    def constant(cls, height: int, width: int, color=(1.0, 1.0, 1.0)) -> "Texture":
        rgb = np.broadcast_to(np.asarray(color, dtype=np.float64),
                              (height, width, 3)).copy()
        return cls(rgb, np.ones((height, width)))

    def copy(self) -> "Texture":
        return Texture(self.rgb.copy(), self.coverage.copy())


@dataclass
class RenderOutput:
    """Forward-render result plus the per-pixel visibility records the
    texture adjoint needs: triangle id, perspective-correct barycentrics,
    interpolated uv/normal, and the irradiance the texture was scaled by."""

    image: np.ndarray        # (H, W, 3)
    depth: np.ndarray        # (H, W), +inf where empty
    tri_id: np.ndarray       # (H, W) int32, -1 where empty
    bary: np.ndarray         # (H, W, 3)
    uv: np.ndarray           # (H, W, 2)
    normal: np.ndarray       # (H, W, 3)
    irradiance: np.ndarray   # (H, W, 3), clamped at shading
    mask: np.ndarray         # (H, W) bool silhouette
    clear_color: np.ndarray = field(default_factory=lambda: np.zeros(3))


# ---------------------------------------------------------------------------
# Screen-space rasterization


_BAND_ROWS = 16  # image rows per parallel rasterization band


@njit(cache=True, parallel=True)
def _raster_kernel(sx, sy, z, tris, band_starts, band_tris, band_rows,
                   height, width, depth, tri_id, bary):
    # Bands own disjoint row ranges, so parallel writes never race; triangles
    # within a band come in ascending index order, which together with the
    # strict depth test reproduces the sequential lowest-index tie rule.
    for band in prange(len(band_starts) - 1):
        row_lo = band * band_rows
        row_hi = min(row_lo + band_rows, height) - 1
        for k in range(band_starts[band], band_starts[band + 1]):
            ti = band_tris[k]
            i0, i1, i2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
            x0, y0, z0 = sx[i0], sy[i0], z[i0]
            x1, y1, z1 = sx[i1], sy[i1], z[i1]
            x2, y2, z2 = sx[i2], sy[i2], z[i2]
            area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
            if area == 0.0:
                continue
            inv_area = 1.0 / area
            xmin = max(0, int(math.ceil(min(x0, min(x1, x2)) - 0.5)))
            xmax = min(width - 1, int(math.floor(max(x0, max(x1, x2)) - 0.5)))
            ymin = max(row_lo, int(math.ceil(min(y0, min(y1, y2)) - 0.5)))
            ymax = min(row_hi, int(math.floor(max(y0, max(y1, y2)) - 0.5)))
            for py in range(ymin, ymax + 1):
                yc = py + 0.5
                for px in range(xmin, xmax + 1):
                    xc = px + 0.5
                    w0 = ((x1 - xc) * (y2 - yc) - (x2 - xc) * (y1 - yc)) * inv_area
                    w1 = ((x2 - xc) * (y0 - yc) - (x0 - xc) * (y2 - yc)) * inv_area
                    w2 = 1.0 - w0 - w1
                    if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                        continue
                    q0 = w0 / z0
                    q1 = w1 / z1
                    q2 = w2 / z2
                    inv_d = q0 + q1 + q2
                    d = 1.0 / inv_d
                    if d < depth[py, px]:  # strict: ties keep the lower index
                        depth[py, px] = d
                        tri_id[py, px] = ti
                        bary[py, px, 0] = q0 * d
                        bary[py, px, 1] = q1 * d
                        bary[py, px, 2] = q2 * d


def _band_lists(sy, tris, keep, height):
    """Group kept triangles by the row bands their bounding boxes touch."""
    n_bands = max(1, (height + _BAND_ROWS - 1) // _BAND_ROWS)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        return np.zeros(n_bands + 1, dtype=np.int64), np.zeros(0, dtype=np.int64)
    ys = sy[tris[idx]]
    ymin = np.clip(np.ceil(ys.min(axis=1) - 0.5), 0, height - 1).astype(np.int64)
    ymax = np.clip(np.floor(ys.max(axis=1) - 0.5), 0, height - 1).astype(np.int64)
    b_lo = ymin // _BAND_ROWS
    b_hi = ymax // _BAND_ROWS
    spans = b_hi - b_lo + 1
    rep_tris = np.repeat(idx, spans)
    offsets = np.arange(len(rep_tris)) - np.repeat(np.cumsum(spans) - spans, spans)
    rep_bands = np.repeat(b_lo, spans) + offsets
    order = np.argsort(rep_bands, kind="stable")  # keeps ascending tri order
    band_tris = rep_tris[order]
    starts = np.searchsorted(rep_bands[order], np.arange(n_bands + 1))
    return starts.astype(np.int64), band_tris.astype(np.int64)


@njit(cache=True, parallel=True)
def _attr_maps_kernel(tri_id, bary, tris, uvs, normals, uv_map, normal_map):
    """Interpolate per-vertex uv/normal attributes for covered pixels."""
    height, width = tri_id.shape
    for py in prange(height):
        for px in range(width):
            ti = tri_id[py, px]
            if ti < 0:
                continue
            i0, i1, i2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
            w0 = bary[py, px, 0]
            w1 = bary[py, px, 1]
            w2 = bary[py, px, 2]
            for c in range(2):
                uv_map[py, px, c] = (w0 * uvs[i0, c] + w1 * uvs[i1, c]
                                     + w2 * uvs[i2, c])
            nx = w0 * normals[i0, 0] + w1 * normals[i1, 0] + w2 * normals[i2, 0]
            ny = w0 * normals[i0, 1] + w1 * normals[i1, 1] + w2 * normals[i2, 1]
            nz = w0 * normals[i0, 2] + w1 * normals[i1, 2] + w2 * normals[i2, 2]
            norm = np.sqrt(nx * nx + ny * ny + nz * nz)
            if norm < 1e-300:
                norm = 1.0
            normal_map[py, px, 0] = nx / norm
            normal_map[py, px, 1] = ny / norm
            normal_map[py, px, 2] = nz / norm


def rasterize_geometry(mesh: Mesh, camera: Camera,
                       cull_backfaces: bool = True) -> RenderOutput:
    """Visibility pass only: depth / triangle / barycentric / uv / normal maps.

    Triangles with any vertex at depth <= 0 are culled whole (no near-plane
    clipping); back-faces are culled by their camera-space facing by default.
    """
    if mesh.uvs is None:
        raise InvalidInputError("rasterization needs a mesh with UVs")
    if mesh.normals is None:
        mesh.recompute_normals()
    h, w = camera.height, camera.width
    pix, z = project_points(camera, mesh.vertices)
    tris = mesh.triangles

    z_tri = z[tris]
    keep = (z_tri > 1e-9).all(axis=1)
    if cull_backfaces:
        cam_pts = mesh.vertices @ camera.rotation.T + camera.translation
        v0, v1, v2 = (cam_pts[tris[:, k]] for k in range(3))
        n_cam = np.cross(v1 - v0, v2 - v0)
        keep &= np.einsum("ij,ij->i", n_cam, v0) < 0.0

    depth = np.full((h, w), np.inf)
    tri_id = np.full((h, w), -1, dtype=np.int32)
    bary = np.zeros((h, w, 3))
    sy = np.ascontiguousarray(pix[:, 1])
    band_starts, band_tris = _band_lists(sy, tris, keep, h)
    _raster_kernel(np.ascontiguousarray(pix[:, 0]), sy,
                   np.ascontiguousarray(z), tris, band_starts, band_tris,
                   _BAND_ROWS, h, w, depth, tri_id, bary)
    mask = tri_id >= 0

    uv = np.zeros((h, w, 2))
    normal = np.zeros((h, w, 3))
    _attr_maps_kernel(tri_id, bary, tris,
                      np.ascontiguousarray(mesh.uvs),
                      np.ascontiguousarray(mesh.normals), uv, normal)

    return RenderOutput(
        image=np.zeros((h, w, 3)), depth=depth, tri_id=tri_id, bary=bary,
        uv=uv, normal=normal, irradiance=np.zeros((h, w, 3)), mask=mask)


def _bilinear_footprint(x, y, width, height):
    """Clamp-to-edge bilinear taps for continuous texel coords (x, y).

    Returns (x0, x1, y0, y1, fx, fy) integer tap indices and fractions; the
    forward sample and the adjoint scatter share this exact footprint.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0f = np.floor(x)
    y0f = np.floor(y)
    fx = x - x0f
    fy = y - y0f
    x0 = np.clip(x0f.astype(np.int64), 0, width - 1)
    x1 = np.clip(x0f.astype(np.int64) + 1, 0, width - 1)
    y0 = np.clip(y0f.astype(np.int64), 0, height - 1)
    y1 = np.clip(y0f.astype(np.int64) + 1, 0, height - 1)
    return x0, x1, y0, y1, fx, fy


def sample_bilinear(img: np.ndarray, x, y) -> np.ndarray:
    """Bilinear sample at continuous pixel coords (centers at integers)."""
    h, w = img.shape[:2]
    x0, x1, y0, y1, fx, fy = _bilinear_footprint(x, y, w, h)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def _uv_to_texel_coords(uv: np.ndarray, width: int, height: int):
    """UV in [0,1]^2 (v up) to continuous texel coordinates (x right, y down)."""
    x = uv[..., 0] * width - 0.5
    y = (1.0 - uv[..., 1]) * height - 0.5
    return x, y


def sample_texture(texture: Texture, uv: np.ndarray) -> np.ndarray:
    x, y = _uv_to_texel_coords(uv, texture.width, texture.height)
    return sample_bilinear(texture.rgb, x, y)


@njit(cache=True, parallel=True)
def _shade_kernel(tri_id, uv, normal, tex, coeffs, clear, image, irr_map):
    # Inline order-2 real SH basis (matches sh.sh_basis_array) and the
    # clamp-to-edge bilinear footprint (matches _bilinear_footprint).
    c0 = 0.28209479177387814
    c1 = 0.4886025119029199
    c2 = 1.0925484305920792
    c20 = 0.31539156525252005
    c22 = 0.5462742152960396
    height, width = tri_id.shape
    th, tw = tex.shape[0], tex.shape[1]
    for py in prange(height):
        for px in range(width):
            if tri_id[py, px] < 0:
                for c in range(3):
                    image[py, px, c] = clear[c]
                    irr_map[py, px, c] = 0.0
                continue
            nx = normal[py, px, 0]
            ny = normal[py, px, 1]
            nz = normal[py, px, 2]
            y0 = c0
            y1 = c1 * ny
            y2 = c1 * nz
            y3 = c1 * nx
            y4 = c2 * nx * ny
            y5 = c2 * ny * nz
            y6 = c20 * (3.0 * nz * nz - 1.0)
            y7 = c2 * nx * nz
            y8 = c22 * (nx * nx - ny * ny)
            x = uv[py, px, 0] * tw - 0.5
            yy = (1.0 - uv[py, px, 1]) * th - 0.5
            x0f = math.floor(x)
            y0f = math.floor(yy)
            fx = x - x0f
            fy = yy - y0f
            ix0 = min(max(int(x0f), 0), tw - 1)
            ix1 = min(max(int(x0f) + 1, 0), tw - 1)
            iy0 = min(max(int(y0f), 0), th - 1)
            iy1 = min(max(int(y0f) + 1, 0), th - 1)
            for c in range(3):
                irr = (coeffs[c, 0] * y0 + coeffs[c, 1] * y1 + coeffs[c, 2] * y2
                       + coeffs[c, 3] * y3 + coeffs[c, 4] * y4 + coeffs[c, 5] * y5
                       + coeffs[c, 6] * y6 + coeffs[c, 7] * y7 + coeffs[c, 8] * y8)
                if irr < 0.0:
                    irr = 0.0
                sample = ((1.0 - fy) * ((1.0 - fx) * tex[iy0, ix0, c]
                                        + fx * tex[iy0, ix1, c])
                          + fy * ((1.0 - fx) * tex[iy1, ix0, c]
                                  + fx * tex[iy1, ix1, c]))
                irr_map[py, px, c] = irr
                image[py, px, c] = sample * irr


def shade(geom: RenderOutput, texture: Texture, light: SHLight,
          clear_color=(0.0, 0.0, 0.0)) -> RenderOutput:
    """Color a visibility pass: bilinear texture sample x clamped SH irradiance.

    Returns a new RenderOutput sharing the geometry arrays, so a cached
    geometry pass can be re-shaded cheaply while textures train.
    """
    clear = np.asarray(clear_color, dtype=np.float64)
    image = np.empty_like(geom.image)
    irr_map = np.empty_like(geom.irradiance)
    _shade_kernel(geom.tri_id, geom.uv, geom.normal,
                  np.ascontiguousarray(texture.rgb),
                  light.coefficients, clear, image, irr_map)
    return RenderOutput(
        image=image, depth=geom.depth, tri_id=geom.tri_id, bary=geom.bary,
        uv=geom.uv, normal=geom.normal, irradiance=irr_map, mask=geom.mask,
        clear_color=clear)


def rasterize(mesh: Mesh, camera: Camera, texture: Texture, light: SHLight,
              clear_color=(0.0, 0.0, 0.0), cull_backfaces: bool = True) -> RenderOutput:
    """Full forward render (geometry pass + shading)."""
    if texture.rgb.size == 0:
        raise InvalidInputError("texture is empty")
    geom = rasterize_geometry(mesh, camera, cull_backfaces=cull_backfaces)
    return shade(geom, texture, light, clear_color)


# ---------------------------------------------------------------------------
# UV-space rasterization (texel -> surface-point map)


@njit(cache=True)
def _uv_raster_kernel(xs, ys, tris, height, width, tri_id, b0, b1, b2):
    overwrites = 0
    for ti in range(tris.shape[0]):
        i0, i1, i2 = tris[ti, 0], tris[ti, 1], tris[ti, 2]
        x0, y0 = xs[i0], ys[i0]
        x1, y1 = xs[i1], ys[i1]
        x2, y2 = xs[i2], ys[i2]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if area == 0.0:
            continue
        inv_area = 1.0 / area
        xmin = max(0, int(math.ceil(min(x0, min(x1, x2)))))
        xmax = min(width - 1, int(math.floor(max(x0, max(x1, x2)))))
        ymin = max(0, int(math.ceil(min(y0, min(y1, y2)))))
        ymax = min(height - 1, int(math.floor(max(y0, max(y1, y2)))))
        for py in range(ymin, ymax + 1):
            for px in range(xmin, xmax + 1):
                w0 = ((x1 - px) * (y2 - py) - (x2 - px) * (y1 - py)) * inv_area
                w1 = ((x2 - px) * (y0 - py) - (x0 - px) * (y2 - py)) * inv_area
                w2 = 1.0 - w0 - w1
                if w0 < 0.0 or w1 < 0.0 or w2 < 0.0:
                    continue
                # Shared-edge texels pass both neighbors' inside tests; only a
                # strictly interior reclaim indicates a genuinely overlapping
                # UV layout.
                if (tri_id[py, px] >= 0 and tri_id[py, px] != ti
                        and w0 > 1e-9 and w1 > 1e-9 and w2 > 1e-9):
                    overwrites += 1
                tri_id[py, px] = ti
                b0[py, px] = w0
                b1[py, px] = w1
                b2[py, px] = w2
    return overwrites


@dataclass
class UvRaster:
    """Texel-to-surface map: covering triangle and barycentrics per texel."""

    tri_id: np.ndarray   # (H, W) int32, -1 uncovered
    bary: np.ndarray     # (H, W, 3)
    overwrites: int      # texels claimed by more than one UV triangle

    @property
    def mask(self) -> np.ndarray:
        return self.tri_id >= 0


def uv_coverage(mesh: Mesh, height: int, width: int) -> UvRaster:
    """Rasterize the mesh's UV layout at texel centers (last writer wins)."""
    if mesh.uvs is None:
        raise InvalidInputError("uv rasterization needs a mesh with UVs")
    xs, ys = _uv_to_texel_coords(mesh.uvs, width, height)
    tri_id = np.full((height, width), -1, dtype=np.int32)
    b0 = np.zeros((height, width))
    b1 = np.zeros((height, width))
    b2 = np.zeros((height, width))
    overwrites = _uv_raster_kernel(np.ascontiguousarray(xs), np.ascontiguousarray(ys),
                                   mesh.triangles, height, width, tri_id, b0, b1, b2)
    return UvRaster(tri_id, np.stack([b0, b1, b2], axis=-1), int(overwrites))


def texel_surface_points(mesh: Mesh, uvr: UvRaster):
    """World positions and unit normals of the covered texels' surface points."""
    if mesh.normals is None:
        mesh.recompute_normals()
    m = uvr.mask
    corners = mesh.triangles[uvr.tri_id[m]]
    bar = uvr.bary[m]
    pos = np.einsum("pk,pkc->pc", bar, mesh.vertices[corners])
    nrm = np.einsum("pk,pkc->pc", bar, mesh.normals[corners])
    norm = np.linalg.norm(nrm, axis=1, keepdims=True)
    norm[norm < 1e-300] = 1.0
    return pos, nrm / norm


def unwrap_texture(mesh: Mesh, camera: Camera, image: np.ndarray,
                   region_mask: np.ndarray | None = None,
                   texture_size: tuple[int, int] = (512, 512),
                   uvr: UvRaster | None = None,
                   geom: RenderOutput | None = None,
                   depth_tolerance: float = 1e-3) -> Texture:
    """Project one calibrated image into UV space (a partial texture).

    A texel receives color when its surface point projects inside the image,
    survives the depth test against the rasterized depth map (relative
    tolerance), and faces the camera; its coverage is the facing cosine.
    Occluded, back-facing and masked-out texels keep coverage 0.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape[0] != camera.height or image.shape[1] != camera.width:
        raise InvalidInputError("camera/image dimensions disagree")
    th, tw = texture_size
    if uvr is None:
        uvr = uv_coverage(mesh, th, tw)
    if geom is None:
        geom = rasterize_geometry(mesh, camera)

    rgb = np.zeros((th, tw, 3))
    coverage = np.zeros((th, tw))
    m = uvr.mask
    if not m.any():
        return Texture(rgb, coverage)
    pos, nrm = texel_surface_points(mesh, uvr)
    pix, depth = project_points(camera, pos)

    ok = depth > 1e-9
    ok &= (pix[:, 0] >= 0) & (pix[:, 0] <= camera.width)
    ok &= (pix[:, 1] >= 0) & (pix[:, 1] <= camera.height)

    # Visibility: compare against the z-buffer at the containing pixel.
    ix = np.clip(pix[:, 0].astype(np.int64), 0, camera.width - 1)
    iy = np.clip(pix[:, 1].astype(np.int64), 0, camera.height - 1)
    zbuf = geom.depth[iy, ix]
    ok &= np.isfinite(zbuf) & (depth <= zbuf * (1.0 + depth_tolerance))

    to_cam = camera.center - pos
    to_cam /= np.linalg.norm(to_cam, axis=1, keepdims=True)
    cosine = np.einsum("ij,ij->i", nrm, to_cam)
    ok &= cosine > 0.0

    weight = np.where(ok, np.clip(cosine, 0.0, 1.0), 0.0)
    if region_mask is not None:
        region_mask = np.asarray(region_mask, dtype=np.float64)
        weight *= np.where(region_mask[iy, ix] >= 0.5, 1.0, 0.0)

    colors = np.zeros((len(pos), 3))
    sel = weight > 0
    if sel.any():
        colors[sel] = sample_bilinear(image, pix[sel, 0] - 0.5, pix[sel, 1] - 0.5)

    flat_idx = np.flatnonzero(m.ravel())
    rgb.reshape(-1, 3)[flat_idx] = colors * (weight[:, None] > 0)
    coverage.ravel()[flat_idx] = weight
    return Texture(rgb, coverage)


def average_textures(textures: list[Texture], plain: bool = False) -> Texture:
    """Merge partial unwraps: coverage-weighted mean (or plain mean over the
    covered inputs with plain=True). Output coverage is the mean input coverage;
    never-covered texels keep rgb 0 and coverage 0."""
    if not textures:
        raise InvalidInputError("average_textures needs at least one texture")
    shape = textures[0].rgb.shape
    for t in textures:
        if t.rgb.shape != shape:
            raise InvalidInputError("textures must share dimensions")
    num = np.zeros(shape)
    den = np.zeros(shape[:2])
    cov_sum = np.zeros(shape[:2])
    for t in textures:
        w = (t.coverage > 0).astype(np.float64) if plain else t.coverage
        num += w[:, :, None] * t.rgb
        den += w
        cov_sum += t.coverage
    rgb = np.zeros(shape)
    covered = den > 0
    rgb[covered] = num[covered] / den[covered][:, None]
    return Texture(rgb, cov_sum / len(textures))


# ---------------------------------------------------------------------------
# Texture adjoint


def image_to_texture_gradient(render: RenderOutput, d_image: np.ndarray,
                              texture_dims: tuple[int, int]) -> np.ndarray:
    """Exact adjoint of shade() in the texture argument.

    d_texture[t] = sum over covered pixels p of
        d_image[p] * irradiance[p] * bilinear_weight(p -> t).
    Geometry gradients are deliberately not computed.
    """
    d_image = np.asarray(d_image, dtype=np.float64)
    if d_image.shape != render.image.shape:
        raise InvalidInputError("d_image dimensions disagree with the render")
    th, tw = texture_dims
    d_tex = np.zeros((th, tw, 3))
    m = render.mask
    if not m.any():
        return d_tex
    g = d_image[m] * render.irradiance[m]
    x, y = _uv_to_texel_coords(render.uv[m], tw, th)
    x0, x1, y0, y1, fx, fy = _bilinear_footprint(x, y, tw, th)
    w00 = (1 - fx) * (1 - fy)
    w10 = fx * (1 - fy)
    w01 = (1 - fx) * fy
    w11 = fx * fy
    flat = d_tex.reshape(-1, 3)
    np.add.at(flat, y0 * tw + x0, g * w00[:, None])
    np.add.at(flat, y0 * tw + x1, g * w10[:, None])
    np.add.at(flat, y1 * tw + x0, g * w01[:, None])
    np.add.at(flat, y1 * tw + x1, g * w11[:, None])
    return d_tex
