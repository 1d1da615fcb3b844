import numpy as np
import pytest

from avatarforge.camera import look_at
from avatarforge.errors import InvalidInputError
from avatarforge.geometry import Mesh
from avatarforge.headmodel import PoseParams, evaluate, generate_synthetic_model
from avatarforge.rasterize import (
    Texture,
    average_textures,
    image_to_texture_gradient,
    rasterize,
    rasterize_geometry,
    shade,
    unwrap_texture,
    uv_coverage,
)
from avatarforge.sh import SHLight


def frontal_camera(size=64, dist=2.0, fov=45.0):
    return look_at([0, 0, dist], [0, 0, 0], width=size, height=size, fov_deg=fov)


def screen_triangle(zoff=0.0):
    """Triangle in the z=zoff plane facing a camera on +z."""
    v = np.array([[-0.5, -0.5, zoff], [0.5, -0.5, zoff], [0.0, 0.6, zoff]])
    uv = np.array([[0.1, 0.1], [0.9, 0.1], [0.5, 0.9]])
    tris = np.array([[0, 1, 2]], dtype=np.int32)  # wound to face +z
    mesh = Mesh(v, tris, uvs=uv).recompute_normals()
    assert mesh.normals[0, 2] > 0
    return mesh


@pytest.fixture(scope="module")
def head():
    model = generate_synthetic_model(seed=3, n_vertices=1400, n_id=4, n_expr=4)
    mesh = evaluate(model, PoseParams(), np.zeros(4), np.zeros(4))
    return model, mesh


def checker_texture(size=128, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.15, 0.85, size=(size // 8, size // 8, 3))
    rgb = np.repeat(np.repeat(base, 8, axis=0), 8, axis=1)
    return Texture(rgb, np.ones((size, size)))


# --- forward rendering ------------------------------------------------------

def test_flat_shading_identity():
    mesh = screen_triangle()
    cam = frontal_camera()
    out = rasterize(mesh, cam, Texture.constant(16, 16), SHLight.ambient(1.0))
    assert out.mask.sum() > 50
    np.testing.assert_allclose(out.image[out.mask], 1.0, atol=1e-12)
    np.testing.assert_allclose(out.image[~out.mask], 0.0)


def test_zbuffer_nearer_triangle_wins():
    near = screen_triangle(zoff=1.0)
    far = screen_triangle(zoff=0.0)
    merged = Mesh(
        np.vstack([far.vertices, near.vertices]),
        np.vstack([far.triangles, near.triangles + 3]).astype(np.int32),
        uvs=np.vstack([far.uvs, near.uvs]),
    ).recompute_normals()
    cam = frontal_camera()
    out = rasterize_geometry(merged, cam)
    contested = out.mask & (out.tri_id >= 0)
    # Every pixel covered by the near triangle (id 1) must report id 1.
    near_only = rasterize_geometry(Mesh(near.vertices, near.triangles,
                                        uvs=near.uvs).recompute_normals(), cam)
    assert (out.tri_id[near_only.mask] == 1).all()
    assert contested.any()


def test_requires_uvs():
    mesh = screen_triangle()
    mesh.uvs = None
    with pytest.raises(InvalidInputError):
        rasterize(mesh, frontal_camera(), Texture.constant(8, 8), SHLight.ambient())


def test_texel_perturbation_footprint(head):
    _, mesh = head
    cam = look_at([0, 0, 0.4], [0, 0, 0], width=96, height=96)
    tex = checker_texture(64, seed=1)
    light = SHLight.ambient(1.0)
    base = rasterize(mesh, cam, tex, light)

    t_row, t_col = 30, 33
    bumped = tex.copy()
    bumped.rgb[t_row, t_col, 0] += 0.1
    out = shade(base, bumped, light)

    diff = out.image - base.image
    changed = np.abs(diff).max(axis=2) > 0
    assert changed.any()
    # Only pixels whose bilinear footprint includes the texel may change, and
    # the change must equal 0.1 * weight * irradiance from the visibility data.
    ys, xs = np.nonzero(changed)
    for py, px in zip(ys, xs):
        uv = base.uv[py, px]
        x = uv[0] * tex.width - 0.5
        y = (1 - uv[1]) * tex.height - 0.5
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        taps = {
            (np.clip(y0, 0, 63), np.clip(x0, 0, 63)): (1 - fx) * (1 - fy),
            (np.clip(y0, 0, 63), np.clip(x0 + 1, 0, 63)): fx * (1 - fy),
            (np.clip(y0 + 1, 0, 63), np.clip(x0, 0, 63)): (1 - fx) * fy,
            (np.clip(y0 + 1, 0, 63), np.clip(x0 + 1, 0, 63)): fx * fy,
        }
        w = sum(wt for (ty, tx), wt in taps.items() if (ty, tx) == (t_row, t_col))
        assert w > 0
        expected = 0.1 * w * base.irradiance[py, px, 0]
        assert diff[py, px, 0] == pytest.approx(expected, abs=1e-12)
        assert np.abs(diff[py, px, 1:]).max() < 1e-12


def test_linearity_in_texture(head):
    _, mesh = head
    cam = look_at([0, 0.05, 0.38], [0, 0, 0], width=64, height=64)
    rng = np.random.default_rng(5)
    t1 = Texture(rng.random((32, 32, 3)), np.ones((32, 32)))
    t2 = Texture(rng.random((32, 32, 3)), np.ones((32, 32)))
    a, b = 0.7, -0.3
    light = SHLight.ambient(0.8)
    geom = rasterize_geometry(mesh, cam)
    mix = Texture(a * t1.rgb + b * t2.rgb, np.ones((32, 32)))
    img_mix = shade(geom, mix, light).image
    img_lin = a * shade(geom, t1, light).image + b * shade(geom, t2, light).image
    m = geom.mask
    np.testing.assert_allclose(img_mix[m], img_lin[m], atol=1e-6)


# --- unwrapping -------------------------------------------------------------

def test_render_then_unwrap_roundtrip(head):
    _, mesh = head
    cam = look_at([0, 0, 0.4], [0, 0, 0], width=256, height=256)
    tex = checker_texture(64, seed=2)
    out = rasterize(mesh, cam, tex, SHLight.ambient(1.0))
    unwrapped = unwrap_texture(mesh, cam, out.image, texture_size=(64, 64))
    m = unwrapped.coverage > 0.3  # well-observed texels
    assert m.sum() > 200
    err = np.abs(unwrapped.rgb[m] - tex.rgb[m]).mean()
    assert err < 0.01


def test_unwrap_camera_behind_head(head):
    model, mesh = head
    front_cam = look_at([0, 0, 0.4], [0, 0, 0], width=64, height=64)
    back_cam = look_at([0, 0, -0.4], [0, 0, 0], width=64, height=64)
    img = np.zeros((64, 64, 3))
    unwrapped = unwrap_texture(mesh, back_cam, img, texture_size=(64, 64))
    # Frontal-face texels (the landmark region) must have zero coverage.
    uvr = uv_coverage(mesh, 64, 64)
    lm_uv = model.uvs[model.landmark_indices]
    xs = np.clip((lm_uv[:, 0] * 64).astype(int), 0, 63)
    ys = np.clip(((1 - lm_uv[:, 1]) * 64).astype(int), 0, 63)
    front_texels = unwrapped.coverage[ys, xs]
    assert np.all(front_texels == 0.0)
    del front_cam, uvr


def test_unwrap_region_mask_annihilation(head):
    _, mesh = head
    cam = look_at([0, 0, 0.4], [0, 0, 0], width=64, height=64)
    img = np.ones((64, 64, 3))
    unwrapped = unwrap_texture(mesh, cam, img, region_mask=np.zeros((64, 64)),
                               texture_size=(32, 32))
    assert (unwrapped.coverage == 0).all()


# --- averaging --------------------------------------------------------------

def test_average_identical_textures_idempotent():
    tex = checker_texture(32, seed=3)
    tex.coverage = np.random.default_rng(0).uniform(0.2, 1.0, (32, 32))
    avg = average_textures([tex, tex, tex])
    np.testing.assert_allclose(avg.rgb, tex.rgb, atol=1e-12)
    np.testing.assert_allclose(avg.coverage, tex.coverage, atol=1e-12)


def test_average_disjoint_coverage_union():
    rng = np.random.default_rng(4)
    a = Texture(rng.random((16, 16, 3)), np.zeros((16, 16)))
    b = Texture(rng.random((16, 16, 3)), np.zeros((16, 16)))
    a.coverage[:, :8] = 1.0
    b.coverage[:, 8:] = 1.0
    a.rgb[:, 8:] = 0
    b.rgb[:, :8] = 0
    avg = average_textures([a, b])
    np.testing.assert_allclose(avg.rgb[:, :8], a.rgb[:, :8], atol=1e-12)
    np.testing.assert_allclose(avg.rgb[:, 8:], b.rgb[:, 8:], atol=1e-12)
    np.testing.assert_allclose(avg.coverage, 0.5)


def test_average_empty_list_rejected():
    with pytest.raises(InvalidInputError):
        average_textures([])


def test_multiview_average_matches_ground_truth(head):
    _, mesh = head
    tex = checker_texture(64, seed=6)
    light = SHLight.ambient(1.0)
    unwraps = []
    for az in (-0.5, 0.0, 0.5):
        eye = 0.4 * np.array([np.sin(az), 0.0, np.cos(az)])
        cam = look_at(eye, [0, 0, 0], width=192, height=192)
        out = rasterize(mesh, cam, tex, light)
        unwraps.append(unwrap_texture(mesh, cam, out.image, texture_size=(64, 64)))
    avg = average_textures(unwraps)
    m = avg.coverage > 0.2
    assert m.sum() > 400
    err = np.abs(avg.rgb[m] - tex.rgb[m]).mean()
    assert err < 0.02


# --- texture adjoint --------------------------------------------------------

def test_gradient_zero_cotangent(head):
    _, mesh = head
    cam = frontal_camera(48, dist=0.4)
    out = rasterize(mesh, cam, checker_texture(32, seed=7), SHLight.ambient())
    d = image_to_texture_gradient(out, np.zeros_like(out.image), (32, 32))
    assert (d == 0).all()


def test_gradient_single_pixel_footprint(head):
    _, mesh = head
    cam = frontal_camera(48, dist=0.4)
    out = rasterize(mesh, cam, checker_texture(32, seed=8), SHLight.ambient(0.9))
    ys, xs = np.nonzero(out.mask)
    py, px = ys[len(ys) // 2], xs[len(ys) // 2]
    d_image = np.zeros_like(out.image)
    d_image[py, px, :] = 1.0
    d = image_to_texture_gradient(out, d_image, (32, 32))
    nonzero = np.nonzero(np.abs(d).sum(axis=2))
    assert 1 <= len(nonzero[0]) <= 4
    np.testing.assert_allclose(d.sum(axis=(0, 1)), out.irradiance[py, px], atol=1e-12)


def test_gradient_matches_finite_differences(head):
    _, mesh = head
    cam = frontal_camera(40, dist=0.4)
    tex = checker_texture(24, seed=9)
    light = SHLight.ambient(0.8)
    geom = rasterize_geometry(mesh, cam)
    target = np.random.default_rng(1).random((40, 40, 3))

    def loss(t_rgb):
        img = shade(geom, Texture(t_rgb, tex.coverage), light).image
        return np.abs(img - target).sum()

    out = shade(geom, tex, light)
    d_image = np.sign(out.image - target) * out.mask[:, :, None]
    d_tex = image_to_texture_gradient(out, d_image, (24, 24))

    rng = np.random.default_rng(2)
    h = 1e-5
    checked = 0
    for _ in range(40):
        i, j, c = rng.integers(24), rng.integers(24), rng.integers(3)
        if abs(d_tex[i, j, c]) < 1e-6:
            continue
        tp = tex.rgb.copy()
        tp[i, j, c] += h
        tm = tex.rgb.copy()
        tm[i, j, c] -= h
        fd = (loss(tp) - loss(tm)) / (2 * h)
        assert abs(fd - d_tex[i, j, c]) / max(1e-9, abs(fd)) < 1e-4
        checked += 1
        if checked >= 20:
            break
    assert checked >= 10


def test_adjoint_inner_product(head):
    _, mesh = head
    cam = frontal_camera(40, dist=0.4)
    light = SHLight.ambient(0.85)
    geom = rasterize_geometry(mesh, cam)
    rng = np.random.default_rng(3)
    tex0 = Texture(rng.random((24, 24, 3)), np.ones((24, 24)))
    v = rng.normal(size=(24, 24, 3))
    d_image = rng.normal(size=(40, 40, 3))

    base = shade(geom, tex0, light)
    eps = 1.0  # shading is linear in the texture, so J v is exact
    pert = Texture(tex0.rgb + eps * v, tex0.coverage)
    jv = (shade(geom, pert, light).image - base.image) / eps
    lhs = float((d_image * jv).sum())
    jt_d = image_to_texture_gradient(base, d_image, (24, 24))
    rhs = float((jt_d * v).sum())
    assert abs(lhs - rhs) <= 1e-6 * max(1.0, abs(lhs))


def test_gradient_dimension_mismatch(head):
    _, mesh = head
    cam = frontal_camera(32, dist=0.4)
    out = rasterize(mesh, cam, checker_texture(16), SHLight.ambient())
    with pytest.raises(InvalidInputError):
        image_to_texture_gradient(out, np.zeros((8, 8, 3)), (16, 16))
