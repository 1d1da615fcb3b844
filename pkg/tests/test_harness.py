import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avatarforge.camera import backproject_landmarks
from avatarforge.errors import InvalidInputError
from avatarforge.fitting import crop_face
from avatarforge.harness import (
    frame_texture,
    make_expression_clip,
    make_identity_scene,
    psnr,
    region_image_mask,
    ssim,
    write_clip,
    write_scene,
)
from avatarforge.headmodel import evaluate
from avatarforge.rasterize import rasterize


@pytest.fixture(scope="module")
def scene():
    return make_identity_scene(seed=5, n_vertices=1200, n_id=8, n_expr=8,
                               image_size=160, n_cameras=6, texture_size=128)


@pytest.fixture(scope="module")
def clip(scene):
    return make_expression_clip(scene, n_frames=4, seed=1)


# --- scene ------------------------------------------------------------------

def test_scene_determinism():
    a = make_identity_scene(seed=9, n_vertices=800, n_id=4, n_expr=4,
                            image_size=96, n_cameras=3, texture_size=64)
    b = make_identity_scene(seed=9, n_vertices=800, n_id=4, n_expr=4,
                            image_size=96, n_cameras=3, texture_size=64)
    np.testing.assert_array_equal(a.beta_true, b.beta_true)
    np.testing.assert_array_equal(a.s_raw.vertices, b.s_raw.vertices)
    for ia, ib in zip(a.images, b.images):
        np.testing.assert_array_equal(ia, ib)
    np.testing.assert_array_equal(a.landmarks_2d, b.landmarks_2d)


def test_scene_landmark_backprojection_consistency(scene):
    """Rendered landmark pixels lift back onto the landmark vertices."""
    from avatarforge.headmodel import PoseParams

    cam = scene.cameras[scene.key_index]
    neutral = evaluate(scene.model, PoseParams(), scene.beta_true,
                       np.zeros(scene.model.n_expr))
    pts, hits, _ = backproject_landmarks(cam, scene.landmarks_2d, neutral)
    lm = neutral.vertices[scene.model.landmark_indices]
    err = np.linalg.norm(pts[hits] - lm[hits], axis=1)
    assert hits.mean() > 0.95
    assert err.max() < 1e-4 * neutral.bbox_diagonal()


def test_scene_no_clutter_crop_keeps_landmarks():
    scene = make_identity_scene(seed=3, n_vertices=900, n_id=4, n_expr=4,
                                image_size=96, n_cameras=3, texture_size=64,
                                clutter=False)
    neutral_lm = scene.s_raw.vertices[scene.model.landmark_indices]
    crop, alignment = crop_face(scene.s_raw, neutral_lm)
    from avatarforge.geometry import build_bvh, closest_points_on_mesh
    _, _, d = closest_points_on_mesh(alignment.apply(neutral_lm), build_bvh(crop))
    assert d.max() < 1e-9


def test_scene_hair_mask_covers_clutter(scene):
    assert len(scene.hair_vertices) > 0
    assert scene.s_raw.labels["hair"].size == scene.hair_vertices.size


# --- clip -------------------------------------------------------------------

def test_clip_single_frame_neutral(scene):
    clip1 = make_expression_clip(scene, n_frames=1, seed=2)
    assert np.all(clip1.alpha_true == 0.0)
    assert len(clip1.images) == 1


def test_clip_smoothness_by_construction(scene):
    from avatarforge.harness import ALPHA_WALK_SCALE

    long_clip = make_expression_clip(scene, n_frames=24, seed=4)
    d = np.abs(np.diff(long_clip.alpha_true, axis=0)).max()
    # Frequencies are capped at 0.06 cycles/frame, bounding the step.
    assert d <= 2 * np.pi * 0.06 * ALPHA_WALK_SCALE + 1e-9


def test_clip_self_render_identity(clip):
    """Re-rendering the ground-truth parameters reproduces the clip exactly."""
    scene = clip.scene
    from avatarforge.harness import ALPHA_WALK_SCALE
    for t in (0, len(clip.images) - 1):
        mesh = evaluate(scene.model, clip.poses_true[t], scene.beta_true,
                        clip.alpha_true[t])
        tex = frame_texture(scene, clip.mouth_mask, clip.alpha_true[t],
                            ALPHA_WALK_SCALE)
        out = rasterize(mesh, clip.camera, tex, scene.light_gt)
        np.testing.assert_array_equal(out.image, clip.images[t])


def test_clip_determinism(scene):
    a = make_expression_clip(scene, n_frames=3, seed=7)
    b = make_expression_clip(scene, n_frames=3, seed=7)
    np.testing.assert_array_equal(a.alpha_true, b.alpha_true)
    for ia, ib in zip(a.images, b.images):
        np.testing.assert_array_equal(ia, ib)


def test_region_image_mask(clip):
    scene = clip.scene
    mesh = evaluate(scene.model, clip.poses_true[0], scene.beta_true,
                    clip.alpha_true[0])
    mask = region_image_mask(scene.model, mesh, clip.camera, clip.mouth_mask)
    assert mask.any()
    assert mask.sum() < mask.size * 0.2


# --- metrics ----------------------------------------------------------------

def test_psnr_identity_is_inf():
    img = np.random.default_rng(0).random((16, 16, 3))
    assert psnr(img, img, np.ones((16, 16), dtype=bool)) == float("inf")


def test_psnr_closed_form():
    a = np.zeros((8, 8, 3))
    b = np.full((8, 8, 3), 0.5)
    got = psnr(a, b, np.ones((8, 8), dtype=bool))
    assert got == pytest.approx(10 * np.log10(1 / 0.25), abs=1e-12)


def test_psnr_empty_mask():
    img = np.zeros((4, 4, 3))
    with pytest.raises(InvalidInputError):
        psnr(img, img, np.zeros((4, 4), dtype=bool))


@settings(max_examples=20, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_psnr_matches_direct_summation(seed):
    rng = np.random.default_rng(seed)
    a = rng.random((12, 12, 3))
    b = rng.random((12, 12, 3))
    mask = rng.random((12, 12)) > 0.3
    if not mask.any():
        mask[0, 0] = True
    got = psnr(a, b, mask)
    total = 0.0
    count = 0
    for y in range(12):
        for x in range(12):
            if mask[y, x]:
                for c in range(3):
                    total += (a[y, x, c] - b[y, x, c]) ** 2
                    count += 1
    assert got == pytest.approx(10 * np.log10(count / total), abs=1e-9)


def test_ssim_identity_is_one():
    img = np.random.default_rng(1).random((32, 32, 3))
    assert ssim(img, img, np.ones((32, 32), dtype=bool)) == pytest.approx(1.0, abs=1e-12)


def test_ssim_dissimilar_below_one():
    rng = np.random.default_rng(2)
    a = rng.random((32, 32, 3))
    assert ssim(a, 1.0 - a, np.ones((32, 32), dtype=bool)) < 1.0


def test_ssim_toy_window_against_direct_formula():
    rng = np.random.default_rng(3)
    a = rng.random((8, 8))
    b = rng.random((8, 8))
    mask = np.zeros((8, 8), dtype=bool)
    mask[4, 4] = True
    got = ssim(a, b, mask)

    # Direct evaluation at (4, 4): 11x11 Gaussian window with reflect padding.
    k = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    k /= k.sum()
    w2d = np.outer(k, k)

    def reflect(i, n):
        while i < 0 or i >= n:
            i = -i - 1 if i < 0 else 2 * n - 1 - i
        return i

    wa = np.zeros((11, 11))
    wb = np.zeros((11, 11))
    for dy in range(-5, 6):
        for dx in range(-5, 6):
            wa[dy + 5, dx + 5] = a[reflect(4 + dy, 8), reflect(4 + dx, 8)]
            wb[dy + 5, dx + 5] = b[reflect(4 + dy, 8), reflect(4 + dx, 8)]
    mu_a = (w2d * wa).sum()
    mu_b = (w2d * wb).sum()
    var_a = (w2d * wa * wa).sum() - mu_a ** 2
    var_b = (w2d * wb * wb).sum() - mu_b ** 2
    cov = (w2d * wa * wb).sum() - mu_a * mu_b
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    ref = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
          ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))
    assert got == pytest.approx(ref, abs=1e-9)


def test_ssim_empty_mask():
    img = np.zeros((8, 8))
    with pytest.raises(InvalidInputError):
        ssim(img, img, np.zeros((8, 8), dtype=bool))


# --- bundles ----------------------------------------------------------------

def test_scene_and_clip_bundles_roundtrip(tmp_path, scene, clip):
    write_scene(scene, tmp_path / "scene")
    write_clip(clip, tmp_path / "clip")
    assert (tmp_path / "scene" / "scan.obj").exists()
    assert (tmp_path / "scene" / "model.avf").exists()
    assert (tmp_path / "scene" / "cameras.json").exists()
    assert (tmp_path / "scene" / "landmarks.json").exists()
    assert (tmp_path / "clip" / "frames" / "frame_0000.png").exists()
    assert (tmp_path / "clip" / "landmarks" / "frame_0000.json").exists()

    from avatarforge.camera import load_camera_manifest
    entries = load_camera_manifest(tmp_path / "scene" / "cameras.json")
    assert len(entries) == len(scene.cameras)
    from avatarforge.geometry import load_obj
    scan = load_obj(tmp_path / "scene" / "scan.obj")
    np.testing.assert_allclose(scan.vertices, scene.s_raw.vertices)
    np.testing.assert_array_equal(scan.labels["hair"], scene.s_raw.labels["hair"])
