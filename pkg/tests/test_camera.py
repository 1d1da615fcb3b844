import json

import numpy as np
import pytest

from avatarforge.camera import (
    Camera,
    backproject_landmarks,
    load_camera_manifest,
    look_at,
    pixel_rays,
    project,
    project_points,
    save_camera_manifest,
)
from avatarforge.errors import EmptyCorrespondenceError, InvalidInputError
from avatarforge.geometry import build_bvh, closest_points_on_mesh
from avatarforge.headmodel import PoseParams, evaluate, generate_synthetic_model


def identity_camera(fx=1.0, fy=1.0, cx=0.0, cy=0.0, w=100, h=100):
    return Camera(fx=fx, fy=fy, cx=cx, cy=cy, rotation=np.eye(3),
                  translation=np.zeros(3), width=w, height=h)


def test_project_optical_axis():
    pix, depth = project(identity_camera(), [0.0, 0.0, 1.0])
    np.testing.assert_allclose(pix, [0.0, 0.0], atol=1e-12)
    assert depth == pytest.approx(1.0)


def test_project_similar_triangles():
    cam = identity_camera(fx=100.0, fy=100.0, cx=50.0, cy=50.0)
    pix, depth = project(cam, [1.0, 0.0, 2.0])
    assert pix[0] == pytest.approx(100.0)
    assert depth == pytest.approx(2.0)


def test_behind_camera_signaled_by_depth():
    _, depth = project(identity_camera(), [0.0, 0.0, -1.0])
    assert depth < 0


def test_backproject_reproject_roundtrip():
    rng = np.random.default_rng(0)
    cam = look_at([0.1, 0.2, 1.5], [0, 0, 0], width=256, height=256)
    pts = rng.uniform(-0.2, 0.2, size=(50, 3))
    pix, depth = project_points(cam, pts)
    origins, dirs = pixel_rays(cam, pix)
    lifted = origins + depth[:, None] / (dirs @ cam.rotation[2]) [:, None] * dirs
    re_pix, _ = project_points(cam, lifted)
    np.testing.assert_allclose(re_pix, pix, atol=1e-9)


def test_rotation_must_be_orthonormal():
    with pytest.raises(InvalidInputError):
        Camera(fx=1, fy=1, cx=0, cy=0, rotation=np.eye(3) * 1.01,
               translation=np.zeros(3), width=8, height=8)


@pytest.fixture(scope="module")
def head_scene():
    model = generate_synthetic_model(seed=2, n_vertices=1200, n_id=4, n_expr=4)
    mesh = evaluate(model, PoseParams(), np.zeros(4), np.zeros(4))
    cam = look_at([0.0, 0.0, 0.4], [0, 0, 0], width=256, height=256)
    return model, mesh, cam


def test_backproject_known_vertices(head_scene):
    model, mesh, cam = head_scene
    lm = model.landmark_indices
    pix, _ = project_points(cam, mesh.vertices[lm])
    pts, hits, _ = backproject_landmarks(cam, pix, mesh)
    assert hits.all()
    err = np.linalg.norm(pts - mesh.vertices[lm], axis=1).max()
    assert err < 1e-6 * mesh.bbox_diagonal() + 1e-9


def test_backprojected_points_lie_on_surface(head_scene):
    _, mesh, cam = head_scene
    rng = np.random.default_rng(1)
    pix = np.stack([rng.uniform(100, 156, 40), rng.uniform(100, 156, 40)], axis=1)
    pts, hits, _ = backproject_landmarks(cam, pix, mesh)
    bvh = build_bvh(mesh)
    _, _, d = closest_points_on_mesh(pts[hits], bvh)
    assert d.max() < 1e-9


def test_backproject_miss_flagged(head_scene):
    _, mesh, cam = head_scene
    pix = np.array([[1.0, 1.0], [128.0, 128.0]])  # corner ray misses the head
    pts, hits, _ = backproject_landmarks(cam, pix, mesh)
    assert not hits[0] and hits[1]
    np.testing.assert_array_equal(pts[0], 0.0)


def test_backproject_all_miss_raises(head_scene):
    _, mesh, cam = head_scene
    pix = np.array([[1.0, 1.0], [2.0, 2.0]])
    with pytest.raises(EmptyCorrespondenceError):
        backproject_landmarks(cam, pix, mesh)


def test_manifest_roundtrip_and_distortion_rejection(tmp_path):
    cam = look_at([0, 0, 1.0], [0, 0, 0], width=64, height=48)
    path = tmp_path / "cams.json"
    save_camera_manifest(path, [("img0.png", cam)])
    entries = load_camera_manifest(path)
    assert entries[0][0] == "img0.png"
    got = entries[0][1]
    np.testing.assert_allclose(got.rotation, cam.rotation)
    np.testing.assert_allclose(got.translation, cam.translation)
    assert (got.width, got.height) == (64, 48)

    bad = json.loads(path.read_text())
    bad[0]["k1"] = 0.1
    path.write_text(json.dumps(bad))
    with pytest.raises(InvalidInputError):
        load_camera_manifest(path)
