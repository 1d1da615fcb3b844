import numpy as np
import pytest

from avatarforge.errors import InvalidInputError
from avatarforge.headmodel import (
    PoseParams,
    evaluate,
    generate_synthetic_model,
    load_head_model,
    parameter_jacobian,
    rodrigues,
    rodrigues_jacobian,
    rotation_to_rotvec,
    save_head_model,
)


@pytest.fixture(scope="module")
def model():
    return generate_synthetic_model(seed=0, n_vertices=900, n_id=12, n_expr=10)


def random_pose(rng, scale=0.3):
    return PoseParams(
        theta_global=rng.uniform(-scale, scale, 3),
        theta_joints=rng.uniform(-scale, scale, (4, 3)),
        translation=rng.uniform(-0.05, 0.05, 3),
    )


# --- rotation helpers -------------------------------------------------------

def test_rodrigues_identity_and_roundtrip():
    np.testing.assert_allclose(rodrigues([0, 0, 0]), np.eye(3))
    rng = np.random.default_rng(0)
    for _ in range(20):
        rv = rng.uniform(-1, 1, 3)
        R = rodrigues(rv)
        np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
        np.testing.assert_allclose(rotation_to_rotvec(R), rv, atol=1e-9)


def test_rodrigues_jacobian_matches_fd():
    rng = np.random.default_rng(1)
    h = 1e-6
    for _ in range(10):
        rv = rng.uniform(-1.5, 1.5, 3)
        J = rodrigues_jacobian(rv)
        for k in range(3):
            e = np.zeros(3)
            e[k] = h
            fd = (rodrigues(rv + e) - rodrigues(rv - e)) / (2 * h)
            np.testing.assert_allclose(J[k], fd, atol=1e-6)


# --- evaluate ---------------------------------------------------------------

def test_evaluate_identity_configuration(model):
    mesh = evaluate(model, PoseParams(), np.zeros(model.n_id), np.zeros(model.n_expr))
    np.testing.assert_allclose(mesh.vertices, model.template, atol=1e-12)


def test_evaluate_pure_translation(model):
    pose = PoseParams(translation=[1.0, 2.0, 3.0])
    mesh = evaluate(model, pose, np.zeros(model.n_id), np.zeros(model.n_expr))
    np.testing.assert_allclose(mesh.vertices, model.template + [1, 2, 3], atol=1e-12)


def test_evaluate_linear_in_beta_at_zero_pose(model):
    rng = np.random.default_rng(2)
    b1 = rng.normal(size=model.n_id)
    b2 = rng.normal(size=model.n_id)
    zero_a = np.zeros(model.n_expr)
    pose = PoseParams()
    v_sum = evaluate(model, pose, b1 + b2, zero_a).vertices
    v1 = evaluate(model, pose, b1, zero_a).vertices
    v2 = evaluate(model, pose, b2, zero_a).vertices
    np.testing.assert_allclose(v_sum, v1 + v2 - model.template, atol=1e-12)


def test_evaluate_dimension_mismatch(model):
    with pytest.raises(InvalidInputError):
        evaluate(model, PoseParams(), np.zeros(model.n_id + 1), np.zeros(model.n_expr))


def test_rigid_invariance_global_rotation(model):
    rng = np.random.default_rng(3)
    beta = rng.normal(scale=0.3, size=model.n_id)
    alpha = rng.normal(scale=0.3, size=model.n_expr)
    rv = np.array([0.3, -0.2, 0.5])
    t = np.array([0.01, 0.02, -0.01])
    pose = PoseParams(theta_global=rv, translation=t)
    rotated = evaluate(model, pose, beta, alpha).vertices
    rest = evaluate(model, PoseParams(), beta, alpha).vertices
    R = rodrigues(rv)
    g = model.joint_rest[0]
    expected = (rest - g) @ R.T + g + t
    np.testing.assert_allclose(rotated, expected, atol=1e-9)


def test_evaluate_continuity_in_each_parameter(model):
    rng = np.random.default_rng(4)
    beta = rng.normal(scale=0.2, size=model.n_id)
    alpha = rng.normal(scale=0.2, size=model.n_expr)
    pose = random_pose(rng)
    base = evaluate(model, pose, beta, alpha).vertices
    for eps in (1e-2, 1e-3, 1e-4):
        b = beta.copy()
        b[0] += eps
        moved = evaluate(model, pose, b, alpha).vertices
        ratio = np.abs(moved - base).max() / eps
        assert ratio < 10.0  # displacement stays O(eps)


# --- jacobians --------------------------------------------------------------

def test_beta_jacobian_equals_basis_at_zero_pose(model):
    J = parameter_jacobian(model, PoseParams(), np.zeros(model.n_id),
                           np.zeros(model.n_expr), "beta")
    for i in range(model.n_id):
        np.testing.assert_allclose(J[:, i], model.identity_basis[i].ravel(), atol=1e-12)


def test_translation_columns_constant_pattern(model):
    J = parameter_jacobian(model, PoseParams(), np.zeros(model.n_id),
                           np.zeros(model.n_expr), "pose")
    n = model.n_vertices
    for k in range(3):
        col = J[:, 15 + k].reshape(n, 3)
        expected = np.zeros((n, 3))
        expected[:, k] = 1.0
        np.testing.assert_array_equal(col, expected)


@pytest.mark.parametrize("which", ["beta", "alpha", "pose"])
def test_jacobian_matches_finite_differences(model, which):
    rng = np.random.default_rng(5)
    beta = rng.normal(scale=0.3, size=model.n_id)
    alpha = rng.normal(scale=0.3, size=model.n_expr)
    pose = random_pose(rng)
    J = parameter_jacobian(model, pose, beta, alpha, which)
    h = 1e-5

    def vertices_for(vec):
        if which == "beta":
            return evaluate(model, pose, vec, alpha).vertices
        if which == "alpha":
            return evaluate(model, pose, beta, vec).vertices
        return evaluate(model, PoseParams.from_vector(vec), beta, alpha).vertices

    base_vec = {"beta": beta, "alpha": alpha, "pose": pose.as_vector()}[which]
    cols = rng.choice(J.shape[1], size=min(8, J.shape[1]), replace=False)
    scale = max(1.0, np.abs(J).max())
    for c in cols:
        e = np.zeros_like(base_vec)
        e[c] = h
        fd = (vertices_for(base_vec + e) - vertices_for(base_vec - e)).ravel() / (2 * h)
        err = np.abs(J[:, c] - fd).max() / scale
        assert err < 1e-4


def test_jacobian_fd_at_10_random_configurations(model):
    rng = np.random.default_rng(6)
    h = 1e-5
    for _ in range(10):
        beta = rng.normal(scale=0.3, size=model.n_id)
        alpha = rng.normal(scale=0.3, size=model.n_expr)
        pose = random_pose(rng)
        J = parameter_jacobian(model, pose, beta, alpha, "beta")
        c = rng.integers(model.n_id)
        e = np.zeros(model.n_id)
        e[c] = h
        fd = (evaluate(model, pose, beta + e, alpha).vertices
              - evaluate(model, pose, beta - e, alpha).vertices).ravel() / (2 * h)
        rel = np.abs(J[:, c] - fd).max() / max(1e-12, np.abs(fd).max())
        assert rel < 1e-4


def test_jacobian_unknown_selector(model):
    with pytest.raises(InvalidInputError):
        parameter_jacobian(model, PoseParams(), np.zeros(model.n_id),
                           np.zeros(model.n_expr), "gamma")


# --- synthetic model --------------------------------------------------------

def test_same_seed_bitwise_identical():
    a = generate_synthetic_model(seed=7, n_vertices=600, n_id=4, n_expr=4)
    b = generate_synthetic_model(seed=7, n_vertices=600, n_id=4, n_expr=4)
    np.testing.assert_array_equal(a.template, b.template)
    np.testing.assert_array_equal(a.identity_basis, b.identity_basis)
    np.testing.assert_array_equal(a.skin_weights, b.skin_weights)
    np.testing.assert_array_equal(a.landmark_indices, b.landmark_indices)


def test_driving_vector_dimension_is_103():
    model = generate_synthetic_model(seed=1, n_vertices=600, n_id=100, n_expr=100)
    alpha = np.zeros(model.n_expr)
    view_angle = np.zeros(3)
    assert len(np.concatenate([alpha, view_angle])) == 103


def test_skin_weight_rows_sum_to_one(model):
    sums = model.skin_weights.sum(axis=1)
    np.testing.assert_allclose(sums, 1.0, atol=1e-6)
    assert (model.skin_weights >= 0).all()


def test_model_invariants(model):
    assert len(model.landmark_indices) == 68
    assert len(np.unique(model.landmark_indices)) == 68
    assert model.landmark_indices.max() < model.n_vertices
    assert model.uvs.min() >= 0.0 and model.uvs.max() <= 1.0
    # Blendshape amplitude <= 5% of head size.
    head = model.template.max(axis=0) - model.template.min(axis=0)
    disp = np.linalg.norm(model.identity_basis, axis=2).max()
    assert disp <= 0.05 * head.max() * 1.001
    for name in ("face", "eyes", "mouth"):
        assert len(model.region_vertices[name]) > 0


def test_too_small_model_rejected():
    with pytest.raises(InvalidInputError):
        generate_synthetic_model(seed=0, n_vertices=50)


# --- serialization ----------------------------------------------------------

def test_avf_roundtrip(model, tmp_path):
    path = tmp_path / "model.avf"
    save_head_model(model, path)
    back = load_head_model(path)
    np.testing.assert_array_equal(back.template, model.template)
    np.testing.assert_array_equal(back.identity_basis, model.identity_basis)
    np.testing.assert_array_equal(back.triangles, model.triangles)
    np.testing.assert_array_equal(back.landmark_indices, model.landmark_indices)
    for name, idx in model.region_vertices.items():
        np.testing.assert_array_equal(back.region_vertices[name], idx)
