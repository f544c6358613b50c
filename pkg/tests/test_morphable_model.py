import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from facialflow.errors import FormatError, InvalidParameterError, ShapeError
from facialflow.morphable_model import (
    LandmarkSet, ModelParams, MorphableBasis, decode_basis, encode_basis, landmarks_2d,
    load_params, model_to_image, project, random_params, reconstruct, rotation_matrix,
    rotation_matrix_derivatives, save_params, synthetic_basis, to_obj,
)

from oracles import dense_reconstruct, euler_to_matrix

angles = st.floats(-np.pi, np.pi, allow_nan=False)


def test_zero_rotation_is_identity():
    assert np.array_equal(rotation_matrix([0.0, 0.0, 0.0]), np.eye(3))


def test_quarter_yaw_maps_x_to_minus_z():
    np.testing.assert_allclose(rotation_matrix([0.0, np.pi / 2, 0.0]) @ [1.0, 0.0, 0.0],
                               [0.0, 0.0, -1.0], atol=1e-15)


@given(angles, angles, angles)
def test_rotation_is_proper(p, y, r):
    rot = rotation_matrix([p, y, r])
    np.testing.assert_allclose(rot.T @ rot, np.eye(3), atol=1e-12)
    assert abs(np.linalg.det(rot) - 1.0) < 1e-12


@given(angles, angles, angles)
def test_rotation_matches_elementwise_oracle(p, y, r):
    np.testing.assert_allclose(rotation_matrix([p, y, r]), euler_to_matrix(p, y, r), atol=1e-14)


def test_rotation_derivatives_match_finite_differences(rng):
    rot = rng.uniform(-1, 1, 3)
    deriv = rotation_matrix_derivatives(rot)
    for k in range(3):
        f = lambda v: rotation_matrix(v).ravel()
        e = np.zeros(3)
        e[k] = 1e-6
        numeric = (f(rot + e) - f(rot - e)) / 2e-6
        np.testing.assert_allclose(deriv[k].ravel(), numeric, atol=1e-9)


def test_rotation_rejects_nonfinite():
    with pytest.raises(InvalidParameterError):
        rotation_matrix([0.0, np.nan, 0.0])


def test_zero_params_give_mean_shape(basis):
    cloud = reconstruct(basis, ModelParams.zeros(basis.n_id, basis.n_exp))
    assert np.array_equal(cloud.ravel(), basis.mean_shape)


def test_pure_scaling(basis):
    cloud = reconstruct(basis, ModelParams.zeros(basis.n_id, basis.n_exp, scale=2.0))
    assert np.array_equal(cloud.ravel(), 2.0 * basis.mean_shape)


def test_reconstruct_matches_dense_oracle_small_basis(rng):
    n = 70
    mean = rng.normal(size=3 * n)
    a_id = rng.normal(size=(3 * n, 2))
    a_exp = rng.normal(size=(3 * n, 1))
    small = MorphableBasis(mean, a_id, a_exp, np.arange(68))
    params = ModelParams([1.0, 0.0], [0.0])
    np.testing.assert_allclose(reconstruct(small, params), dense_reconstruct(small, params),
                               atol=1e-12)


def test_reconstruct_matches_dense_oracle_random(basis, rng):
    params = random_params(basis, rng)
    np.testing.assert_allclose(reconstruct(basis, params), dense_reconstruct(basis, params),
                               rtol=0, atol=1e-10)


def test_reconstruct_is_linear_in_coefficients(basis, rng):
    pose = random_params(basis, rng)
    a1 = pose.replace(alpha_id=rng.normal(size=10), alpha_exp=rng.normal(size=10))
    a2 = pose.replace(alpha_id=rng.normal(size=10), alpha_exp=rng.normal(size=10))
    both = pose.replace(alpha_id=a1.alpha_id + a2.alpha_id, alpha_exp=a1.alpha_exp + a2.alpha_exp)
    zero = pose.replace(alpha_id=np.zeros(10), alpha_exp=np.zeros(10))
    x0 = reconstruct(basis, zero)
    lhs = reconstruct(basis, both) - x0
    rhs = (reconstruct(basis, a1) - x0) + (reconstruct(basis, a2) - x0)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_reconstruct_errors(basis):
    with pytest.raises(ShapeError):
        reconstruct(basis, ModelParams.zeros(3, basis.n_exp))
    with pytest.raises(InvalidParameterError):
        ModelParams.zeros(10, 10, scale=0.0)
    with pytest.raises(InvalidParameterError):
        ModelParams.zeros(10, 10, scale=-1.0)


def test_project_drops_z():
    assert np.array_equal(project([[3.0, 4.0, 5.0]]), [[3.0, 4.0]])
    assert project(np.zeros((0, 3))).shape == (0, 2)


def test_project_matches_matrix_oracle(rng):
    cloud = rng.normal(size=(50, 3))
    pr = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(project(cloud), (pr @ cloud.T).T)


def test_landmarks_at_zero_params(basis):
    lm = landmarks_2d(basis, ModelParams.zeros(10, 10))
    expected = basis.mean_shape.reshape(-1, 3)[basis.landmark_indices, :2]
    assert np.array_equal(lm.points, expected)
    assert np.array_equal(lm.weights, np.ones(68))


def test_landmarks_shift_with_translation(basis):
    base = landmarks_2d(basis, ModelParams.zeros(10, 10)).points
    moved = landmarks_2d(basis, ModelParams.zeros(10, 10).replace(translation=[10.0, 0, 0])).points
    np.testing.assert_allclose(moved - base, np.tile([10.0, 0.0], (68, 1)), atol=1e-12)


def test_landmarks_match_composition_oracle(basis, rng):
    params = random_params(basis, rng)
    cloud = dense_reconstruct(basis, params)
    expected = np.array([[cloud[i, 0], cloud[i, 1]] for i in basis.landmark_indices])
    np.testing.assert_allclose(landmarks_2d(basis, params).points, expected, atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.integers(0, 10_000))
def test_projection_commutes_with_xy_translation(dx, dy, seed):
    basis = _BASIS
    params = random_params(basis, np.random.default_rng(seed))
    moved = params.replace(translation=params.translation + [dx, dy, 0.0])
    diff = project(reconstruct(basis, moved)) - project(reconstruct(basis, params))
    np.testing.assert_allclose(diff, np.tile([dx, dy], (basis.n_vertices, 1)), atol=1e-9)


_BASIS = synthetic_basis()


def test_synthetic_basis_shape(basis):
    assert basis.n_vertices == 500 and basis.n_id == 10 and basis.n_exp == 10
    np.testing.assert_allclose(basis.id_basis.T @ basis.id_basis, np.eye(10), atol=1e-6)
    assert len(set(basis.landmark_indices.tolist())) == 68
    assert synthetic_basis().mean_shape.tobytes() == basis.mean_shape.tobytes()


def test_basis_validation(rng):
    mean = rng.normal(size=3 * 70)
    with pytest.raises(ShapeError):
        MorphableBasis(mean, rng.normal(size=(3 * 70, 2)), rng.normal(size=(3 * 69, 1)),
                       np.arange(68))
    with pytest.raises(ShapeError):
        MorphableBasis(mean, rng.normal(size=(210, 2)), rng.normal(size=(210, 1)),
                       np.r_[np.arange(67), 0])
    with pytest.raises(ShapeError):
        MorphableBasis(mean, rng.normal(size=(210, 2)), rng.normal(size=(210, 1)),
                       np.r_[np.arange(67), 70])
    with pytest.raises(ShapeError):
        MorphableBasis(rng.normal(size=30), rng.normal(size=(30, 1)), rng.normal(size=(30, 1)),
                       np.arange(68))


def test_f3b_roundtrip_is_bit_exact(basis):
    payload = encode_basis(basis)
    decoded = decode_basis(payload)
    for name in ("mean_shape", "id_basis", "exp_basis", "landmark_indices", "triangles"):
        assert np.array_equal(getattr(decoded, name), getattr(basis, name)), name
    assert encode_basis(decoded) == payload


def test_f3b_layout(basis):
    payload = encode_basis(basis)
    assert payload[:4] == b"F3B1"
    assert np.frombuffer(payload[4:24], "<u4").tolist() == [1, 500, 10, 10, 68]
    # id_basis is column-major: the first 3N floats after the mean are column 0.
    start = 24 + 4 * 1500
    col0 = np.frombuffer(payload[start:start + 4 * 1500], "<f4")
    assert np.array_equal(col0, basis.id_basis[:, 0].astype(np.float32))


@pytest.mark.parametrize("mutate", [
    lambda b: b"XXXX" + b[4:],
    lambda b: b[:4] + (2).to_bytes(4, "little") + b[8:],
    lambda b: b[:-5],
    lambda b: b + b"\0",
])
def test_f3b_rejects_malformed(basis, mutate):
    with pytest.raises(FormatError):
        decode_basis(mutate(encode_basis(basis)))


def test_params_json_roundtrip(tmp_path, basis, rng):
    params = random_params(basis, rng)
    save_params(params, tmp_path / "p.json")
    back = load_params(tmp_path / "p.json")
    assert np.array_equal(back.to_vector(), params.to_vector())
    (tmp_path / "bad.json").write_text('{"alpha_id": [1]}')
    with pytest.raises(FormatError):
        load_params(tmp_path / "bad.json")


def test_landmark_set_validation():
    with pytest.raises(ShapeError):
        LandmarkSet(np.zeros((67, 2)))
    with pytest.raises(InvalidParameterError):
        LandmarkSet(np.zeros((68, 2)), np.r_[np.ones(67), 0.0])


def test_model_to_image_flips_rows():
    np.testing.assert_array_equal(model_to_image([[3.0, 0.0], [3.0, 31.0]], 32),
                                  [[3.0, 31.0], [3.0, 0.0]])


def test_obj_export(basis):
    text = to_obj(basis.mean_shape.reshape(-1, 3), basis.triangles)
    lines = text.splitlines()
    assert sum(l.startswith("v ") for l in lines) == 500
    faces = [l for l in lines if l.startswith("f ")]
    assert len(faces) == len(basis.triangles)
    assert faces[0] == "f {} {} {}".format(*(basis.triangles[0] + 1))
