import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stylegs.errors import ParameterError
from stylegs.gaussians import (
    CloudGrads,
    GaussianCloud,
    covariance_from_params,
    init_cloud,
    normalize_quaternions,
    quaternion_to_matrix,
)

from oracles import explicit_covariance, rotation_z

finite = st.floats(-3, 3, allow_nan=False)
quats = arrays(np.float64, 4, elements=st.floats(-1, 1)).filter(lambda q: np.linalg.norm(q) > 0.1)


def test_identity_covariance():
    assert np.array_equal(covariance_from_params(np.zeros(3), [1, 0, 0, 0]), np.eye(3))


def test_axis_aligned_scaling():
    cov = covariance_from_params([math.log(2), 0, 0], [1, 0, 0, 0])
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 1.0]), atol=1e-15)


def test_rotated_scaling_matches_explicit_product():
    half = math.pi / 4
    quat = [math.cos(half), 0, 0, math.sin(half)]
    cov = covariance_from_params([math.log(2), 0, 0], quat)
    expected = explicit_covariance([2.0, 1.0, 1.0], rotation_z(math.pi / 2))
    np.testing.assert_allclose(cov, expected, atol=1e-14)
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 1.0]), atol=1e-14)


def test_non_finite_covariance_input():
    with pytest.raises(ParameterError):
        covariance_from_params([np.nan, 0, 0], [1, 0, 0, 0])


@given(arrays(np.float64, 3, elements=finite), quats)
def test_covariance_eigenvalues(log_scale, quat):
    cov = covariance_from_params(log_scale, quat)
    assert np.array_equal(cov, cov.T)
    eig = np.sort(np.linalg.eigvalsh(cov))
    np.testing.assert_allclose(eig, np.sort(np.exp(2 * log_scale)), rtol=1e-8, atol=0)


@given(quats)
def test_quaternion_renormalization_is_idempotent(q):
    once = normalize_quaternions(q)
    assert abs(np.linalg.norm(once) - 1) < 1e-12
    np.testing.assert_allclose(normalize_quaternions(once), once, atol=1e-15)


@given(quats)
def test_rotation_matrix_is_orthonormal(q):
    r = quaternion_to_matrix(normalize_quaternions(q))
    np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_init_single_sphere_point():
    cloud = init_cloud("sphere", 1, 1.0, seed=5)
    assert len(cloud) == 1
    assert np.linalg.norm(cloud.means[0]) == pytest.approx(1.0)


def test_init_deterministic():
    a = init_cloud("sphere", 1000, 1.0, seed=7)
    b = init_cloud("sphere", 1000, 1.0, seed=7)
    assert a.equals(b)
    assert not a.equals(init_cloud("sphere", 1000, 1.0, seed=8))


def test_init_box_support():
    cloud = init_cloud("box", 500, 1.0, seed=3)
    assert np.all(np.abs(cloud.means) <= 0.5)


def test_init_defaults():
    cloud = init_cloud("sphere", 300, 1.0, seed=0)
    np.testing.assert_allclose(cloud.opacities, 0.1)
    assert np.all(cloud.colors == 0.5)
    np.testing.assert_allclose(np.linalg.norm(cloud.rotations, axis=1), 1.0)
    # mean nearest-neighbour spacing is about two scales
    d = np.linalg.norm(cloud.means[:, None] - cloud.means[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    assert 2 * cloud.scales[0, 0] == pytest.approx(d.min(axis=1).mean(), rel=1e-9)


def test_init_loaded_points():
    pts = np.arange(12.0).reshape(4, 3)
    cloud = init_cloud("loaded", 4, 1.0, points=pts)
    assert np.array_equal(cloud.means, pts)


@pytest.mark.parametrize("kwargs", [dict(n=0), dict(n=5, extent=0.0), dict(n=5, shape="torus")])
def test_init_rejects(kwargs):
    args = dict(shape="sphere", extent=1.0)
    args.update(kwargs)
    with pytest.raises(ParameterError):
        init_cloud(args.pop("shape"), args.pop("n"), **args)


def test_cloud_shape_check():
    with pytest.raises(ParameterError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 4)), np.zeros((2, 3)), np.zeros((3, 1)), np.zeros((2, 3)))


def test_cloud_normalize_clamps_colors(cloud8):
    cloud8.colors[0] = [1.5, -0.2, 0.5]
    cloud8.rotations[1] *= 7
    cloud8.normalize()
    assert np.array_equal(cloud8.colors[0], [1.0, 0.0, 0.5])
    np.testing.assert_allclose(np.linalg.norm(cloud8.rotations, axis=1), 1.0, atol=1e-12)


def test_check_finite(cloud8):
    cloud8.means[2, 1] = np.inf
    with pytest.raises(ParameterError):
        cloud8.check_finite()


def test_grads_check(cloud8):
    grads = CloudGrads.zeros_like(cloud8)
    grads.check(cloud8)
    grads.colors[0, 0] = np.nan
    with pytest.raises(ParameterError):
        grads.check(cloud8)
