import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staticsplat.geometry import (
    Intrinsics,
    Pose,
    axis_angle_to_quat,
    depth_to_pointmap,
    induced_flow,
    pixel_grid,
    project_points,
    quat_to_rotmat,
    relative_pose,
    rotation_angle,
    rotmat_grad_to_quat,
    rotmat_to_quat,
    transform_pointmap,
    umeyama,
)


def random_pose(rng, scale=1.0):
    return Pose(axis_angle_to_quat(rng.normal(size=3), rng.uniform(-np.pi, np.pi)), scale * rng.normal(size=3))


def test_principal_ray():
    intr = Intrinsics(1.0, 1.0, 0.0, 0.0, 4, 4)
    pm = depth_to_pointmap(np.ones((4, 4)), intr)
    np.testing.assert_array_equal(pm[0, 0], [0.0, 0.0, 1.0])


def test_45_degree_ray():
    intr = Intrinsics(2.0, 2.0, 1.0, 1.0, 5, 5)
    depth = np.full((5, 5), 2.0)
    pm = depth_to_pointmap(depth, intr)
    np.testing.assert_allclose(pm[1, 3], [2.0, 0.0, 2.0])


def test_nonpositive_depth_rejected():
    intr = Intrinsics.centered(10.0, 4, 4)
    depth = np.ones((4, 4))
    depth[2, 1] = 0.0
    with pytest.raises(ValueError):
        depth_to_pointmap(depth, intr)
    depth[2, 1] = -1.0
    with pytest.raises(ValueError):
        depth_to_pointmap(depth, intr)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_projection_round_trip(seed):
    rng = np.random.default_rng(seed)
    intr = Intrinsics(rng.uniform(5, 80), rng.uniform(5, 80), rng.uniform(0, 11), rng.uniform(0, 8), 12, 9)
    depth = np.exp(rng.uniform(-3, 4, size=(9, 12)))
    uv, z = project_points(depth_to_pointmap(depth, intr), intr)
    u, v = pixel_grid(9, 12)
    assert np.max(np.abs(uv[..., 0] - u)) < 1e-6
    assert np.max(np.abs(uv[..., 1] - v)) < 1e-6
    np.testing.assert_allclose(z, depth)


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(0.0, 1.0, 1.0, 1.0, 4, 4)
    with pytest.raises(ValueError):
        Intrinsics(1.0, 1.0, 4.0, 1.0, 4, 4)


def test_transform_identity_and_translation(rng):
    pm = rng.normal(size=(3, 4, 3))
    np.testing.assert_array_equal(transform_pointmap(Pose.identity(), pm), pm)
    moved = transform_pointmap(Pose(t=[1.0, 0.0, 0.0]), pm)
    np.testing.assert_allclose(moved[..., 0], pm[..., 0] + 1.0)
    np.testing.assert_allclose(moved[..., 1:], pm[..., 1:])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_transform_inverse_round_trip_and_rigidity(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, 3.0)
    pm = rng.normal(size=(4, 5, 3))
    back = transform_pointmap(pose.inverse(), transform_pointmap(pose, pm))
    assert np.max(np.abs(back - pm)) < 1e-9
    flat = pm.reshape(-1, 3)
    moved = transform_pointmap(pose, pm).reshape(-1, 3)
    d0 = np.linalg.norm(flat[:, None] - flat[None], axis=-1)
    d1 = np.linalg.norm(moved[:, None] - moved[None], axis=-1)
    assert np.max(np.abs(d0 - d1)) < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pose_invariants(seed):
    rng = np.random.default_rng(seed)
    pose = random_pose(rng, 2.0)
    assert abs(np.linalg.norm(pose.q) - 1.0) < 1e-9
    ident = pose.compose(pose.inverse())
    assert np.max(np.abs(ident.matrix() - np.eye(4))) < 1e-9
    np.testing.assert_allclose(Pose.from_matrix(pose.matrix()).matrix(), pose.matrix(), atol=1e-12)


def test_quaternion_matrix_round_trip(rng):
    for _ in range(20):
        q = axis_angle_to_quat(rng.normal(size=3), rng.uniform(0, np.pi))
        q = q if q[0] >= 0 else -q
        np.testing.assert_allclose(rotmat_to_quat(quat_to_rotmat(q)), q, atol=1e-12)


def test_rotmat_grad_to_quat_matches_finite_differences(rng):
    q = rng.normal(size=4) * 1.7
    G = rng.normal(size=(3, 3))
    f = lambda q_: float(np.sum(G * quat_to_rotmat(q_)))
    analytic = rotmat_grad_to_quat(q, G)
    h = 1e-6
    fd = np.array([(f(q + h * e) - f(q - h * e)) / (2 * h) for e in np.eye(4)])
    np.testing.assert_allclose(analytic, fd, rtol=1e-6, atol=1e-8)


def test_rotation_angle_small_and_large():
    for angle in (1e-9, 1e-3, 0.5, 3.0):
        R = quat_to_rotmat(axis_angle_to_quat([0.3, -1.0, 0.2], angle))
        assert abs(rotation_angle(R) - angle) < 1e-12


def test_relative_pose_maps_b_camera_into_a_camera(rng):
    a, b = random_pose(rng), random_pose(rng)
    x = rng.normal(size=3)
    world = b.apply(x)
    np.testing.assert_allclose(relative_pose(a, b).apply(x), a.inverse().apply(world), atol=1e-12)


def test_umeyama_recovers_similarity(rng):
    src = rng.normal(size=(40, 3))
    R = quat_to_rotmat(axis_angle_to_quat([1, 2, 3], 0.8))
    dst = 2.5 * src @ R.T + np.array([1.0, -2.0, 0.5])
    R_, t_, s_ = umeyama(src, dst)
    np.testing.assert_allclose(R_, R, atol=1e-12)
    np.testing.assert_allclose(t_, [1.0, -2.0, 0.5], atol=1e-12)
    assert abs(s_ - 2.5) < 1e-12


def test_induced_flow_static_camera_is_zero(rng):
    intr = Intrinsics.centered(20.0, 8, 6)
    pose = random_pose(rng)
    ff = induced_flow(np.exp(rng.normal(size=(6, 8))), pose, pose, intr)
    assert ff.valid.all()
    assert np.max(np.abs(ff.flow)) < 1e-9


def test_induced_flow_planar_translation():
    intr = Intrinsics.centered(30.0, 16, 12)
    Z, tx = 4.0, 0.2
    ff = induced_flow(np.full((12, 16), Z), Pose.identity(), Pose(t=[tx, 0.0, 0.0]), intr)
    expected = -intr.fx * tx / Z
    np.testing.assert_allclose(ff.flow[ff.valid][:, 0], expected, atol=1e-12)
    np.testing.assert_allclose(ff.flow[ff.valid][:, 1], 0.0, atol=1e-12)
    # pixels that leave the frame are flagged and zeroed
    assert not ff.valid.all()
    assert np.all(ff.flow[~ff.valid] == 0.0)
