import numpy as np
import pytest

from servotrack.camera import (
    CameraModel,
    Intrinsics,
    NonPositiveDepth,
    StereoFeature,
    image_jacobian,
    project_point,
    projection_matrix,
    stereo_feature,
    triangulate,
)
from servotrack.kinematics import DHChain, DHLink, Transform, forward_kinematics

from oracles import project_two_step, rodrigues


def random_camera(rng):
    K = Intrinsics(fx=rng.uniform(200, 600), fy=rng.uniform(200, 600), cx=rng.uniform(100, 200),
                   cy=rng.uniform(80, 160), width=320, height=240)
    return K, Transform(rodrigues(0.3 * rng.normal(size=3)), 0.1 * rng.normal(size=3))


def random_stereo(rng):
    """Two cameras looking down +z with a horizontal baseline, plus a point in front."""
    K = Intrinsics(fx=rng.uniform(250, 500), fy=rng.uniform(250, 500), cx=160.0, cy=120.0, width=320, height=240)
    b = rng.uniform(0.03, 0.1)
    R = rodrigues(0.05 * rng.normal(size=3))
    Pi_l = projection_matrix(K, Transform(R, [b / 2, 0, 0]))
    Pi_r = projection_matrix(K, Transform(R, [-b / 2, 0, 0]))
    p = np.array([rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1), rng.uniform(0.2, 1.0)])
    return Pi_l, Pi_r, p


def test_identity_camera_projection_matrix():
    K = Intrinsics(1.0, 1.0, 0.0, 0.0, 1, 1)
    np.testing.assert_array_equal(projection_matrix(K, Transform.identity()), np.hstack([np.eye(3), np.zeros((3, 1))]))


def test_translation_only_extrinsic():
    K = Intrinsics(300.0, 310.0, 160.0, 120.0, 320, 240)
    t = np.array([0.1, -0.2, 0.5])
    Pi = projection_matrix(K, Transform(np.eye(3), t))
    np.testing.assert_allclose(Pi[:, 3], K.K @ t, atol=1e-12)


def test_projection_matches_two_step_oracle():
    rng = np.random.default_rng(0)
    for _ in range(10):
        K, H = random_camera(rng)
        Pi = projection_matrix(K, H)
        for _ in range(10):
            p = H.inverse().apply([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.3, 2.0)])
            u = project_point(Pi, p)
            uo, vo = project_two_step(K.K, H.rotation, H.translation, p)
            assert abs(u.u - uo) < 1e-9 and abs(u.v - vo) < 1e-9


def test_principal_point_on_axis():
    K = Intrinsics(320.0, 320.0, 160.0, 120.0, 320, 240)
    u = project_point(projection_matrix(K, Transform.identity()), [0, 0, 1])
    assert (u.u, u.v) == (160.0, 120.0)


def test_projection_scale_invariance():
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        K, H = random_camera(rng)
        Pi = projection_matrix(K, H)
        p = H.inverse().apply([rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(0.3, 2.0)])
        X = np.append(p, 1.0)
        a = project_point(Pi, X)
        for s in (2.0, rng.uniform(0.1, 10.0)):
            b = project_point(Pi, s * X)
            worst = max(worst, abs(a.u - b.u), abs(a.v - b.v))
    assert worst < 1e-12


def test_point_behind_camera():
    K = Intrinsics(320.0, 320.0, 160.0, 120.0, 320, 240)
    with pytest.raises(NonPositiveDepth):
        project_point(projection_matrix(K, Transform.identity()), [0, 0, -1])


def test_identical_cameras_give_zero_disparity():
    rng = np.random.default_rng(2)
    K, H = random_camera(rng)
    Pi = projection_matrix(K, H)
    p = H.inverse().apply([0.05, 0.02, 0.5])
    f = stereo_feature(p, Pi, Pi)
    assert f.u_l == f.u_r
    assert f.v_l == project_point(Pi, p).v


def test_disparity_sign_and_depth_monotonicity():
    K = Intrinsics(320.0, 320.0, 160.0, 120.0, 320, 240)
    # left camera at x = -b/2, right at +b/2, both looking down +z
    Pi_l = projection_matrix(K, Transform(np.eye(3), [0.034, 0, 0]))
    Pi_r = projection_matrix(K, Transform(np.eye(3), [-0.034, 0, 0]))
    last = np.inf
    for z in (0.2, 0.4, 0.8, 1.6, 3.2):
        f = stereo_feature([0.01, 0.0, z], Pi_l, Pi_r)
        assert f.u_r < f.u_l
        disparity = f.u_l - f.u_r
        np.testing.assert_allclose(disparity, 320 * 0.068 / z, rtol=1e-12)
        assert disparity < last
        last = disparity


def test_jacobian_matches_finite_differences():
    rng = np.random.default_rng(3)
    h = 1e-6
    worst = 0.0
    for _ in range(100):
        Pi_l, Pi_r, p = random_stereo(rng)
        J = image_jacobian(p, Pi_l, Pi_r)
        J_fd = np.zeros((3, 3))
        for k in range(3):
            dp = np.zeros(3)
            dp[k] = h
            J_fd[:, k] = (stereo_feature(p + dp, Pi_l, Pi_r).vector - stereo_feature(p - dp, Pi_l, Pi_r).vector) / (2 * h)
        worst = max(worst, np.abs(J - J_fd).max() / np.abs(J).max())
    assert worst < 1e-6


def test_jacobian_on_axis():
    K = Intrinsics(400.0, 300.0, 0.0, 0.0, 1, 1)
    Pi = projection_matrix(K, Transform.identity())
    J = image_jacobian([0, 0, 1], Pi, Pi)
    assert J[0, 0] == 400.0 and J[0, 2] == 0.0 and J[2, 1] == 300.0


def test_jacobian_halves_with_double_depth():
    K = Intrinsics(400.0, 300.0, 0.0, 0.0, 1, 1)
    Pi = projection_matrix(K, Transform.identity())
    p = np.array([0.1, -0.05, 0.5])
    J1 = image_jacobian(p, Pi, Pi)
    J2 = image_jacobian(2 * p, Pi, Pi)
    np.testing.assert_allclose(J2, J1 / 2, rtol=1e-12)


def test_triangulation_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        Pi_l, Pi_r, p = random_stereo(rng)
        f = stereo_feature(p, Pi_l, Pi_r)
        back = triangulate(f, Pi_l, Pi_r)
        np.testing.assert_allclose(stereo_feature(back, Pi_l, Pi_r).vector, f.vector, atol=1e-6)
        np.testing.assert_allclose(back, p, atol=1e-9)


def test_chain_mounted_camera():
    chain = DHChain((DHLink(0.0, -np.pi / 2, 0.1), DHLink(0.05, 0.0, 0.0)), Transform(np.eye(3), [0, 0, 0.4]))
    mount = Transform(rodrigues([0, 0.3, 0]), [0.0, 0.0, 0.03])
    cam = CameraModel("left", Intrinsics(320.0, 320.0, 160.0, 120.0, 320, 240), chain=chain,
                      q=np.array([0.1, 0.4]), mount=mount)
    expected = (forward_kinematics(chain, [0.1, 0.4]) @ mount).inverse()
    assert cam.extrinsic().allclose(expected, atol=1e-15)
    # the camera centre projects nowhere: it is at depth zero
    centre = (forward_kinematics(chain, [0.1, 0.4]) @ mount).translation
    with pytest.raises(NonPositiveDepth):
        project_point(cam.projection(), centre)
    with pytest.raises(ValueError):
        CameraModel("bad", cam.intrinsics)


def test_stereo_feature_vector_round_trip():
    f = StereoFeature.from_vector([125.0, 89.0, 135.0])
    assert (f.u_l, f.u_r, f.v_l) == (125.0, 89.0, 135.0)
    np.testing.assert_array_equal(f.vector, [125.0, 89.0, 135.0])
