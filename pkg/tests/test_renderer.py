import numpy as np
import pytest

from servotrack.camera import Intrinsics, project_point, projection_matrix
from servotrack.kinematics import Pose, Transform, transform_from_pose
from servotrack.mesh import TriangleMesh, box_mesh
from servotrack.renderer import Scene, ScenePart, rasterize_triangle, render, render_objects

from oracles import covered_pixels

K = Intrinsics(320.0, 320.0, 160.0, 120.0, 320, 240)
CAM = (K, Transform.identity())


def raster(xy, depth=1.0, shade=0.5, size=(4, 4), image=None, inv_depth=None):
    H, W = size
    image = np.zeros((H, W)) if image is None else image
    inv_depth = np.zeros((H, W)) if inv_depth is None else inv_depth
    rasterize_triangle(image, inv_depth, np.asarray(xy, dtype=float), np.full(3, depth), shade)
    return image, inv_depth


def lit(image):
    return {(j, i) for i, j in zip(*np.nonzero(image))}


def triangle_scene(size=0.05):
    V = np.array([[-size, -size, 0.0], [size, -size, 0.0], [0.0, size, 0.0]])
    mesh = TriangleMesh(V, np.array([[0, 1, 2]]), np.tile([0.0, 0.0, -1.0], (3, 1)))
    return Scene((ScenePart("tri", mesh),)), V


def box_scene():
    return Scene((ScenePart("box", box_mesh((0.06, 0.04, 0.02))),))


def test_top_left_rule_on_small_raster():
    image, _ = raster([(0, 0), (3, 0), (0, 3)])
    assert lit(image) == {(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2)}
    # winding does not matter
    image, _ = raster([(0, 0), (0, 3), (3, 0)])
    assert lit(image) == {(0, 0), (1, 0), (2, 0), (0, 1), (1, 1), (0, 2)}


def test_coverage_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for k in range(300):
        if k % 3 == 0:
            xy = rng.integers(-2, 18, (3, 2)).astype(float)  # many exact edge hits
        else:
            xy = rng.uniform(-3, 19, (3, 2))
        image, _ = raster(xy, size=(16, 16))
        assert lit(image) == covered_pixels(xy, 16, 16), xy


def test_shared_edge_covered_exactly_once():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b, c, d = rng.integers(0, 16, (4, 2)).astype(float)
        first = covered_pixels([a, b, c], 16, 16)
        second = covered_pixels([a, c, d], 16, 16)
        img1, _ = raster([a, b, c], size=(16, 16))
        img2, _ = raster([a, c, d], size=(16, 16))
        assert lit(img1) == first and lit(img2) == second
        # convex quad split along a-c: no pixel claimed by both halves
        ca, ba, da = c - a, b - a, d - a
        cross_b = ca[0] * ba[1] - ca[1] * ba[0]
        cross_d = ca[0] * da[1] - ca[1] * da[0]
        if cross_b * cross_d < 0:
            assert not (lit(img1) & lit(img2))


def test_degenerate_triangle_writes_nothing():
    image, inv_depth = raster([(0, 0), (1, 1), (3, 3)])
    assert not image.any() and not inv_depth.any()


def test_nearer_triangle_wins():
    image, inv_depth = raster([(0, 0), (4, 0), (0, 4)], depth=2.0, shade=0.3)
    raster([(0, 0), (4, 0), (0, 4)], depth=1.0, shade=0.8, image=image, inv_depth=inv_depth)
    raster([(0, 0), (4, 0), (0, 4)], depth=3.0, shade=0.1, image=image, inv_depth=inv_depth)
    assert image[0, 0] == 0.8


def test_empty_scene_is_black():
    assert not render(Scene(), Pose([0, 0, 0.5], [0, 0, 0]), CAM).any()


def test_triangle_corners_on_silhouette():
    # vertices chosen so they project exactly onto pixel centres (640 px per metre at z = 0.5)
    V = np.array([[-1 / 32, -1 / 32, 0.0], [1 / 32, -1 / 32, 0.0], [-1 / 32, 1 / 32, 0.0]])
    mesh = TriangleMesh(V, np.array([[0, 1, 2]]), np.tile([0.0, 0.0, -1.0], (3, 1)))
    image = render(Scene((ScenePart("tri", mesh),)), Pose([0, 0, 0.5], [0, 0, 0]), CAM)
    Pi = projection_matrix(K, Transform.identity())
    fg = np.argwhere(image > 0)[:, ::-1].astype(float)  # (u, v) pixel centres
    for v in V:
        u = project_point(Pi, v + [0, 0, 0.5])
        assert (u.u, u.v) == (round(u.u), round(u.v))
        # distance from the vertex to the union of covered pixel squares
        gap = np.maximum(np.abs(fg - [u.u, u.v]) - 0.5, 0.0)
        assert np.min(np.hypot(gap[:, 0], gap[:, 1])) <= 0.5
    assert lit(image) == covered_pixels(
        [[project_point(Pi, v + [0, 0, 0.5]).u, project_point(Pi, v + [0, 0, 0.5]).v] for v in V], 240, 320)
    # the right angle corner is owned by the triangle (top and left edges)
    assert image[100, 140] > 0


def centroid(image):
    ij = np.argwhere(image > 0)
    return ij[:, 1].mean(), ij[:, 0].mean()


def test_translation_shifts_centroid():
    scene = box_scene()
    z = 0.4
    a = render(scene, Pose([0.0, 0.0, z], [0.1, 0.2, 0.0]), CAM)
    for dx in (0.005, 0.02):
        b = render(scene, Pose([dx, 0.0, z], [0.1, 0.2, 0.0]), CAM)
        du = centroid(b)[0] - centroid(a)[0]
        assert abs(du - K.fx * dx / z) <= 0.5


def test_foreground_count_invariant_under_in_plane_shift():
    scene, _ = triangle_scene(0.04)
    counts = [np.count_nonzero(render(scene, Pose([dx, dy, 0.4], [0, 0, rz]), CAM))
              for dx, dy, rz in [(0, 0, 0), (0.03, 0, 0.3), (-0.02, 0.015, -0.5), (0.01, -0.03, 1.0)]]
    assert max(counts) - min(counts) <= 0.02 * counts[0]


def test_vertices_covered_or_adjacent():
    scene = box_scene()
    pose = Pose([0.01, 0.0, 0.35], [0.4, -0.3, 0.2])
    image = render(scene, pose, CAM)
    Pi = projection_matrix(K, Transform.identity())
    padded = np.pad(image > 0, 1)
    for v in transform_from_pose(pose).apply(scene.packed.vertices):
        u = project_point(Pi, v)
        j, i = int(round(u.u)), int(round(u.v))
        if 0 <= i < K.height and 0 <= j < K.width:
            assert padded[i:i + 3, j:j + 3].any()


def test_render_is_deterministic_and_bounded():
    scene = box_scene()
    pose = Pose([0.0, 0.01, 0.3], [1.0, 0.5, -0.2])
    a = render(scene, pose, CAM)
    b = render(scene, pose, CAM)
    assert a.tobytes() == b.tobytes()
    assert a.min() >= 0.0 and a.max() <= 1.0
    bright = Scene((ScenePart("box", box_mesh((0.06, 0.04, 0.02)), albedo=5.0),))
    assert render(bright, pose, CAM).max() <= 1.0


def test_lambertian_shade_values():
    scene, _ = triangle_scene()
    image = render(scene, Pose([0, 0, 0.4], [0, 0, 0]), CAM)
    light = scene.light_dir
    expected = scene.ambient + (1 - scene.ambient) * max(0.0, -light[2])
    np.testing.assert_allclose(image[image > 0], expected, rtol=1e-12)
    # turned away from the light: ambient only
    back = render(scene, Pose([0, 0, 0.4], [0, np.pi, 0]), CAM)
    np.testing.assert_allclose(back[back > 0], scene.ambient, rtol=1e-12)


def test_behind_camera_is_dropped():
    scene = box_scene()
    assert not render(scene, Pose([0, 0, -0.4], [0, 0, 0]), CAM).any()
    # straddling the near plane: those triangles are dropped, no crash
    render(scene, Pose([0, 0, 0.005], [0, 0, 0]), CAM)


def test_objects_share_a_z_buffer():
    near = box_scene().packed
    far = Scene((ScenePart("far", box_mesh((0.2, 0.2, 0.01)), albedo=0.3),)).packed
    image = render_objects([(near, Transform(np.eye(3), [0, 0, 0.3])), (far, Transform(np.eye(3), [0, 0, 0.5]))], CAM)
    alone = render(box_scene(), Pose([0, 0, 0.3], [0, 0, 0]), CAM)
    assert image[120, 160] == alone[120, 160]
    with pytest.raises(ValueError):
        render_objects([], CAM, background=np.zeros((2, 2)))
