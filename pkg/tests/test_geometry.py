import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevdistill.geometry import (
    BevGridSpec,
    CameraModel,
    Pose,
    box_corners,
    compose,
    invert,
    points_in_box,
    project,
    project_points,
    ray_box_depth,
    unproject,
    unproject_points,
    wrap_angle,
)
from bevdistill.scene import make_rig


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )
    return Pose(r, rng.normal(size=3) * 5)


def simple_camera(extr=None) -> CameraModel:
    return CameraModel(100.0, 100.0, 50.0, 50.0, extr or Pose.identity(), 101, 101)


def test_project_principal_ray():
    assert project([0.0, 0.0, 5.0], simple_camera()) == (50.0, 50.0, 5.0)


def test_project_behind_camera_is_out_of_view():
    assert project([0.0, 0.0, -5.0], simple_camera()) is None
    assert project([0.0, 0.0, 1e-7], simple_camera()) is None


def test_project_outside_image_is_out_of_view():
    assert project([10.0, 0.0, 1.0], simple_camera()) is None


def test_unproject_examples():
    cam = simple_camera()
    np.testing.assert_allclose(unproject(50.0, 50.0, 7.0, cam), [0, 0, 7.0])
    p = unproject(150.0, 50.0, 1.0, cam)
    assert abs(p[0] / p[2] - 1.0) < 1e-12


def test_unproject_rejects_nonpositive_depth():
    with pytest.raises(ValueError):
        unproject(1.0, 1.0, 0.0, simple_camera())


@given(st.integers(0, 2**31))
def test_round_trip_random_extrinsics(seed):
    rng = np.random.default_rng(seed)
    cam = simple_camera(random_pose(rng))
    uv = rng.uniform(0, 100, size=(20, 2))
    d = rng.uniform(0.5, 60, size=20)
    p = unproject_points(uv, d, cam)
    uv2, d2, ok = project_points(p, cam)
    assert ok.all()
    back = unproject_points(uv2, d2, cam)
    assert np.max(np.linalg.norm(back - p, axis=1)) < 1e-9


def test_round_trip_on_default_rig():
    rng = np.random.default_rng(3)
    for cam in make_rig(6):
        uv = np.column_stack([rng.uniform(0, cam.width - 1, 30), rng.uniform(0, cam.height - 1, 30)])
        p = unproject_points(uv, rng.uniform(1, 50, 30), cam)
        q = unproject_points(*project_points(p, cam)[:2], cam)
        assert np.max(np.linalg.norm(q - p, axis=1)) < 1e-9


def test_rig_cameras_cover_all_directions():
    rig = make_rig(6)
    for ang in np.linspace(-np.pi, np.pi, 37):
        p = np.array([10 * np.cos(ang), 10 * np.sin(ang), 0.0])
        assert any(project(p, c) is not None for c in rig)


def test_compose_examples():
    rng = np.random.default_rng(0)
    p = random_pose(rng)
    assert compose(Pose.identity(), p).allclose(p)
    assert compose(p, invert(p)).allclose(Pose.identity())


@given(st.integers(0, 2**31))
def test_pose_chain_and_associativity(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (random_pose(rng) for _ in range(3))
    pts = rng.normal(size=(10, 3))
    np.testing.assert_allclose(compose(compose(a, b), c).apply(pts), a.apply(b.apply(c.apply(pts))), atol=1e-9)
    assert compose(compose(a, b), c).allclose(compose(a, compose(b, c)))
    np.testing.assert_allclose(invert(a).apply(a.apply(pts)), pts, atol=1e-9)


def test_pose_rejects_non_rotation():
    with pytest.raises(ValueError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_camera_validation():
    with pytest.raises(ValueError):
        CameraModel(0.0, 1.0, 0, 0, Pose.identity(), 10, 10)
    with pytest.raises(ValueError):
        CameraModel(1.0, 1.0, 0, 0, Pose.identity(), 0, 10)


def test_scaled_camera_preserves_pixel_centres():
    cam = simple_camera(random_pose(np.random.default_rng(2)))
    p = unproject(37.0, 12.0, 9.0, cam)
    u, v, _ = project(p, cam.scaled(0.25))
    assert abs(u - ((37 + 0.5) * 0.25 - 0.5)) < 1e-9 and abs(v - ((12 + 0.5) * 0.25 - 0.5)) < 1e-9


def test_ego_transform_matches_mapping_points():
    rng = np.random.default_rng(5)
    cam = make_rig(6)[0]
    a = Pose.from_yaw(0.3).rotation * 1.1
    pts = np.column_stack([rng.uniform(5, 20, 10), rng.uniform(-2, 2, 10), rng.uniform(0, 1, 10)])
    uv, d, _ = project_points(pts, cam)
    uv2, d2, _ = project_points(pts @ a.T, cam.with_ego_transform(a))
    np.testing.assert_allclose(uv, uv2, atol=1e-9)


def test_grid_spec():
    g = BevGridSpec()
    assert g.cell_size == (1.5, 1.5)
    assert g.cell_index(np.array([[-24.0, -24.0], [23.99, 23.99], [24.0, 0.0], [0.1, -0.1]])).tolist() == [
        0,
        32 * 32 - 1,
        -1,
        16 * 32 + 15,
    ]
    centers = g.cell_centers()
    np.testing.assert_allclose(g.continuous_coords(centers[3, 7]), [7, 3])
    with pytest.raises(ValueError):
        BevGridSpec(resolution=1)


def test_wrap_angle_range():
    a = wrap_angle(np.array([-np.pi, np.pi, 3 * np.pi, -3.5 * np.pi, 0.2]))
    np.testing.assert_allclose(a, [np.pi, np.pi, np.pi, 0.5 * np.pi, 0.2], atol=1e-12)


def test_box_corners_inside_box():
    c = box_corners([1.0, 2.0, 0.5], (2.0, 4.0, 1.0), 0.7)
    assert points_in_box(c, [1.0, 2.0, 0.5], (2.0, 4.0, 1.0), 0.7, inflate=1e-9).all()
    assert not points_in_box(c * 1.01 + 0.1, [1.0, 2.0, 0.5], (2.0, 4.0, 1.0), 0.7).all()


def test_ray_box_depth():
    d = ray_box_depth(np.zeros(3), np.array([[1.0, 0, 0], [0, 1.0, 0], [-1.0, 0, 0]]), [10.0, 0, 0], (2.0, 4.0, 2.0), 0.0)
    assert d[0] == pytest.approx(8.0) and np.isinf(d[1]) and np.isinf(d[2])
