import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevdistill.featprov import FeatureMap, ProceduralFeatureProvider
from bevdistill.geometry import BevGridSpec, Pose, box_pose, project
from bevdistill.pseudolabel import (
    FeaturePointCloud,
    PseudoLabelConfig,
    accumulate_object,
    accumulate_static,
    build_pseudo_labels,
    paint_points,
    paint_scene,
    rasterize_bev,
    read_pseudo_labels,
    write_pseudo_labels,
)
from bevdistill.scene import STATIC, Frame, GtBox, generate_scene, raycast


@pytest.fixture(scope="module")
def scene():
    return generate_scene(2, n_frames=3, n_objects=3)


@pytest.fixture(scope="module")
def provider():
    return ProceduralFeatureProvider(2)


def maps_for(frame, provider, scale=0.25):
    return [provider.compute_features(frame, i, scale) for i in range(len(frame.cameras))]


def cloud(points, feats, frame_index=0, tids=None):
    n = len(points)
    tids = np.full(n, STATIC) if tids is None else np.asarray(tids)
    return FeaturePointCloud(np.asarray(points, float), np.asarray(feats, float), np.full(n, frame_index), tids)


def naive_bilinear_clamped(grid, u, v):
    h, w, _ = grid.shape
    u, v = min(max(u, 0.0), w - 1.0), min(max(v, 0.0), h - 1.0)
    x0, y0 = min(int(np.floor(u)), w - 2), min(int(np.floor(v)), h - 2)
    fx, fy = u - x0, v - y0
    return (
        (1 - fx) * (1 - fy) * grid[y0, x0]
        + fx * (1 - fy) * grid[y0, x0 + 1]
        + (1 - fx) * fy * grid[y0 + 1, x0]
        + fx * fy * grid[y0 + 1, x0 + 1]
    )


def test_single_view_point_takes_that_sample():
    s = generate_scene(0, n_frames=1, n_objects=0, n_cameras=1)
    f = s.frames[0]
    fm = ProceduralFeatureProvider(0).compute_features(f, 0, 0.25)
    p = np.array([[10.0, 1.0, 0.0]])
    u, v, _ = project(p[0], f.cameras[0])
    out = paint_points(p, f, [fm], renormalize=False)
    expected = naive_bilinear_clamped(fm.grid, (u + 0.5) * 0.25 - 0.5, (v + 0.5) * 0.25 - 0.5)
    np.testing.assert_allclose(out.features[0], expected, atol=1e-12)


def test_identical_maps_give_identical_feature(scene):
    f = scene.frames[0]
    const = np.zeros((16, 44, 16))
    const[..., 3] = 1.0
    maps = [FeatureMap(i, 0.25, const) for i in range(6)]
    out = paint_points(f.lidar_points, f, maps)
    assert len(out) > 0
    np.testing.assert_allclose(out.features, np.tile(np.eye(16)[3], (len(out), 1)), atol=1e-12)


def test_painting_matches_brute_force(scene, provider):
    f = scene.frames[1]
    maps = maps_for(f, provider)
    pts = f.lidar_points[::7]
    out = paint_points(pts, f, maps, renormalize=False)
    expected, kept = [], []
    for k, p in enumerate(pts):
        acc = []
        for i, cam in enumerate(f.cameras):
            pr = project(p, cam)
            if pr is None:
                continue
            u, v, d = pr
            hit = raycast(f, cam, np.array([[u, v]]))[0][0]
            if d - hit > 0.1:
                continue
            acc.append(naive_bilinear_clamped(maps[i].grid, (u + 0.5) * 0.25 - 0.5, (v + 0.5) * 0.25 - 0.5))
        if acc:
            kept.append(k)
            expected.append(np.mean(acc, axis=0))
    np.testing.assert_array_equal(out.positions, pts[kept])
    np.testing.assert_allclose(out.features, np.array(expected), atol=1e-12)


def test_occluded_points_are_dropped(scene):
    f = scene.frames[0]
    b = f.gt_boxes[0]
    direction = b.center / np.linalg.norm(b.center)
    behind = (b.center + direction * (b.size[1] + 3.0))[None]
    behind[0, 2] = b.center[2]
    maps = [FeatureMap(i, 0.25, np.ones((16, 44, 16))) for i in range(6)]
    hidden = all(
        project(behind[0], c) is None or raycast(f, c, np.array(project(behind[0], c)[:2])[None])[0][0] < project(behind[0], c)[2] - 0.1
        for c in f.cameras
    )
    assert len(paint_points(behind, f, maps)) == (0 if hidden else 1)


def test_paint_needs_cameras(scene):
    with pytest.raises(ValueError):
        paint_points(np.zeros((1, 3)), scene.frames[0], [])


def _bare_frame(k, pose, boxes=()):
    return Frame(k, 0.5 * k, pose, [], np.zeros((0, 3)), np.zeros(0, np.int64), list(boxes))


def test_accumulate_static_single_frame_identity():
    f = _bare_frame(0, Pose.identity())
    c = cloud([[1.0, 2.0, 0.0], [3.0, -1.0, 0.5]], np.eye(2))
    out = accumulate_static([c], [f])
    np.testing.assert_array_equal(out.positions, c.positions)
    assert out.coords == "global"


def test_accumulate_static_compensates_ego_motion():
    g = np.array([5.0, 2.0, 0.0])
    f0 = _bare_frame(0, Pose.identity())
    f1 = _bare_frame(1, Pose.from_yaw(0.0, (1.0, 0.0, 0.0)))
    c0 = cloud([f0.ego_pose.inverse().apply(g)], [[1.0]], 0)
    c1 = cloud([f1.ego_pose.inverse().apply(g)], [[1.0]], 1)
    out = accumulate_static([c0, c1], [f0, f1])
    assert np.max(np.abs(out.positions[0] - out.positions[1])) < 1e-9


def test_accumulate_static_excludes_box_points():
    box = GtBox([5.0, 0.0, 0.8], (2.0, 4.0, 1.6), 0.3, [0, 0, 0], 0, 7, 0)
    f = _bare_frame(0, Pose.identity(), [box])
    out = accumulate_static([cloud([[5.0, 0.0, 0.5], [5.0, 3.0, 0.5]], [[1.0], [2.0]])], [f])
    np.testing.assert_array_equal(out.positions, [[5.0, 3.0, 0.5]])


@pytest.mark.parametrize("motion", ["cv", "turn"])
def test_accumulate_object_rigid_motion(motion):
    for seed in range(20):
        s = generate_scene(seed, n_frames=3, n_objects=3)
        infos = [t for t in s.tracks if t.motion == motion]
        if infos:
            break
    tid = infos[0].track_id
    local = np.array([[0.3, -0.2, 0.1]])
    clouds = []
    for f in s.frames:
        b = f.box(tid)
        clouds.append(cloud(box_pose(b.center, b.yaw).apply(local), [[1.0]], f.index, [tid]))
    out = accumulate_object(clouds, s.frames, tid)
    assert out.coords == "object" and len(out) == 3
    assert np.max(np.abs(out.positions - local)) < 1e-9


def test_accumulate_object_unknown_track(scene):
    with pytest.raises(KeyError):
        accumulate_object([cloud([[0.0, 0.0, 0.0]], [[1.0]])], scene.frames[:1], 99)


GRID = BevGridSpec((-4.0, 4.0), (-4.0, 4.0), 4)


def test_rasterize_one_point_per_cell():
    ref = _bare_frame(0, Pose.identity())
    centers = GRID.cell_centers().reshape(-1, 2)
    feats = np.random.default_rng(0).normal(size=(16, 3))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    pts = np.column_stack([centers, np.zeros(16)])
    lab = rasterize_bev(cloud(pts, feats), {}, ref, GRID)
    assert lab.valid_mask.all()
    np.testing.assert_allclose(lab.grid.reshape(-1, 3), feats, atol=1e-12)


def test_rasterize_two_points_average():
    ref = _bare_frame(0, Pose.identity())
    a, b = np.array([1.0, 0, 0]), np.array([0.0, 1.0, 0])
    lab = rasterize_bev(cloud([[0.5, 0.5, 0.0], [0.7, 0.6, 1.0]], [a, b]), {}, ref, GRID)
    np.testing.assert_allclose(lab.grid[2, 2], (a + b) / np.linalg.norm(a + b), atol=1e-15)
    assert lab.coverage == 1
    assert np.all(lab.grid[~lab.valid_mask] == 0)


def test_rasterize_height_slab():
    ref = _bare_frame(0, Pose.identity())
    lab = rasterize_bev(cloud([[0.5, 0.5, 3.5], [0.5, 0.5, -1.5]], np.eye(2)), {}, ref, GRID)
    assert lab.coverage == 0


def naive_binning(static, objects, ref, grid, z_range=(-1.0, 3.0)):
    pts = [ref.ego_pose.inverse().apply(static.positions)]
    feats = [static.features]
    for tid in sorted(objects):
        b = ref.box(tid)
        if b is not None and len(objects[tid]):
            pts.append(box_pose(b.center, b.yaw).apply(objects[tid].positions))
            feats.append(objects[tid].features)
    p, f = np.concatenate(pts), np.concatenate(feats)
    res = grid.resolution
    out = np.zeros((res, res, f.shape[1]))
    mask = np.zeros((res, res), bool)
    csx, csy = grid.cell_size
    for ix in range(res):
        for iy in range(res):
            x0, y0 = grid.x_range[0] + ix * csx, grid.y_range[0] + iy * csy
            sel = (
                (p[:, 0] >= x0) & (p[:, 0] < x0 + csx) & (p[:, 1] >= y0) & (p[:, 1] < y0 + csy)
                & (p[:, 2] >= z_range[0]) & (p[:, 2] <= z_range[1])
            )
            if sel.any():
                m = f[sel].mean(axis=0)
                out[ix, iy] = m / np.linalg.norm(m)
                mask[ix, iy] = True
    return out, mask


def test_rasterize_matches_naive_binning(scene, provider):
    clouds = paint_scene(scene, provider)
    static = accumulate_static(clouds, scene.frames)
    ref = scene.frames[1]
    objects = {b.track_id: accumulate_object(clouds, scene.frames, b.track_id) for b in ref.gt_boxes}
    lab = rasterize_bev(static, objects, ref, scene.grid)
    grid, mask = naive_binning(static, objects, ref, scene.grid)
    np.testing.assert_array_equal(lab.valid_mask, mask)
    assert np.max(np.abs(lab.grid - grid)) < 1e-9


def test_grid_invariants(scene, provider):
    for lab in build_pseudo_labels(scene, provider):
        assert np.all(lab.grid[~lab.valid_mask] == 0)
        norms = np.linalg.norm(lab.grid[lab.valid_mask], axis=-1)
        assert np.max(np.abs(norms - 1)) < 1e-6


def test_accumulation_and_dynamics_increase_coverage(scene, provider):
    clouds = paint_scene(scene, provider)
    full = build_pseudo_labels(scene, provider, PseudoLabelConfig(), clouds)
    single = build_pseudo_labels(scene, provider, PseudoLabelConfig(accumulate=False, dynamic=False), clouds)
    for a, b in zip(full, single):
        assert b.coverage < a.coverage
        assert np.all(a.valid_mask | ~b.valid_mask)


def test_causal_first_frame_equals_single_frame(scene, provider):
    clouds = paint_scene(scene, provider)
    causal = build_pseudo_labels(scene, provider, PseudoLabelConfig(causal=True), clouds)
    single = build_pseudo_labels(scene, provider, PseudoLabelConfig(accumulate=False), clouds)
    np.testing.assert_array_equal(causal[0].valid_mask, single[0].valid_mask)
    assert causal[-1].coverage >= causal[0].coverage


@given(st.floats(-np.pi, np.pi), st.floats(-50, 50), st.floats(-50, 50))
def test_static_rasterization_is_ego_motion_invariant(yaw, tx, ty):
    rng = np.random.default_rng(0)
    shift = Pose.from_yaw(yaw, (tx, ty, 0.0))
    frames = [_bare_frame(k, Pose.from_yaw(0.1 * k, (2.0 * k, 0.3 * k, 0.0))) for k in range(3)]
    moved = [_bare_frame(f.index, shift.compose(f.ego_pose)) for f in frames]
    clouds = []
    for k in range(3):
        pts = np.column_stack([rng.uniform(-20, 20, (200, 2)), rng.uniform(-0.5, 2.5, 200)])
        feats = rng.normal(size=(200, 4))
        clouds.append(cloud(pts, feats / np.linalg.norm(feats, axis=1, keepdims=True), k))
    grid = BevGridSpec((-24.0, 24.0), (-24.0, 24.0), 16)
    a = rasterize_bev(accumulate_static(clouds, frames), {}, frames[1], grid)
    b = rasterize_bev(accumulate_static(clouds, moved), {}, moved[1], grid)
    np.testing.assert_array_equal(a.valid_mask, b.valid_mask)
    assert np.max(np.abs(a.grid - b.grid)) < 1e-9


def test_pseudo_label_files_round_trip(tmp_path, scene, provider):
    labels = build_pseudo_labels(scene, provider)
    write_pseudo_labels(tmp_path, labels, PseudoLabelConfig())
    back = read_pseudo_labels(tmp_path)
    for a, b in zip(labels, back):
        np.testing.assert_array_equal(a.valid_mask, b.valid_mask)
        np.testing.assert_allclose(a.grid, b.grid, atol=1e-6)
