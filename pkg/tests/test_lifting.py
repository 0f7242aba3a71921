import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevdistill import numerics as nx
from bevdistill.geometry import BevGridSpec
from bevdistill.lifting import (
    BevEncoder,
    BevNet,
    DepthBins,
    FrustumFeatures,
    LiftConfig,
    bev_pool,
    frustum_positions,
    lift,
    lift_pool,
)
from bevdistill.losses import DepthTarget, depth_loss
from bevdistill.numerics import Tensor, grad_check
from bevdistill.params import ParamStore
from bevdistill.scene import make_rig
from bevdistill.trainer import Optimizer, TrainConfig


def naive_lift(pv, depth):
    h, w, c = pv.shape
    d = depth.shape[2]
    out = np.zeros((d, h, w, c))
    for k in range(d):
        for v in range(h):
            for u in range(w):
                for ch in range(c):
                    out[k, v, u, ch] = depth[v, u, k] * pv[v, u, ch]
    return out


def naive_pool(frustums, grid):
    res = grid.resolution
    csx, csy = grid.cell_size
    out = np.zeros((res, res, frustums[0][0].shape[-1]))
    for vals, pos in frustums:
        for f, p in zip(vals.reshape(-1, vals.shape[-1]), pos.reshape(-1, 3)):
            ix = int(np.floor((p[0] - grid.x_range[0]) / csx))
            iy = int(np.floor((p[1] - grid.y_range[0]) / csy))
            if 0 <= ix < res and 0 <= iy < res:
                out[ix, iy] += f
    return out


def test_lift_one_hot_selects_bin():
    rng = np.random.default_rng(0)
    pv = rng.normal(size=(2, 3, 4))
    depth = np.zeros((2, 3, 5))
    depth[..., 2] = 1.0
    out = lift(Tensor(pv), Tensor(depth)).data
    np.testing.assert_array_equal(out[2], pv)
    assert np.all(out[[0, 1, 3, 4]] == 0)


def test_lift_uniform_arithmetic():
    out = lift(Tensor(np.full((1, 1, 1), 2.0)), Tensor(np.full((1, 1, 4), 0.25))).data
    np.testing.assert_array_equal(out.ravel(), [0.5] * 4)


def test_lift_matches_loop():
    rng = np.random.default_rng(1)
    pv, depth = rng.normal(size=(3, 4, 2)), rng.dirichlet(np.ones(3), size=(3, 4))
    np.testing.assert_array_equal(lift(Tensor(pv), Tensor(depth)).data, naive_lift(pv, depth))


def test_lift_shape_mismatch():
    with pytest.raises(ValueError):
        lift(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((3, 2, 4))))


@given(st.floats(-10, 10), st.integers(0, 2**31))
def test_lift_linearity(alpha, seed):
    rng = np.random.default_rng(seed)
    pv, depth = rng.normal(size=(2, 2, 3)), rng.dirichlet(np.ones(4), size=(2, 2))
    a = lift(Tensor(alpha * pv), Tensor(depth)).data
    b = alpha * lift(Tensor(pv), Tensor(depth)).data
    np.testing.assert_allclose(a, b, atol=1e-12)


GRID = BevGridSpec((-4.0, 4.0), (-4.0, 4.0), 4)


def test_pool_single_sample_at_cell_center():
    centers = GRID.cell_centers()
    f = FrustumFeatures(Tensor([[[[1.0, 2.0]]]]), np.array([[[[*centers[1, 2], 0.0]]]]))
    out = bev_pool([f], GRID).data
    np.testing.assert_array_equal(out[1, 2], [1.0, 2.0])
    out[1, 2] = 0
    assert np.all(out == 0)


def test_pool_two_cameras_sum():
    c = GRID.cell_centers()[0, 3]
    p = np.array([[[[*c, 0.0]]]])
    out = bev_pool([FrustumFeatures(Tensor([[[[1.0]]]]), p), FrustumFeatures(Tensor([[[[2.5]]]]), p)], GRID).data
    assert out[0, 3, 0] == 3.5


def random_config(rng):
    d = int(rng.integers(1, 9))
    h, w, c = (int(x) for x in rng.integers(1, 5, size=3))
    res = int(rng.integers(2, 17))
    grid = BevGridSpec((-8.0, 8.0), (-8.0, 8.0), res)
    pv = rng.normal(size=(h, w, c))
    depth = rng.dirichlet(np.ones(d), size=(h, w))
    pos = rng.uniform(-10, 10, size=(d, h, w, 3))
    return grid, pv, depth, pos


@pytest.mark.parametrize("seed", range(10))
def test_pool_matches_loop_and_conserves_mass(seed):
    rng = np.random.default_rng(seed)
    grid, pv, depth, pos = random_config(rng)
    vals = lift(Tensor(pv), Tensor(depth))
    out = bev_pool([FrustumFeatures(vals, pos)], grid).data
    ref = naive_pool([(vals.data, pos)], grid)
    assert np.max(np.abs(out - ref)) < 1e-9
    inside = grid.cell_index(pos.reshape(-1, 3)[:, :2]) >= 0
    assert np.max(np.abs(out.sum(axis=(0, 1)) - vals.data.reshape(-1, pv.shape[-1])[inside].sum(axis=0))) < 1e-9


@given(st.integers(0, 2**31))
def test_fused_lift_pool_matches_reference_route(seed):
    rng = np.random.default_rng(seed)
    grid, pv, depth, pos = random_config(rng)
    ref = bev_pool([FrustumFeatures(lift(Tensor(pv), Tensor(depth)), pos)], grid).data
    fused = lift_pool(Tensor(pv), Tensor(depth), pos, grid).data.reshape(ref.shape)
    assert np.max(np.abs(fused - ref)) < 1e-9


def test_lift_pool_gradients():
    rng = np.random.default_rng(3)
    grid, pv, depth, pos = random_config(rng)
    w = rng.normal(size=(grid.n_cells, pv.shape[-1]))
    rep = grad_check(lambda a, b: nx.tsum(lift_pool(a, b, pos, grid) * w), [Tensor(pv), Tensor(depth)], tol=1e-6)
    assert rep.passed, rep


def test_frustum_positions_are_unprojected_bin_centres():
    cam = make_rig(6)[2].scaled(1 / 8)
    bins = DepthBins(1.0, 60.0, 32)
    pos = frustum_positions(cam, bins)
    assert pos.shape == (32, cam.height, cam.width, 3)
    pc = cam.ego_to_camera(pos.reshape(-1, 3)).reshape(pos.shape)
    np.testing.assert_allclose(pc[..., 2], np.broadcast_to(bins.centers[:, None, None], pc.shape[:3]), atol=1e-9)
    np.testing.assert_allclose(pc[5, 1, 3, 0] / pc[5, 1, 3, 2] * cam.fx + cam.cx, 3.0, atol=1e-9)


def test_depth_bins():
    b = DepthBins(1.0, 60.0, 32)
    assert b.index(np.array([0.5, 1.0, 59.99, 60.0])).tolist() == [-1, 0, 31, -1]


def encoder(channels=3, seed=0):
    ps = ParamStore(seed)
    return ps, BevEncoder(ps, channels)


def test_encoder_zero_weights_identity():
    ps, enc = encoder()
    for name in ps:
        ps[name].data = np.zeros_like(ps[name].data)
    x = np.random.default_rng(0).normal(size=(5, 5, 3))
    assert enc(Tensor(x)).data.tobytes() == x.tobytes()


def test_encoder_gradients():
    ps, enc = encoder(channels=2)
    for name in ps:
        if name.endswith(("b1", "b2")):
            ps[name].data = np.random.default_rng(1).normal(size=ps[name].shape) * 0.1
    x = Tensor(np.random.default_rng(2).normal(size=(4, 4, 2)))
    w = np.random.default_rng(3).normal(size=(4, 4, 2))
    rep = grad_check(lambda xx, *ws: nx.tsum(enc(xx) * w), [x, *ps.tensors()], tol=1e-4)
    assert rep.passed, rep


def test_encoder_translation_equivariance():
    _, enc = encoder(channels=3)
    rng = np.random.default_rng(4)
    x = np.zeros((18, 18, 3))
    x[5:11, 5:11] = rng.normal(size=(6, 6, 3))
    shifted = np.roll(x, 1, axis=0)
    a = enc(Tensor(x)).data
    b = enc(Tensor(shifted)).data
    # four 3×3 convs reach 4 cells; the content stays more than 4 cells from the border,
    # so zero padding never differs from the infinite-plane result
    assert np.max(np.abs(np.roll(a, 1, axis=0)[1:-1] - b[1:-1])) < 1e-9


def test_depth_head_zero_weights_uniform():
    ps = ParamStore(0)
    net = BevNet(ps, LiftConfig(channels=4, depth_bins=6, depth_hidden=5), BevGridSpec(resolution=4))
    for n in ("depth.w1", "depth.b1", "depth.w2", "depth.b2"):
        ps[n].data = np.zeros_like(ps[n].data)
    _, probs = net.depth_head(Tensor(np.random.default_rng(0).normal(size=(2, 3, 4))))
    np.testing.assert_allclose(probs.data, 1 / 6, atol=1e-15)


def small_net(seed=0):
    ps = ParamStore(seed)
    cfg = LiftConfig(channels=3, image_channels=2, depth_bins=4, depth_hidden=3, distill_channels=2)
    return ps, BevNet(ps, cfg, BevGridSpec((-12.0, 12.0), (-12.0, 12.0), 4))


def test_depth_loss_gradient_through_head():
    ps, net = small_net()
    pv = Tensor(np.random.default_rng(1).normal(size=(2, 3, 3)))
    target = DepthTarget(np.array([0, 4, 5]), np.array([1, 3, 0]), np.array([20.0, 50.0, 3.0]))
    names = ["depth.w1", "depth.b1", "depth.w2", "depth.b2", "depth_aux.w"]

    def f(x, *params):
        _, probs = net.depth_head(x)
        return depth_loss([probs], [net.aux_depth(x)], [target])[0]

    rep = grad_check(f, [pv, *[ps[n] for n in names]], tol=1e-4)
    assert rep.passed, rep


def test_depth_head_overfits_one_pixel():
    ps, net = small_net(seed=3)
    pv = Tensor(np.random.default_rng(5).normal(size=(1, 1, 3)))
    target = DepthTarget(np.array([0]), np.array([2]), np.array([30.0]))
    opt = Optimizer(ps, TrainConfig(optimizer="adam", lr=1e-2, warmup=0))
    for step in range(500):
        ps.zero_grad()
        _, probs = net.depth_head(pv)
        if probs.data[0, 2] > 0.99:
            break
        depth_loss([probs], [net.aux_depth(pv)], [target])[0].backward()
        opt.step(1e-2)
    assert probs.data[0, 2] > 0.99


def test_bevnet_end_to_end_gradients():
    ps, net = small_net(seed=2)
    cams = make_rig(2, width=64, height=32)
    rng = np.random.default_rng(0)
    feats = []
    for cam in cams:
        feats.append({s: rng.normal(size=(int(np.ceil(cam.height * s)), int(np.ceil(cam.width * s)), 2)) for s in net.cfg.scales})
    w = rng.normal(size=(4, 4, 2))
    names = ["pv_proj.s8.w", "depth.w1", "depth.w2", "bev_enc.0.w1", "distill_head.w"]

    def f(*params):
        return nx.tsum(net(cams, feats).distill_pred * w)

    rep = grad_check(f, [ps[n] for n in names], tol=1e-4, max_per_input=12)
    assert rep.passed, rep


def test_lift_config_validation():
    with pytest.raises(ValueError):
        LiftConfig(depth_bins=1).validate()
    with pytest.raises(ValueError):
        LiftConfig(lift_scale=0.3).validate()
