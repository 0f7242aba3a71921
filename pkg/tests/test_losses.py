import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from bevdistill import numerics as nx
from bevdistill.decoder import LayerOutput, box_to_anchor
from bevdistill.geometry import project
from bevdistill.lifting import DepthBins
from bevdistill.losses import (
    DepthTarget,
    DetLossConfig,
    LossWeights,
    assign,
    det_loss,
    det_targets,
    depth_loss,
    depth_targets,
    distill_loss,
    hungarian,
    sigmoid_focal_loss,
    total_loss,
)
from bevdistill.numerics import Tensor, grad_check
from bevdistill.scene import generate_scene


def brute_force_assignment(cost):
    r, c = cost.shape
    best = np.inf
    if r <= c:
        for perm in itertools.permutations(range(c), r):
            best = min(best, sum(cost[i, perm[i]] for i in range(r)))
    else:
        for perm in itertools.permutations(range(r), c):
            best = min(best, sum(cost[perm[j], j] for j in range(c)))
    return best


@pytest.mark.parametrize("shape", [(1, 1), (4, 4), (5, 3), (2, 6), (6, 6)])
def test_hungarian_matches_exhaustive_search(shape):
    rng = np.random.default_rng(sum(shape))
    for _ in range(5):
        cost = rng.uniform(0, 10, size=shape)
        r, c = hungarian(cost)
        assert len(r) == min(shape) and len(set(r)) == len(r) and len(set(c)) == len(c)
        assert abs(cost[r, c].sum() - brute_force_assignment(cost)) < 1e-9


def test_assign_examples():
    gt = box_to_anchor([5.0, 1.0, 0.8], (1.9, 4.5, 1.6), 0.3)[None]
    r, c = assign(np.zeros((1, 3)), np.zeros((1, 11)), gt, [0])
    assert r.tolist() == [0] and c.tolist() == [0]
    preds = np.stack([np.zeros(11), gt[0]])
    r, c = assign(np.zeros((2, 3)), preds, gt, [0])
    assert r.tolist() == [1]
    assert assign(np.zeros((2, 3)), preds, np.zeros((0, 11)), [])[0].size == 0


def layer_output(anchors, cls, quality):
    return LayerOutput(Tensor(anchors), Tensor(cls), Tensor(quality))


def test_det_loss_perfect_prediction_small():
    rng = np.random.default_rng(0)
    gt = np.stack([box_to_anchor(rng.uniform(-10, 10, 3), (2, 4, 1.5), rng.uniform(-3, 3)) for _ in range(2)])
    anchors = np.concatenate([gt, rng.normal(size=(3, 11))])
    cls = np.full((5, 3), -12.0)
    cls[0, 1] = cls[1, 2] = 12.0
    quality = np.full((5, 2), 12.0)
    loss, parts = det_loss([layer_output(anchors, cls, quality)], gt, np.array([1, 2]))
    assert loss.item() < 1e-3


def test_det_loss_without_gt_is_negative_focal_only():
    rng = np.random.default_rng(1)
    cls = rng.normal(size=(4, 3))
    loss, parts = det_loss([layer_output(rng.normal(size=(4, 11)), cls, rng.normal(size=(4, 2)))], np.zeros((0, 11)), np.zeros(0))
    expected = sigmoid_focal_loss(Tensor(cls), np.zeros((4, 3))).item() * DetLossConfig().cls_weight
    assert abs(loss.item() - expected) < 1e-12
    assert parts["box"] == 0 and parts["centerness"] == 0


def test_focal_loss_matches_formula():
    x, t = np.array([[-1.0, 2.0]]), np.array([[0.0, 1.0]])
    p = 1 / (1 + np.exp(-x))
    ref = -0.25 * t * (1 - p) ** 2 * np.log(p) - 0.75 * (1 - t) * p**2 * np.log(1 - p)
    assert abs(sigmoid_focal_loss(Tensor(x), t).item() - ref.sum()) < 1e-12


def test_det_loss_gradients():
    rng = np.random.default_rng(2)
    gt = np.stack([box_to_anchor(rng.uniform(-5, 5, 3), (2, 4, 1.5), rng.uniform(-3, 3)) for _ in range(2)])
    layers = [layer_output(rng.normal(size=(4, 11)), rng.normal(size=(4, 3)), rng.normal(size=(4, 2))) for _ in range(2)]
    targets = [det_targets(layer, gt, np.array([0, 2])) for layer in layers]
    leaves = [t for layer in layers for t in (layer.anchors, layer.cls_logits, layer.quality)]

    def f(*_):
        return det_loss(layers, gt, np.array([0, 2]), targets=targets)[0]

    rep = grad_check(f, leaves, tol=1e-4)
    assert rep.passed, rep


def test_deep_supervision_flag():
    rng = np.random.default_rng(3)
    gt = box_to_anchor([1, 2, 0.5], (2, 4, 1.5), 0.0)[None]
    layers = [layer_output(rng.normal(size=(3, 11)), rng.normal(size=(3, 3)), rng.normal(size=(3, 2))) for _ in range(3)]
    all_layers = det_loss(layers, gt, [0])[0].item()
    last = det_loss(layers, gt, [0], DetLossConfig(deep_supervision=False))[0].item()
    assert abs(last - det_loss(layers[-1:], gt, [0])[0].item()) < 1e-12 and all_layers > last


# --- distillation ------------------------------------------------------------------


def naive_distill(pred, pseudo, valid):
    vals = []
    for i in range(valid.shape[0]):
        for j in range(valid.shape[1]):
            if valid[i, j]:
                a, b = pred[i, j], pseudo[i, j]
                vals.append(1 - a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))
    return np.mean(vals)


def test_distill_examples():
    rng = np.random.default_rng(4)
    pseudo = rng.normal(size=(5, 5, 4))
    valid = rng.uniform(size=(5, 5)) < 0.5
    assert abs(distill_loss(Tensor(pseudo), pseudo, valid)[0].item()) < 1e-12
    assert abs(distill_loss(Tensor(-pseudo), pseudo, valid)[0].item() - 2.0) < 1e-12
    pred = rng.normal(size=(5, 5, 4))
    assert abs(distill_loss(Tensor(pred), pseudo, valid)[0].item() - naive_distill(pred, pseudo, valid)) < 1e-12


def test_distill_empty_mask_warns():
    with pytest.warns(RuntimeWarning):
        loss, parts = distill_loss(Tensor(np.ones((2, 2, 3))), np.ones((2, 2, 3)), np.zeros((2, 2), bool))
    assert loss.item() == 0.0 and parts["empty_mask"] == 1


@given(st.integers(0, 2**31))
def test_distill_ignores_cells_outside_mask(seed):
    rng = np.random.default_rng(seed)
    pred, pseudo = rng.normal(size=(6, 6, 3)), rng.normal(size=(6, 6, 3))
    valid = rng.uniform(size=(6, 6)) < 0.4
    valid[0, 0] = True
    valid[5, 5] = False
    base = distill_loss(Tensor(pred), pseudo, valid)[0].item()
    p2 = pred.copy()
    p2[~valid] = rng.normal(size=p2[~valid].shape) * 100
    assert distill_loss(Tensor(p2), pseudo, valid)[0].item() == base


def test_distill_gradient():
    rng = np.random.default_rng(5)
    pseudo = rng.normal(size=(4, 4, 3))
    valid = rng.uniform(size=(4, 4)) < 0.6
    pred = Tensor(rng.normal(size=(4, 4, 3)))
    rep = grad_check(lambda p: distill_loss(p, pseudo, valid)[0], pred, tol=1e-4)
    assert rep.passed, rep
    assert np.all(pred.grad[~valid] == 0)


# --- depth -------------------------------------------------------------------------


def test_depth_targets_take_nearest_point():
    s = generate_scene(0, n_frames=1, n_objects=2)
    f = s.frames[0]
    cam = f.cameras[0].scaled(1 / 8)
    bins = DepthBins(1.0, 60.0, 32)
    t = depth_targets(f.lidar_points, cam, bins)
    assert len(t.pixel) > 0
    best = {}
    for p in f.lidar_points:
        r = project(p, cam)
        if r is None:
            continue
        k = int(np.rint(r[1])) * cam.width + int(np.rint(r[0]))
        best[k] = min(best.get(k, np.inf), r[2])
    ref = {k: d for k, d in best.items() if 1.0 <= d < 60.0}
    assert sorted(ref) == t.pixel.tolist()
    np.testing.assert_allclose([ref[k] for k in t.pixel], t.depth, atol=1e-12)
    np.testing.assert_array_equal(t.bin, bins.index(t.depth))


def naive_depth(probs, aux, target, aux_weight=0.1, eps=1e-6):
    bce = l1 = 0.0
    for pix, b, d in zip(target.pixel, target.bin, target.depth):
        for k in range(probs.shape[1]):
            p = min(max(probs[pix, k], eps), 1 - eps)
            bce += -np.log(p) if k == b else -np.log(1 - p)
        l1 += abs(aux[pix] - d)
    n = len(target.pixel)
    return bce / n + aux_weight * l1 / n


def test_depth_loss_examples():
    rng = np.random.default_rng(6)
    target = DepthTarget(np.array([0, 2, 3]), np.array([1, 0, 3]), np.array([10.0, 2.0, 40.0]))
    probs = np.zeros((5, 4))
    probs[target.pixel, target.bin] = 1.0
    aux = np.zeros(5)
    aux[target.pixel] = target.depth
    loss, parts = depth_loss([Tensor(probs)], [Tensor(aux)], [target])
    assert parts["depth_l1"] == 0.0 and loss.item() < 1e-4
    probs = rng.dirichlet(np.ones(4), size=5)
    aux = rng.uniform(1, 50, 5)
    loss, _ = depth_loss([Tensor(probs)], [Tensor(aux)], [target])
    assert abs(loss.item() - naive_depth(probs, aux, target)) < 1e-12


def test_depth_loss_gradient():
    rng = np.random.default_rng(7)
    target = DepthTarget(np.array([0, 2]), np.array([1, 3]), np.array([10.0, 40.0]))
    logits = Tensor(rng.normal(size=(4, 4)))
    aux = Tensor(rng.uniform(1, 50, 4))
    rep = grad_check(lambda lg, a: depth_loss([nx.softmax(lg, axis=1)], [a], [target])[0], [logits, aux], tol=1e-4)
    assert rep.passed, rep


# --- total -------------------------------------------------------------------------


def test_total_loss_examples():
    a, b, c = Tensor(1.5), Tensor(0.25), Tensor(2.0)
    t, parts = total_loss(LossWeights(1, 0, 0), a, b, c)
    assert t.item() == 1.5
    t, parts = total_loss(LossWeights(1, 7, 1), a, b, c)
    assert t.item() == 1.5 + 7 * 0.25 + 2.0
    assert parts == {"det": 1.5, "distill": 0.25, "depth": 2.0, "total": 5.25}
    assert total_loss(LossWeights(), a, None, c)[0].item() == 3.5


def test_total_loss_gradient():
    rng = np.random.default_rng(8)
    pseudo = rng.normal(size=(3, 3, 2))
    valid = np.ones((3, 3), bool)
    pred = Tensor(rng.normal(size=(3, 3, 2)))
    x = Tensor(rng.normal(size=4))
    rep = grad_check(
        lambda p, v: total_loss(LossWeights(1, 7, 1), nx.tsum(nx.square(v)), distill_loss(p, pseudo, valid)[0], nx.tsum(nx.exp(v)))[0],
        [pred, x],
        tol=1e-4,
    )
    assert rep.passed, rep


def test_negative_weights_rejected():
    with pytest.raises(ValueError):
        LossWeights(1, -1, 1)
