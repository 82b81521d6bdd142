import math

import numpy as np
import pytest

from crossloc.errors import TrainingAborted
from crossloc.gmoe import GatingDecision
from crossloc.head import BBox, build_targets
from crossloc.losses import FocalParams, LossWeights, bbox_l1_loss, entropy_loss, focal_loss, total_loss
from crossloc.tensor import Tensor

from fdcheck import check_grads


def rng(seed=0):
    return np.random.default_rng(seed)


def _decision(weights):
    w = np.asarray(weights, dtype=np.float64)
    return GatingDecision(
        logits=np.zeros((w.shape[0], 6)),
        expert_ids=np.tile(np.arange(w.shape[1]), (w.shape[0], 1)),
        weights=Tensor(w, requires_grad=True),
        grid=(1, w.shape[0]),
    )


# -- focal loss -----------------------------------------------------------------


def test_focal_perfect_prediction_approaches_zero():
    t = build_targets(BBox(20, 20, 44, 44), (64, 64), (8, 8), sigma=1.0)
    eps = 1e-9
    pred = np.where(t.heatmap == 1.0, 1.0 - eps, eps)
    loss = focal_loss(Tensor(pred), t.heatmap).item()
    assert loss < 1e-6


def test_focal_single_positive_scalar_oracle():
    # one cell, y=1, p=0.5, gamma=2 -> 0.25 * ln 2
    loss = focal_loss(Tensor(np.array([[0.5]])), np.array([[1.0]]), FocalParams(gamma=2.0))
    assert abs(loss.item() - 0.25 * math.log(2)) < 1e-12


def test_focal_confident_negative_vanishes():
    target = np.array([[1.0, 0.0]])
    pred = np.array([[0.5, 1e-9]])
    base = focal_loss(Tensor(np.array([[0.5, 0.5]])), target).item()
    low = focal_loss(Tensor(pred), target).item()
    assert low < base
    only_pos = focal_loss(Tensor(np.array([[0.5, 1e-12]])), target).item()
    assert abs(only_pos - 0.25 * math.log(2)) < 1e-6


def test_focal_requires_positive_cell():
    with pytest.raises(ValueError):
        focal_loss(Tensor(np.full((2, 2), 0.5)), np.zeros((2, 2)))


def test_focal_soft_negative_weighting():
    # near-center cells (high gaussian y) are down-weighted by (1-y)^beta
    target = np.array([[1.0, 0.9, 0.0]])
    pred = Tensor(np.array([[0.9, 0.5, 0.5]]))
    full = focal_loss(pred, target, FocalParams(gamma=2.0, beta=4.0)).item()
    manual = -(
        (1 - 0.9) ** 2 * math.log(0.9)
        + (1 - 0.9) ** 4 * 0.5 ** 2 * math.log(0.5)
        + 1.0 * 0.5 ** 2 * math.log(0.5)
    )
    assert abs(full - manual) < 1e-12


def test_focal_grad_matches_fd():
    t = build_targets(BBox(4, 4, 20, 20), (32, 32), (4, 4), sigma=1.0)
    raw = rng(1).normal(size=(4, 4))

    def build(ts):
        import crossloc.tensor as T

        return focal_loss(T.sigmoid(ts[0]), t.heatmap)

    check_grads(build, [raw], tol=1e-5)


# -- bbox l1 --------------------------------------------------------------------


def _targets_for(pred_shape, offset=(0.0, 0.0), size=(2.0, 2.0), cell=(1, 1)):
    t = build_targets(BBox(0, 0, 8, 8), (64, 64), pred_shape[1:3], sigma=1.0)
    t.offset, t.size, t.pos_cell = offset, size, cell
    return [t]


def test_bbox_l1_zero_at_exact_match():
    pred = np.zeros((1, 4, 4, 4))
    pred[0, 1, 1] = [0.25, 0.5, 2.0, 3.0]
    targets = _targets_for(pred.shape, offset=(0.25, 0.5), size=(2.0, 3.0))
    assert bbox_l1_loss(Tensor(pred), targets).item() == 0.0


def test_bbox_l1_hand_case():
    pred = np.zeros((1, 4, 4, 4))
    pred[0, 1, 1] = [0.5, 0.0, 2.0, 3.0]
    targets = _targets_for(pred.shape, offset=(0.0, 0.0), size=(2.0, 2.0))
    assert abs(bbox_l1_loss(Tensor(pred), targets).item() - 1.5) < 1e-12


def test_bbox_l1_ignores_non_positive_cells():
    pred = np.zeros((1, 4, 4, 4))
    pred[0, 1, 1] = [0.5, 0.0, 2.0, 3.0]
    targets = _targets_for(pred.shape, offset=(0.0, 0.0), size=(2.0, 2.0))
    base = bbox_l1_loss(Tensor(pred), targets).item()
    pred2 = pred.copy()
    pred2[0, 3, 2] = rng(2).normal(size=4) * 100
    assert bbox_l1_loss(Tensor(pred2), targets).item() == base


def test_bbox_l1_grad_matches_fd():
    targets = _targets_for((1, 4, 4, 4), offset=(0.3, 0.7), size=(1.5, 2.5), cell=(2, 1))
    raw = rng(3).normal(size=(1, 4, 4, 4))
    check_grads(lambda ts: bbox_l1_loss(ts[0], targets), [raw], tol=1e-5)


# -- entropy loss ------------------------------------------------------------------


def test_entropy_loss_uniform_six_experts():
    d = _decision([[1 / 6] * 6])
    assert abs(entropy_loss([d], lam=1.0).item() + math.log(6)) < 1e-9


def test_entropy_loss_one_hot_zero():
    d = _decision([[1.0, 0.0]])
    assert entropy_loss([d], lam=1.0).item() == 0.0


def test_entropy_loss_scalar_oracle():
    d = _decision([[0.7311, 0.2689]])
    assert abs(entropy_loss([d], lam=0.015).item() - (-0.008733)) < 1e-5


def test_entropy_loss_minimized_at_uniform():
    uniform = entropy_loss([_decision([[0.25] * 4])], lam=1.0).item()
    for w in ([0.7, 0.1, 0.1, 0.1], [0.4, 0.3, 0.2, 0.1], [1.0, 0.0, 0.0, 0.0]):
        assert uniform < entropy_loss([_decision([w])], lam=1.0).item() + 1e-12


# -- total loss ---------------------------------------------------------------------


def test_total_loss_default_weights_hand_sum():
    w = LossWeights()
    assert (w.alpha, w.mu, w.lam) == (0.9, 1.1, 0.015)
    out = total_loss(Tensor(1.0), Tensor(1.0), Tensor(-1.0), w)
    assert abs(out.item() - 1.985) < 1e-12


def test_total_loss_zero_components():
    out = total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), LossWeights())
    assert out.item() == 0.0


def test_total_loss_rejects_non_finite_component():
    import crossloc.tensor as T

    T.set_finite_checks(False)
    try:
        bad = Tensor.__new__(Tensor)
        bad.data = np.array(np.nan)
        bad.requires_grad = False
        bad.grad = None
        bad._parents = ()
        bad._backward = None
        with pytest.raises(TrainingAborted, match="bbox"):
            total_loss(Tensor(1.0), bad, Tensor(0.0), LossWeights())
    finally:
        T.set_finite_checks(True)


def test_total_loss_gradient_is_weighted_sum():
    x = Tensor(np.array([0.3, -0.2]), requires_grad=True)
    hm = (x * x).sum()
    bb = (x * 3.0).sum()
    ent = (x * -1.0).sum()
    total_loss(hm, bb, ent, LossWeights(alpha=0.5, mu=2.0, lam=0.1)).backward()
    expect = 0.5 * 2 * x.data + 2.0 * 3.0 + 0.1 * -1.0
    assert np.allclose(x.grad, expect, atol=1e-12)
