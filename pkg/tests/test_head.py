import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossloc.head import (
    AnchorFreeHead,
    BBox,
    HeadConfig,
    build_targets,
    decode_prediction,
    gaussian_sigma,
)
from crossloc.tensor import Tensor

from fdcheck import check_grads


def rng(seed=0):
    return np.random.default_rng(seed)


# -- forward -------------------------------------------------------------------


def test_zeroed_final_convs_give_half_heatmap_zero_boxes():
    head = AnchorFreeHead(rng(1), in_dim=8, cfg=HeadConfig(hidden=8))
    head.hm_w.data[:] = 0.0
    head.hm_b.data[:] = 0.0
    head.box_w.data[:] = 0.0
    head.box_b.data[:] = 0.0
    out = head(Tensor(rng(2).normal(size=(1, 4, 4, 8))))
    assert np.allclose(out.heatmap.data, 0.5, atol=1e-12)
    assert np.allclose(out.bbox.data, 0.0, atol=1e-12)


def test_head_preserves_spatial_extents():
    head = AnchorFreeHead(rng(3), in_dim=4, cfg=HeadConfig(hidden=6))
    out = head(Tensor(rng(4).normal(size=(2, 5, 7, 4))))
    assert out.heatmap.shape == (2, 5, 7, 1)
    assert out.bbox.shape == (2, 5, 7, 4)


def test_head_heatmap_strictly_in_unit_interval():
    head = AnchorFreeHead(rng(5), in_dim=4, cfg=HeadConfig(hidden=6))
    out = head(Tensor(rng(6).normal(size=(1, 4, 4, 4)) * 5))
    assert np.all(out.heatmap.data > 0) and np.all(out.heatmap.data < 1)


def test_head_grad_matches_fd():
    head = AnchorFreeHead(rng(7), in_dim=8, cfg=HeadConfig(hidden=4))
    x = rng(8).normal(size=(1, 4, 4, 8))

    def build(ts):
        out = head(ts[0])
        return (out.heatmap ** 2.0).sum() + (out.bbox ** 2.0).sum()

    check_grads(build, [x], tol=1e-4)


def test_head_batch_norm_uses_running_stats_in_eval():
    head = AnchorFreeHead(rng(9), in_dim=4, cfg=HeadConfig(hidden=4))
    x = Tensor(rng(10).normal(size=(4, 4, 4, 4)))
    head.train()
    head(x)  # updates running stats
    head.eval()
    a = head(x)
    b = head(Tensor(x.data[:1]))  # eval output independent of batch statistics
    assert np.allclose(a.heatmap.data[:1], b.heatmap.data, atol=1e-12)


# -- target construction -----------------------------------------------------------


def test_build_targets_hand_case():
    t = build_targets(BBox(0, 0, 8, 8), image_hw=(64, 64), feat_hw=(16, 16), sigma=2.0)
    assert t.pos_cell == (1, 1)
    assert t.offset == (0.0, 0.0)
    assert t.size == (2.0, 2.0)
    assert t.heatmap[1, 1] == 1.0


def test_heatmap_peak_value_is_one():
    t = build_targets(BBox(10, 20, 50, 60), (64, 64), (16, 16), sigma=2.0)
    assert t.heatmap.max() == 1.0
    assert (t.heatmap == 1.0).sum() == 1


def test_heatmap_value_at_sigma_distance():
    # center exactly on a cell: value one sigma away along an axis is exp(-1/2)
    t = build_targets(BBox(6, 6, 10, 10), (64, 64), (32, 32), sigma=2.0)
    cx, cy = t.pos_cell
    assert t.offset == (0.0, 0.0)
    assert abs(t.heatmap[cy, cx + 2] - np.exp(-0.5)) < 1e-12


def test_gaussian_radially_monotone_outside_positive_cell():
    t = build_targets(BBox(17, 9, 49, 41), (64, 64), (16, 16), sigma=2.5)
    cx = (17 + 49) / 2 * 16 / 64
    cy = (9 + 41) / 2 * 16 / 64
    ys, xs = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    mask = np.ones_like(dist, dtype=bool)
    mask[t.pos_cell[1], t.pos_cell[0]] = False
    order = np.argsort(dist[mask])
    vals = t.heatmap[mask][order]
    assert np.all(np.diff(vals) <= 1e-15)


def test_degenerate_box_rejected():
    with pytest.raises(ValueError):
        BBox(5, 5, 5, 9)


def test_adaptive_sigma_floor():
    assert gaussian_sigma((0.5, 0.4), None) == 1.0
    assert gaussian_sigma((30.0, 12.0), None) == 2.0
    assert gaussian_sigma((30.0, 12.0), 3.5) == 3.5


# -- decoding -----------------------------------------------------------------------


def test_decode_forced_maps_hand_case():
    heat = np.zeros((8, 8))
    heat[2, 3] = 0.9  # peak at column x=3, row y=2
    boxes = np.zeros((8, 8, 4))
    boxes[2, 3] = [0.5, 0.5, 4.0, 4.0]
    pred = decode_prediction(heat, boxes, image_hw=(32, 32))  # stride 4
    assert pred.center == (14.0, 10.0)
    assert pred.bbox.as_list() == [6.0, 2.0, 22.0, 18.0]
    assert pred.score == 0.9


def test_decode_tie_breaks_row_major_first():
    heat = np.full((4, 4), 0.3)
    boxes = np.zeros((4, 4, 4))
    boxes[..., 2:] = 1.0
    pred = decode_prediction(heat, boxes, image_hw=(16, 16))
    assert pred.center == (0.0, 0.0)


def test_decode_round_trip_recovers_hand_box():
    gt = BBox(0, 0, 8, 8)
    t = build_targets(gt, (64, 64), (16, 16), sigma=2.0)
    boxes = np.zeros((16, 16, 4))
    boxes[t.pos_cell[1], t.pos_cell[0]] = [t.offset[0], t.offset[1], t.size[0], t.size[1]]
    pred = decode_prediction(t.heatmap, boxes, (64, 64))
    assert np.allclose(pred.bbox.as_list(), gt.as_list(), atol=0.5)


@settings(deadline=None, max_examples=200)
@given(st.data())
def test_decode_round_trip_random_boxes(data):
    r = np.random.default_rng(data.draw(st.integers(0, 2 ** 31 - 1)))
    iw = ih = 128
    fw = fh = 4
    w = r.uniform(4, 100)
    h = r.uniform(4, 100)
    x1 = r.uniform(0, iw - w)
    y1 = r.uniform(0, ih - h)
    gt = BBox(x1, y1, x1 + w, y1 + h)
    t = build_targets(gt, (ih, iw), (fh, fw))
    boxes = np.zeros((fh, fw, 4))
    boxes[t.pos_cell[1], t.pos_cell[0]] = [t.offset[0], t.offset[1], t.size[0], t.size[1]]
    pred = decode_prediction(t.heatmap, boxes, (ih, iw))
    # size recovers exactly; center within one feature-cell stride
    assert abs(pred.bbox.width - gt.width) < 1e-9
    assert abs(pred.bbox.height - gt.height) < 1e-9
    stride = iw / fw
    assert abs(pred.center[0] - gt.center[0]) < stride
    assert abs(pred.center[1] - gt.center[1]) < stride


def test_single_positive_cell_invariant():
    for seed in range(20):
        r = np.random.default_rng(seed)
        x1, y1 = r.uniform(0, 100, 2)
        gt = BBox(x1, y1, x1 + r.uniform(2, 27), y1 + r.uniform(2, 27))
        t = build_targets(gt, (128, 128), (8, 8))
        assert (t.heatmap == 1.0).sum() == 1
        assert 0 <= t.offset[0] < 1 and 0 <= t.offset[1] < 1
        assert t.size[0] > 0 and t.size[1] > 0
