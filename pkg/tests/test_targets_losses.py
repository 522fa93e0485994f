import math

import numpy as np
import pytest

from ffavod import losses as ls
from ffavod import tensor_core as tc
from ffavod.detector import HeadOutputs
from ffavod.targets import build_targets, gaussian_radius, splat, stack_targets
from ffavod.tensor_core import Tensor

from gradcheck import ReluPatterns, check_gradients, micro_fusion_loss_check
from oracles import REL_TOL


def direct_splat(h, w, centres):
    """Recompute a heatmap cell by cell from the Gaussian definition."""
    out = np.zeros((h, w))
    for cx, cy, r in centres:
        sigma = (2 * r + 1) / 6
        for y in range(h):
            for x in range(w):
                if abs(x - cx) <= math.ceil(r) and abs(y - cy) <= math.ceil(r):
                    out[y, x] = max(out[y, x], math.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * sigma ** 2)))
    return out


def test_box_centred_on_cell():
    t = build_targets([(0, (10, 10, 26, 26))], 1, 64, 64, 4)  # centre 18,18 -> cell 4.5
    t2 = build_targets([(0, (8, 8, 24, 24))], 1, 64, 64, 4)    # centre 16,16 -> cell 4.0
    assert t2.heatmap[0, 4, 4] == 1.0 and t2.offset[:, 4, 4].tolist() == [0.0, 0.0]
    assert t.offset[:, 4, 4].tolist() == [0.5, 0.5]
    assert t.size[:, 4, 4].tolist() == [16.0, 16.0] and t.num_objects == 1


def test_two_distant_boxes_give_two_unit_peaks():
    t = build_targets([(0, (0, 0, 8, 8)), (1, (40, 40, 60, 52))], 2, 64, 64, 4)
    assert t.heatmap[0].max() == 1.0 and t.heatmap[1].max() == 1.0
    assert (t.heatmap == 1.0).sum() == 2 and t.num_objects == 2
    assert 0.0 <= t.heatmap.min() and t.heatmap.max() <= 1.0


def test_overlapping_splats_combine_by_max():
    boxes = [(0, (10, 10, 30, 30)), (0, (18, 14, 34, 30)), (0, (4, 20, 12, 28))]
    t = build_targets(boxes, 1, 64, 64, 4)
    centres = []
    for _, (x0, y0, x1, y1) in boxes:
        centres.append((int((x0 + x1) / 8), int((y0 + y1) / 8), gaussian_radius(x1 - x0, y1 - y0, 4)))
    np.testing.assert_allclose(t.heatmap[0], direct_splat(16, 16, centres), rtol=1e-6, atol=1e-7)


def test_splat_near_border_is_clipped():
    hm = np.zeros((4, 4), np.float32)
    splat(hm, 0, 3, 2.5)
    assert hm[3, 0] == 1.0 and hm.shape == (4, 4)


def test_gaussian_radius_floor():
    assert gaussian_radius(4, 4, 4) == 1.0
    assert gaussian_radius(24, 16, 4) == 2.0


@pytest.mark.parametrize("box", [(5, 5, 5, 9), (5, 5, 9, 4)])
def test_degenerate_boxes_rejected(box):
    with pytest.raises(ValueError):
        build_targets([(0, box)], 1, 64, 64, 4)


def test_stack_targets():
    t = stack_targets([build_targets([], 2, 32, 32, 4)] * 3)
    assert t.heatmap.shape == (3, 2, 8, 8) and t.mask.shape == (3, 8, 8)


# --- losses -----------------------------------------------------------------------------

def outputs_from(hm, size, off):
    return HeadOutputs(Tensor(hm), Tensor(size), Tensor(off))


def test_perfect_regression_has_zero_l1():
    tgt = stack_targets([build_targets([(0, (4, 4, 20, 14))], 1, 32, 32, 4)])
    _, parts = ls.detection_loss(outputs_from(tgt.heatmap, tgt.size, tgt.offset), tgt)
    assert parts.size == 0.0 and parts.offset == 0.0


def test_empty_ground_truth_is_background_penalty_only():
    tgt = stack_targets([build_targets([], 1, 32, 32, 4)])
    p = np.full((1, 1, 8, 8), 0.2)
    _, parts = ls.detection_loss(outputs_from(p, np.ones((1, 2, 8, 8)), np.ones((1, 2, 8, 8))), tgt)
    assert parts.size == parts.offset == 0.0
    assert parts.heatmap == pytest.approx(-64 * 0.2 ** 2 * math.log(0.8), rel=1e-5)


def test_focal_loss_values():
    target = np.zeros((1, 1, 1, 3))
    target[..., 0] = 1.0
    target[..., 1] = 0.5
    p = np.array([[[[0.9, 0.3, 0.1]]]])
    expected = -(0.1 ** 2) * math.log(0.9) - 0.5 ** 4 * 0.3 ** 2 * math.log(0.7) - 0.1 ** 2 * math.log(0.9)
    with tc.precision(np.float64):
        assert ls.focal_loss(Tensor(p), target).item() == pytest.approx(expected, rel=1e-12)


def test_total_weighting():
    tgt = stack_targets([build_targets([(0, (4, 4, 20, 14))], 1, 32, 32, 4)])
    out = outputs_from(np.full((1, 1, 8, 8), 0.3), tgt.size + 2.0, tgt.offset + 0.25)
    loss, parts = ls.detection_loss(out, tgt)
    assert parts.size == pytest.approx(2.0) and parts.offset == pytest.approx(0.25)
    assert parts.total == pytest.approx(parts.heatmap + 0.1 * 2.0 + 0.25, rel=1e-6)
    assert loss.item() == pytest.approx(parts.total)


def test_shape_mismatch_raises():
    tgt = stack_targets([build_targets([], 1, 32, 32, 4)])
    with pytest.raises(tc.ShapeError):
        ls.focal_loss(Tensor(np.full((1, 2, 8, 8), 0.5)), tgt.heatmap)


@pytest.mark.parametrize("seed", range(20))
def test_loss_gradient_on_toy_case(seed):
    rng = np.random.default_rng(seed)
    x0, y0 = rng.integers(0, 18, 2)
    tgt = stack_targets([build_targets([(0, (x0, y0, x0 + rng.integers(6, 14), y0 + rng.integers(6, 14)))],
                                       1, 32, 32, 4)])
    # keep predictions away from the clamp and the regressions away from the L1 kink
    hm = rng.uniform(0.05, 0.95, (1, 1, 8, 8))
    size = tgt.size + rng.uniform(0.5, 2, (1, 2, 8, 8)) * rng.choice([-1, 1], (1, 2, 8, 8))
    off = tgt.offset + rng.uniform(0.05, 0.3, (1, 2, 8, 8)) * rng.choice([-1, 1], (1, 2, 8, 8))

    def fn(t):
        return ls.detection_loss(HeadOutputs(t[0], t[1], t[2]), tgt)[0]

    assert check_gradients(fn, [hm, size, off], seed) < REL_TOL


def test_fusion_weight_gradient_through_full_loss(monkeypatch):
    patterns = ReluPatterns(monkeypatch)
    errors = {}
    for seed in range(40):
        err = micro_fusion_loss_check(seed, patterns)
        if err is not None:
            errors[seed] = err
        if len(errors) == 20:
            break
    assert len(errors) == 20
    assert max(errors.values()) < REL_TOL, errors
