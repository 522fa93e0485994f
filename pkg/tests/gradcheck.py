"""Finite-difference checks for tape ops.

A random linear projection turns any op output into a scalar so every
output entry contributes to the checked gradient.  All checks run in
float64; float32 central differences at eps=1e-3 carry rounding error
well above the 1e-3 tolerance.
"""
import numpy as np

from ffavod import losses as ls
from ffavod import tensor_core as tc
from ffavod.detector import Detector, DetectorConfig
from ffavod.targets import build_targets, stack_targets
from ffavod.tensor_core import Tensor

from oracles import FD_EPS, central_difference, relative_error


def check_gradients(fn, arrays, seed, eps=FD_EPS):
    """Return the worst per-entry relative error between tape and numeric gradients.

    ``fn`` maps a list of Tensors to one Tensor.  ``arrays`` are float64
    inputs, all treated as differentiable.
    """
    rng = np.random.default_rng(seed)
    with tc.precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        out = fn(leaves)
        proj = rng.standard_normal(out.shape)
        tc.sum(tc.mul(out, Tensor(proj))).backward()
        worst = 0.0
        for leaf, arr in zip(leaves, arrays):
            work = np.array(arr, dtype=np.float64)

            def value():
                ins = [Tensor(work) if a is arr else Tensor(a) for a in arrays]
                with tc.no_grad():
                    return float((fn(ins).data * proj).sum())

            numeric = central_difference(value, work, eps)
            worst = max(worst, float(relative_error(leaf.grad, numeric).max()))
    return worst


class ReluPatterns:
    """Records every relu's active mask so a finite-difference stencil can be screened for kink crossings."""

    def __init__(self, monkeypatch):
        self.masks = None
        original = tc.relu

        def recording(x):
            if self.masks is not None:
                self.masks.append(x.data > 0)
            return original(x)

        monkeypatch.setattr(tc, "relu", recording)

    def capture(self, fn):
        self.masks = []
        fn()
        masks, self.masks = self.masks, None
        return masks


def micro_fusion_loss_check(seed, patterns, eps=FD_EPS):
    """Full-detector loss gradient w.r.t. fusion weights vs central differences (8x8 images, c=4, K=1).

    Returns None when the stencil crosses a relu kink, where central
    differences do not estimate the derivative.
    """
    rng = np.random.default_rng(seed)
    with tc.precision(np.float64):
        cfg = DetectorConfig(height=8, width=8, channels=4, num_classes=1, fusion="learned", n=1,
                             fusion_mode=("shared", "per_channel")[seed % 2], fusion_init="seeded_random")
        det = Detector(cfg, seed=seed)
        frames = [Tensor(rng.uniform(0, 1, (2, 3, 8, 8))) for _ in range(3)]
        tgt = stack_targets([build_targets([(0, (1, 2, 6, 7))], 1, 8, 8, 4),
                             build_targets([(0, (3, 0, 8, 5))], 1, 8, 8, 4)])
        w = det.fusion.params.weights
        loss, _ = ls.detection_loss(det.forward_frames(frames), tgt)
        det.zero_grad()
        loss.backward()
        analytic = w.grad.copy()

        def value():
            with tc.no_grad():
                return ls.detection_loss(det.forward_frames(frames), tgt)[1].total

        base = patterns.capture(value)
        flat = w.data.reshape(-1)
        for i in range(flat.size):
            for step in (eps, -eps):
                flat[i] += step
                moved = patterns.capture(value)
                flat[i] -= step
                if any(not np.array_equal(a, b) for a, b in zip(base, moved)):
                    return None
        numeric = central_difference(value, w.data, eps)
    return float(relative_error(analytic, numeric).max())
