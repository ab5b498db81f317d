"""Training objective: soft-IoU overlap term, two-point attraction term, and their blend.

All three losses return both the scalar value and the analytic gradient with
respect to the soft prediction, so the network backward pass needs no
autodiff machinery. Functions accept either the volgrid domain objects or
bare arrays of matching shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LossConfig:
    """Blend weight, attraction-region threshold and field decay, all in [0, 1].

    Defaults are the best triple found by the reference random search
    (lambda1=0.68, gamma=0.59, p=0.44).
    """

    lambda1: float = 0.68
    gamma: float = 0.59
    decay_p: float = 0.44

    def __post_init__(self):
        for name in ("lambda1", "gamma", "decay_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")


@dataclass(frozen=True)
class LossValue:
    total: float
    iou_term: float
    attraction_term: float
    grad_wrt_pred: np.ndarray


def _values(x) -> np.ndarray:
    return np.asarray(getattr(x, "values", x))


def iou_loss(pred, target) -> tuple[float, np.ndarray]:
    """``1 - intersection/union`` between a soft prediction and a binary target.

    Soft counts: intersection is the sum of the elementwise product, union is
    the sum of both minus the intersection. The gradient per voxel follows the
    quotient rule. An all-zero target with an all-zero prediction has no
    defined union and raises rather than silently returning a convention.
    """
    p = _values(pred).astype(np.float64, copy=False)
    t = _values(target).astype(np.float64, copy=False)
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs target {t.shape}")
    inter = float((t * p).sum())
    union = float(t.sum() + p.sum() - inter)
    if union == 0.0:
        raise ValueError("IoU undefined: target and prediction are both empty")
    loss = 1.0 - inter / union
    grad = (inter * (1.0 - t) - t * union) / (union * union)
    return loss, grad


def attraction_loss(pred, weightmap, gamma: float) -> tuple[float, np.ndarray]:
    """Fraction of the high-attraction region the prediction fails to cover.

    The region of interest is ``{v : M(v) > gamma}`` (strict). Loss is
    ``1 - mean(pred over region)``; the gradient is ``-1/|R|`` inside the
    region and zero outside. An empty region (gamma at or above the map's
    peak, or no points given) contributes nothing: loss 0, zero gradient.
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    p = _values(pred).astype(np.float64, copy=False)
    m = _values(weightmap).astype(np.float64, copy=False)
    if p.shape != m.shape:
        raise ValueError(f"shape mismatch: pred {p.shape} vs weight map {m.shape}")
    region = m > gamma
    n = int(region.sum())
    if n == 0:
        return 0.0, np.zeros_like(p)
    loss = 1.0 - float(p[region].sum()) / n
    grad = np.zeros_like(p)
    grad[region] = -1.0 / n
    return loss, grad


def combined_loss(pred, target, weightmap, config: LossConfig) -> LossValue:
    """``lambda1 * L_iou + (1 - lambda1) * L_attraction`` with matching gradient blend."""
    iou_term, g_iou = iou_loss(pred, target)
    attr_term, g_attr = attraction_loss(pred, weightmap, config.gamma)
    lam = config.lambda1
    total = lam * iou_term + (1.0 - lam) * attr_term
    grad = lam * g_iou + (1.0 - lam) * g_attr
    return LossValue(total=total, iou_term=iou_term, attraction_term=attr_term, grad_wrt_pred=grad)
