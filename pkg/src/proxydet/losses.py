"""Training objectives with forward values and hand-derived gradients.

Covers the asymmetric multi-label loss, log-sum-exp pooling for
multiple-instance training, the fixed-matching detection loss (presence
cross-entropy + L1 + GIoU box regression), the region-level and
image-level classification losses built from them, and a central
finite-difference checker used to validate every analytic gradient.

Conventions shared by all losses here:

* probabilities arrive already squashed into [0, 1] (sigmoid happens in
  the model, not the loss);
* log arguments are clamped at 1e-8 so values are reproducible
  bit-for-bit;
* reductions are means, taken only over regions that are present.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .geometry import center_to_corner_batch, giou_batch, giou_gradient_batch

logger = logging.getLogger(__name__)

_LOG_EPS = 1e-8


# ---------------------------------------------------------------------------
# asymmetric loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AslParams:
    """Asymmetric-loss hyperparameters.

    ``gamma_pos``/``gamma_neg`` are the focusing exponents for positive and
    negative targets, ``clip`` the probability margin subtracted from
    negatives before focusing, ``eps`` the log-argument floor.
    """

    gamma_pos: float = 0.0
    gamma_neg: float = 4.0
    clip: float = 0.05
    eps: float = 1e-8

    def __post_init__(self):
        if self.gamma_pos < 0 or self.gamma_neg < 0:
            raise ValueError("focusing exponents must be >= 0")
        if not 0.0 <= self.clip < 1.0:
            raise ValueError("clip must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def asl(p, y, params: AslParams = AslParams()):
    """Asymmetric loss on probabilities ``p`` against binary targets ``y``.

    Positive targets: ``(1 - p)^gamma_pos * (-log max(p, eps))``.
    Negative targets shift the probability by the clip first,
    ``p_m = max(p - clip, 0)``, then ``p_m^gamma_neg * (-log max(1 - p_m, eps))``.

    Elementwise over broadcastable arrays; scalars in, scalar out. With
    ``gamma_pos = gamma_neg = clip = 0`` this is exactly binary
    cross-entropy.
    """
    p_arr = np.asarray(p, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)
    pos = (1.0 - p_arr) ** params.gamma_pos * (-np.log(np.maximum(p_arr, params.eps)))
    pm = np.maximum(p_arr - params.clip, 0.0)
    neg = pm**params.gamma_neg * (-np.log(np.maximum(1.0 - pm, params.eps)))
    out = np.where(y_arr > 0.5, pos, neg)
    if np.ndim(p) == 0 and np.ndim(y) == 0:
        return float(out)
    return out


def asl_grad(p, y, params: AslParams = AslParams()):
    """d asl / d p, elementwise. Nonsmooth exactly at ``p == clip`` (negatives)."""
    p_arr = np.asarray(p, dtype=np.float64)
    y_arr = np.asarray(y, dtype=np.float64)

    pc = np.maximum(p_arr, params.eps)
    log_active = p_arr > params.eps
    pos = (1.0 - p_arr) ** params.gamma_pos * np.where(log_active, -1.0 / pc, 0.0)
    if params.gamma_pos > 0:
        pos = pos - params.gamma_pos * (1.0 - p_arr) ** (params.gamma_pos - 1.0) * (
            -np.log(pc)
        )

    pm = np.maximum(p_arr - params.clip, 0.0)
    one_m = np.maximum(1.0 - pm, params.eps)
    neg_log_active = (1.0 - pm) > params.eps
    in_slope = p_arr > params.clip
    neg = pm**params.gamma_neg * np.where(neg_log_active, 1.0 / one_m, 0.0)
    if params.gamma_neg > 0:
        # pm > 0 wherever in_slope holds, so the power is finite
        neg = neg + params.gamma_neg * np.where(in_slope, pm, 1.0) ** (
            params.gamma_neg - 1.0
        ) * (-np.log(one_m))
    neg = np.where(in_slope, neg, 0.0)

    out = np.where(y_arr > 0.5, pos, neg)
    if np.ndim(p) == 0 and np.ndim(y) == 0:
        return float(out)
    return out


# ---------------------------------------------------------------------------
# log-sum-exp pooling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LsePoolParams:
    """Sharpness of the log-sum-exp pool; larger r approaches max pooling."""

    r: float = 10.0

    def __post_init__(self):
        if self.r <= 0:
            raise ValueError("pooling sharpness r must be > 0")


def lse_pool(values, params: LsePoolParams = LsePoolParams()) -> float:
    """``(1/r) * log(mean(exp(r * x)))`` with max-subtraction for overflow safety.

    Bounds: ``mean(x) <= lse_pool(x) <= max(x)`` and
    ``lse_pool(x) >= max(x) - log(N)/r``.
    """
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("lse_pool requires a non-empty input")
    z = params.r * x
    m = float(np.max(z))
    return (m + float(np.log(np.mean(np.exp(z - m))))) / params.r


def lse_pool_grad(values, params: LsePoolParams = LsePoolParams()) -> np.ndarray:
    """Gradient of :func:`lse_pool`: the softmax of ``r * x`` (sums to 1)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        raise ValueError("lse_pool requires a non-empty input")
    z = params.r * x
    e = np.exp(z - np.max(z))
    return e / np.sum(e)


def _lse_pool_masked(probs: np.ndarray, present: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """Pool ``(..., R, C)`` probabilities over the region axis, present rows only.

    Returns ``(pooled, weights)`` with pooled shaped ``(..., C)`` and
    weights shaped like ``probs`` (softmax over present rows, zero
    elsewhere). Every sample must have at least one present region.
    """
    mask = present[..., None].astype(bool)
    z = r * probs
    z_masked = np.where(mask, z, -np.inf)
    m = np.max(z_masked, axis=-2, keepdims=True)
    e = np.where(mask, np.exp(z - m), 0.0)
    denom = np.sum(e, axis=-2, keepdims=True)
    n = np.sum(mask, axis=-2, keepdims=True)
    pooled = (m[..., 0, :] + np.log(denom[..., 0, :] / n[..., 0, :])) / r
    weights = e / denom
    return pooled, weights


# ---------------------------------------------------------------------------
# fixed-matching detection loss
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DetectionLossParams:
    """Weights of the detection loss terms: L1 box, GIoU box, presence BCE."""

    l1_weight: float = 5.0
    giou_weight: float = 2.0
    presence_weight: float = 1.0

    def __post_init__(self):
        if min(self.l1_weight, self.giou_weight, self.presence_weight) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class DetectionLossValue:
    """Total plus per-component (unweighted mean) breakdown."""

    total: float
    presence_bce: float
    l1: float
    giou_penalty: float


def _bce(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    return -(
        y * np.log(np.maximum(p, _LOG_EPS))
        + (1.0 - y) * np.log(np.maximum(1.0 - p, _LOG_EPS))
    )


def _bce_grad(p: np.ndarray, y: np.ndarray) -> np.ndarray:
    gp = np.where(p > _LOG_EPS, -y / np.maximum(p, _LOG_EPS), 0.0)
    gn = np.where(1.0 - p > _LOG_EPS, (1.0 - y) / np.maximum(1.0 - p, _LOG_EPS), 0.0)
    return gp + gn


def fixed_match_detection_loss(
    pred_presence: np.ndarray,
    pred_boxes: np.ndarray,
    target_present: np.ndarray,
    target_boxes: np.ndarray,
    params: DetectionLossParams = DetectionLossParams(),
) -> DetectionLossValue:
    """Detection loss with the prediction-to-target assignment fixed by region index.

    Args:
        pred_presence: ``(R,)`` presence probabilities.
        pred_boxes: ``(R, 4)`` predicted boxes in center/size form.
        target_present: ``(R,)`` binary flags for regions present in the image.
        target_boxes: ``(R, 4)`` target boxes in center/size form (rows for
            absent regions are ignored).
        params: term weights.

    The presence term is the mean binary cross-entropy over *all* regions;
    the L1 and GIoU terms are means over present regions only (and are 0
    when no region is present). GIoU is evaluated on the corner-form
    boxes after clamping to the unit square.
    """
    value, _, _ = _detection_loss_core(
        pred_presence, pred_boxes, target_present, target_boxes, params, want_grads=False
    )
    return value


def fixed_match_detection_loss_grad(
    pred_presence: np.ndarray,
    pred_boxes: np.ndarray,
    target_present: np.ndarray,
    target_boxes: np.ndarray,
    params: DetectionLossParams = DetectionLossParams(),
) -> tuple[DetectionLossValue, np.ndarray, np.ndarray]:
    """Loss value plus gradients w.r.t. ``pred_presence`` and ``pred_boxes``."""
    value, d_pres, d_boxes = _detection_loss_core(
        pred_presence, pred_boxes, target_present, target_boxes, params, want_grads=True
    )
    return value, d_pres, d_boxes


def _detection_loss_core(pred_presence, pred_boxes, target_present, target_boxes, params, want_grads):
    p = np.asarray(pred_presence, dtype=np.float64)
    boxes = np.asarray(pred_boxes, dtype=np.float64)
    present = np.asarray(target_present).astype(bool)
    targets = np.asarray(target_boxes, dtype=np.float64)
    if p.shape[0] != boxes.shape[0] or boxes.shape != targets.shape or p.shape != present.shape:
        raise ValueError("detection loss: region counts of inputs disagree")

    y = present.astype(np.float64)
    bce = _bce(p, y)
    presence_bce = float(np.mean(bce))

    n_pos = int(np.count_nonzero(present))
    d_pres = None
    d_boxes = None
    if want_grads:
        d_pres = params.presence_weight * _bce_grad(p, y) / p.shape[0]
        d_boxes = np.zeros_like(boxes)

    if n_pos == 0:
        l1 = 0.0
        giou_penalty = 0.0
    else:
        diff = boxes[present] - targets[present]
        l1 = float(np.mean(np.sum(np.abs(diff), axis=1)))

        corners_pred, passthrough = center_to_corner_batch(boxes[present])
        corners_tgt, _ = center_to_corner_batch(targets[present])
        g = giou_batch(corners_pred, corners_tgt)
        giou_penalty = float(np.mean(1.0 - g))

        if want_grads:
            d_boxes[present] += params.l1_weight * np.sign(diff) / n_pos
            g_corner, _ = giou_gradient_batch(corners_pred, corners_tgt)
            g_corner = -params.giou_weight * g_corner / n_pos
            g_corner = np.where(passthrough, g_corner, 0.0)
            d_cs = np.empty_like(g_corner)
            d_cs[:, 0] = g_corner[:, 0] + g_corner[:, 2]
            d_cs[:, 1] = g_corner[:, 1] + g_corner[:, 3]
            d_cs[:, 2] = 0.5 * (g_corner[:, 2] - g_corner[:, 0])
            d_cs[:, 3] = 0.5 * (g_corner[:, 3] - g_corner[:, 1])
            d_boxes[present] += d_cs

    total = (
        params.presence_weight * presence_bce
        + params.l1_weight * l1
        + params.giou_weight * giou_penalty
    )
    return DetectionLossValue(total, presence_bce, l1, giou_penalty), d_pres, d_boxes


# ---------------------------------------------------------------------------
# region-level and image-level classification losses
# ---------------------------------------------------------------------------


def loc_loss(
    pathology_probs: np.ndarray,
    anatomy_labels: np.ndarray,
    present: np.ndarray,
    params: AslParams = AslParams(),
) -> float:
    """Mean asymmetric loss over all (present region, class) pairs.

    Zero with a diagnostic when no region is present.
    """
    probs = np.asarray(pathology_probs, dtype=np.float64)
    labels = np.asarray(anatomy_labels, dtype=np.float64)
    mask = np.asarray(present).astype(bool)
    if probs.shape != labels.shape or probs.shape[0] != mask.shape[0]:
        raise ValueError("loc_loss: shapes disagree")
    if not mask.any():
        logger.warning("loc_loss: no present regions, loss defined as 0")
        return 0.0
    return float(np.mean(asl(probs[mask], labels[mask], params)))


def loc_loss_grad(
    pathology_probs: np.ndarray,
    anatomy_labels: np.ndarray,
    present: np.ndarray,
    params: AslParams = AslParams(),
) -> np.ndarray:
    """Gradient of :func:`loc_loss` w.r.t. the probability matrix."""
    probs = np.asarray(pathology_probs, dtype=np.float64)
    labels = np.asarray(anatomy_labels, dtype=np.float64)
    mask = np.asarray(present).astype(bool)
    grad = np.zeros_like(probs)
    if not mask.any():
        return grad
    n = int(np.count_nonzero(mask)) * probs.shape[1]
    grad[mask] = asl_grad(probs[mask], labels[mask], params) / n
    return grad


def mil_loss(
    pathology_probs: np.ndarray,
    image_labels: np.ndarray,
    present: np.ndarray,
    lse: LsePoolParams = LsePoolParams(),
    asl_params: AslParams = AslParams(),
) -> float:
    """Image-level loss: pool per-class probabilities over present regions, then ASL.

    Per class, the present regions' probabilities are aggregated with
    log-sum-exp pooling and the pooled probability is scored against the
    image-level label; the result is the mean over classes. Requires at
    least one present region.
    """
    probs = np.asarray(pathology_probs, dtype=np.float64)
    labels = np.asarray(image_labels, dtype=np.float64)
    mask = np.asarray(present).astype(bool)
    if probs.shape[1] != labels.shape[0] or probs.shape[0] != mask.shape[0]:
        raise ValueError("mil_loss: shapes disagree")
    if not mask.any():
        raise ValueError("mil_loss requires at least one present region")
    pooled, _ = _lse_pool_masked(probs, mask, lse.r)
    return float(np.mean(asl(pooled, labels, asl_params)))


def mil_loss_grad(
    pathology_probs: np.ndarray,
    image_labels: np.ndarray,
    present: np.ndarray,
    lse: LsePoolParams = LsePoolParams(),
    asl_params: AslParams = AslParams(),
) -> np.ndarray:
    """Gradient of :func:`mil_loss` w.r.t. the probability matrix (chain through pooling)."""
    probs = np.asarray(pathology_probs, dtype=np.float64)
    labels = np.asarray(image_labels, dtype=np.float64)
    mask = np.asarray(present).astype(bool)
    if not mask.any():
        raise ValueError("mil_loss requires at least one present region")
    pooled, weights = _lse_pool_masked(probs, mask, lse.r)
    upstream = asl_grad(pooled, labels, asl_params) / labels.shape[0]
    return weights * upstream[None, :]


@dataclass(frozen=True)
class CombinedLossWeights:
    asl_weight: float = 0.01

    def __post_init__(self):
        if self.asl_weight < 0:
            raise ValueError("asl_weight must be >= 0")


def combined_loss(detection: float, asl_like: float, weights: CombinedLossWeights = CombinedLossWeights()) -> float:
    """Detection loss plus the down-weighted classification loss.

    ``asl_like`` may be the region-level loss, the image-level loss, or
    their sum when both supervision signals are used together.
    """
    return detection + weights.asl_weight * asl_like


# ---------------------------------------------------------------------------
# finite-difference verification
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FiniteDifferenceReport:
    """Outcome of a central-difference gradient comparison."""

    max_rel_error: float
    rel_errors: np.ndarray
    nonfinite_coords: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return not self.nonfinite_coords and np.isfinite(self.max_rel_error)


def finite_difference_check(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    analytic: np.ndarray,
    step: float = 1e-5,
) -> FiniteDifferenceReport:
    """Compare an analytic gradient against central finite differences.

    ``f`` maps a parameter vector to a scalar; ``analytic`` is the claimed
    gradient at ``point``. The relative error per coordinate uses
    ``max(|analytic|, |numeric|, 1e-12)`` as denominator. Coordinates where
    an evaluation of ``f`` is non-finite are reported separately and set to
    infinite error.
    """
    x = np.asarray(point, dtype=np.float64)
    a = np.asarray(analytic, dtype=np.float64)
    if x.shape != a.shape or x.ndim != 1:
        raise ValueError("point and analytic gradient must be matching 1-d vectors")
    rel = np.empty_like(x)
    bad: list[int] = []
    for i in range(x.size):
        hi = x.copy()
        lo = x.copy()
        hi[i] += step
        lo[i] -= step
        f_hi = f(hi)
        f_lo = f(lo)
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            bad.append(i)
            rel[i] = np.inf
            continue
        numeric = (f_hi - f_lo) / (2.0 * step)
        denom = max(abs(a[i]), abs(numeric), 1e-12)
        rel[i] = abs(a[i] - numeric) / denom
    return FiniteDifferenceReport(
        max_rel_error=float(np.max(rel)) if rel.size else 0.0,
        rel_errors=rel,
        nonfinite_coords=tuple(bad),
    )
