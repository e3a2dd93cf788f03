"""Independent oracles and small utilities shared by the test modules.

Everything here is deliberately written from first principles (pixel
counting, exhaustive enumeration, rank statistics) so it stays
independent of the library code it checks.
"""

from __future__ import annotations

import numpy as np

from proxydet.geometry import Box


def raster_masks(a: Box, b: Box, res: int) -> tuple[np.ndarray, np.ndarray]:
    def mask(box: Box) -> np.ndarray:
        g = np.zeros((res, res), dtype=bool)
        x1 = int(round(box.x1 * res))
        y1 = int(round(box.y1 * res))
        x2 = int(round(box.x2 * res))
        y2 = int(round(box.y2 * res))
        g[y1:y2, x1:x2] = True
        return g

    return mask(a), mask(b)


def raster_iou(a: Box, b: Box, res: int = 500) -> float:
    """Pixel-counting IoU; exact when corners are multiples of 1/res."""
    ma, mb = raster_masks(a, b, res)
    union = int(np.count_nonzero(ma | mb))
    if union == 0:
        return 0.0
    return int(np.count_nonzero(ma & mb)) / union


def raster_giou(a: Box, b: Box, res: int = 500) -> float:
    """Pixel-counting GIoU; exact when corners are multiples of 1/res."""
    ma, mb = raster_masks(a, b, res)
    inter = int(np.count_nonzero(ma & mb))
    union = int(np.count_nonzero(ma | mb))
    enclosing_box = Box(
        min(a.x1, b.x1), min(a.y1, b.y1), max(a.x2, b.x2), max(a.y2, b.y2)
    )
    enc_mask, _ = raster_masks(enclosing_box, enclosing_box, res)
    enc = int(np.count_nonzero(enc_mask))
    return inter / union - (enc - union) / enc


def grid_box(rng: np.random.Generator, res: int = 500, min_cells: int = 1) -> Box:
    """Random box whose corners are multiples of 1/res."""
    x1 = int(rng.integers(0, res - min_cells))
    x2 = int(rng.integers(x1 + min_cells, res + 1))
    y1 = int(rng.integers(0, res - min_cells))
    y2 = int(rng.integers(y1 + min_cells, res + 1))
    return Box(x1 / res, y1 / res, x2 / res, y2 / res)


def random_box(rng: np.random.Generator, min_size: float = 0.0) -> Box:
    while True:
        x = np.sort(rng.uniform(0.0, 1.0, size=2))
        y = np.sort(rng.uniform(0.0, 1.0, size=2))
        if x[1] - x[0] >= min_size and y[1] - y[0] >= min_size:
            return Box(x[0], y[0], x[1], y[1])


def iou_ref(a: Box, b: Box) -> float:
    """Straight-line IoU used to sanity-check fusion/inference compositions."""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(0.0, iw) * max(0.0, ih)
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def ap_oracle(
    predictions: list[tuple[str, Box, float]],
    gt_boxes: dict[str, Box],
    iou_threshold: float,
) -> float | None:
    """Brute-force all-point-interpolated AP, straight from the definition.

    For every true-positive rank, scans *all* prefixes to find the maximum
    precision at recall >= that rank's recall (O(n^2) on purpose).
    """
    n_gt = len(gt_boxes)
    if n_gt == 0:
        return None
    if not predictions:
        return 0.0
    ranked = sorted(predictions, key=lambda t: (-t[2], t[0]))
    hits = [
        image_id in gt_boxes and iou_ref(box, gt_boxes[image_id]) >= iou_threshold
        for image_id, box, _ in ranked
    ]
    n = len(ranked)
    ap = 0.0
    prev_recall = 0.0
    for k in range(n):
        if not hits[k]:
            continue
        recall_k = sum(hits[: k + 1]) / n_gt
        best = 0.0
        for j in range(n):
            recall_j = sum(hits[: j + 1]) / n_gt
            if recall_j >= recall_k:
                best = max(best, sum(hits[: j + 1]) / (j + 1))
        ap += (recall_k - prev_recall) * best
        prev_recall = recall_k
    return ap


def auroc(scores, labels) -> float:
    """Rank-statistic AUROC (Mann-Whitney)."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    n_pos = int(labels.sum())
    n_neg = int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))
