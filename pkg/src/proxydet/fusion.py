"""Weighted box fusion: merge overlapping same-class boxes by score-weighted averaging.

Unlike NMS, which discards all but the best box of a cluster, fusion
averages the coordinates of every cluster member using the box scores as
weights, and averages the scores. Clusters are grown greedily in score
order: each incoming box is compared against the *current fused box* of
every existing cluster and joins the best-overlapping cluster above the
IoU threshold, else opens a new one.
"""

from __future__ import annotations

from dataclasses import dataclass

from .geometry import Box, iou


@dataclass(frozen=True)
class ScoredBox:
    """A box with a confidence score and its ordinal in the input list.

    ``source_index`` breaks score ties deterministically; it carries no
    meaning beyond input position.
    """

    box: Box
    score: float
    source_index: int

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class FusionConfig:
    iou_threshold: float = 0.03
    score_rescale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValueError(f"iou_threshold {self.iou_threshold} outside [0, 1]")


class _Cluster:
    """Mutable accumulator for one fusion cluster."""

    __slots__ = ("members", "fused_box")

    def __init__(self, first: ScoredBox):
        self.members: list[ScoredBox] = [first]
        self.fused_box: Box = first.box

    def add(self, member: ScoredBox) -> None:
        self.members.append(member)
        self.fused_box = self._weighted_box()

    def _weighted_box(self) -> Box:
        total = sum(m.score for m in self.members)
        coords = []
        for i in range(4):
            vals = [m.box.as_tuple()[i] for m in self.members]
            if total > 0.0:
                v = sum(m.score * x for m, x in zip(self.members, vals)) / total
            else:
                # all-zero scores: fall back to the plain mean
                v = sum(vals) / len(vals)
            # clip into the members' coordinate range: enforces the convex
            # combination exactly despite floating-point rounding
            v = min(max(v, min(vals)), max(vals))
            coords.append(v)
        return Box(*coords)

    def fused_score(self, n_input: int, rescale: bool) -> float:
        scores = [m.score for m in self.members]
        s = sum(scores) / len(scores)
        s = min(max(s, min(scores)), max(scores))
        if rescale:
            # the reference algorithm's cluster-size rescale; T is taken as
            # the number of input boxes since there is a single source model
            s *= min(len(scores), n_input) / n_input
        return s


def weighted_box_fusion(boxes: list[ScoredBox], cfg: FusionConfig) -> list[ScoredBox]:
    """Fuse overlapping boxes of one class into score-weighted averages.

    Boxes are processed in score-descending order (ties broken by
    ``source_index`` ascending). A box joins the existing cluster whose
    current fused box has the highest IoU with it, provided that IoU
    strictly exceeds ``cfg.iou_threshold``; otherwise it starts a new
    cluster. Each output box carries the cluster's score-weighted average
    coordinates and the arithmetic mean of member scores (optionally
    rescaled by cluster size when ``cfg.score_rescale`` is on).

    Returns one box per cluster, sorted score-descending. Empty input
    yields empty output. Fused coordinates are convex combinations of the
    members' coordinates and fused scores lie within the members' score
    range (rescale off).
    """
    if not boxes:
        return []
    ordered = sorted(boxes, key=lambda sb: (-sb.score, sb.source_index))
    clusters: list[_Cluster] = []
    for sb in ordered:
        best_iou = cfg.iou_threshold
        best: _Cluster | None = None
        for cluster in clusters:
            overlap = iou(sb.box, cluster.fused_box)
            if overlap > best_iou:
                best_iou = overlap
                best = cluster
        if best is None:
            clusters.append(_Cluster(sb))
        else:
            best.add(sb)

    fused = [
        ScoredBox(
            box=c.fused_box,
            score=c.fused_score(len(boxes), cfg.score_rescale),
            source_index=c.members[0].source_index,
        )
        for c in clusters
    ]
    fused.sort(key=lambda sb: (-sb.score, sb.source_index))
    return fused
