"""Bounding-box arithmetic: IoU, NMS, IoU-band label assignment, offset coding.

Boxes are closed axis-aligned rectangles in continuous coordinates; there is
no pixel grid. Scenes live in the unit square, but nothing here assumes it
except the clipping helpers, which take an explicit extent.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

# Floor on box side lengths after clipping, to keep offset encoding finite.
MIN_BOX_SIZE = 1e-4


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box with x_min <= x_max and y_min <= y_max."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max and self.y_min <= self.y_max):
            raise ValueError(f"degenerate box corners: {self}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=float)


class LabelKind(Enum):
    FOREGROUND = "foreground"
    BACKGROUND = "background"
    IGNORED = "ignored"


@dataclass(frozen=True)
class ProposalLabel:
    """Outcome of IoU-band assignment for one proposal.

    ``class_id`` and ``matched_gt`` are set iff the proposal is foreground.
    """

    kind: LabelKind
    class_id: Optional[int] = None
    matched_gt: Optional[int] = None

    def __post_init__(self):
        is_fg = self.kind is LabelKind.FOREGROUND
        if is_fg != (self.class_id is not None) or is_fg != (self.matched_gt is not None):
            raise ValueError("class_id/matched_gt present iff foreground")


def boxes_to_array(boxes: Sequence[BBox]) -> np.ndarray:
    """Stack boxes into an (N, 4) float array in x_min,y_min,x_max,y_max order."""
    if len(boxes) == 0:
        return np.zeros((0, 4), dtype=float)
    return np.array([[b.x_min, b.y_min, b.x_max, b.y_max] for b in boxes], dtype=float)


def array_to_boxes(arr: np.ndarray) -> list[BBox]:
    return [BBox(*row) for row in np.asarray(arr, dtype=float)]


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) box arrays.

    Pairs whose union has zero area get IoU 0.
    """
    a = np.asarray(a, dtype=float).reshape(-1, 4)
    b = np.asarray(b, dtype=float).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[:, :, 0] * wh[:, :, 1]
    union = area_a[:, None] + area_b[None, :] - inter
    # inter <= union always, so a zero union implies a zero intersection
    return inter / np.maximum(union, 1e-300)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes; 0 when the union has zero area."""
    return float(iou_matrix(a.as_array(), b.as_array())[0, 0])


def nms_arrays(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float) -> list[int]:
    """Greedy NMS over an (N, 4) array; returns kept indices in suppression order.

    A box is dropped iff it overlaps an already-kept box with IoU strictly
    above the threshold. Score ties are broken by input index.
    """
    boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
    scores = np.asarray(scores, dtype=float).reshape(-1)
    if not np.all(np.isfinite(scores)):
        raise ValueError("nms requires finite scores")
    order = np.lexsort((np.arange(len(scores)), -scores))
    kept: list[int] = []
    if len(order) == 0:
        return kept
    kept_boxes = np.zeros((0, 4), dtype=float)
    for idx in order:
        if kept_boxes.shape[0] == 0:
            kept.append(int(idx))
            kept_boxes = boxes[idx : idx + 1]
            continue
        overlaps = iou_matrix(boxes[idx : idx + 1], kept_boxes)[0]
        if np.all(overlaps <= iou_threshold):
            kept.append(int(idx))
            kept_boxes = np.vstack([kept_boxes, boxes[idx : idx + 1]])
    return kept


def nms(dets: Sequence[tuple[BBox, float]], iou_threshold: float) -> list[int]:
    """Greedy descending-score suppression over (box, score) pairs."""
    boxes = boxes_to_array([d[0] for d in dets])
    scores = np.array([d[1] for d in dets], dtype=float)
    return nms_arrays(boxes, scores, iou_threshold)


# Codes used by the array form of label assignment.
FG, BG, IGNORE = 0, 1, 2


def assign_label_codes(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    fg_iou: float,
    bg_iou: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized IoU-band assignment.

    Returns (codes, classes, matched): codes in {FG, BG, IGNORE}; classes
    holds the matched gt class for FG rows (-1 elsewhere); matched holds the
    gt index for FG rows (-1 elsewhere). Same rules as
    :func:`assign_proposal_labels`.
    """
    if not fg_iou > bg_iou:
        raise ValueError("fg_iou must exceed bg_iou")
    proposals = np.asarray(proposals, dtype=float).reshape(-1, 4)
    n = proposals.shape[0]
    if gt_boxes.shape[0] == 0:
        return np.full(n, BG), np.full(n, -1), np.full(n, -1)
    overlaps = iou_matrix(proposals, gt_boxes)
    best = overlaps.argmax(axis=1)  # ties -> lowest gt index
    best_iou = overlaps[np.arange(n), best]
    codes = np.full(n, IGNORE)
    codes[best_iou > fg_iou] = FG
    codes[best_iou < bg_iou] = BG
    classes = np.where(codes == FG, np.asarray(gt_classes, dtype=int)[best], -1)
    matched = np.where(codes == FG, best, -1)
    return codes, classes, matched


def assign_labels_arrays(
    proposals: np.ndarray,
    gt_boxes: np.ndarray,
    gt_classes: np.ndarray,
    fg_iou: float,
    bg_iou: float,
) -> list[ProposalLabel]:
    """IoU-band assignment on array inputs; see :func:`assign_proposal_labels`."""
    codes, classes, matched = assign_label_codes(proposals, gt_boxes, gt_classes, fg_iou, bg_iou)
    kinds = {FG: LabelKind.FOREGROUND, BG: LabelKind.BACKGROUND, IGNORE: LabelKind.IGNORED}
    return [
        ProposalLabel(
            kinds[int(c)],
            class_id=int(classes[i]) if c == FG else None,
            matched_gt=int(matched[i]) if c == FG else None,
        )
        for i, c in enumerate(codes)
    ]


def assign_proposal_labels(
    proposals: Sequence[BBox],
    gt: Sequence[tuple[BBox, int]],
    fg_iou: float,
    bg_iou: float,
) -> list[ProposalLabel]:
    """Label each proposal by its max IoU m against ground truth.

    m > fg_iou  -> foreground with the argmax gt's class (ties: lowest index);
    m < bg_iou  -> background;
    otherwise   -> ignored. Boundary-equal overlaps land in ignored.
    An empty gt list makes every proposal background.
    """
    gt_boxes = boxes_to_array([g[0] for g in gt])
    gt_classes = np.array([g[1] for g in gt], dtype=int)
    return assign_labels_arrays(boxes_to_array(proposals), gt_boxes, gt_classes, fg_iou, bg_iou)


def clip_boxes(arr: np.ndarray, extent: float = 1.0) -> np.ndarray:
    """Clip an (N, 4) array into [0, extent]^2, enforcing a minimum side length."""
    arr = np.clip(np.asarray(arr, dtype=float).reshape(-1, 4), 0.0, extent)
    out = arr.copy()
    out[:, [0, 1]] = np.minimum(arr[:, [0, 1]], arr[:, [2, 3]])
    out[:, [2, 3]] = np.maximum(arr[:, [0, 1]], arr[:, [2, 3]])
    # Grow degenerate boxes inward from the nearest border.
    for lo, hi in ((0, 2), (1, 3)):
        thin = out[:, hi] - out[:, lo] < MIN_BOX_SIZE
        out[thin, hi] = np.minimum(out[thin, lo] + MIN_BOX_SIZE, extent)
        out[thin, lo] = out[thin, hi] - MIN_BOX_SIZE
    return out


def encode_offsets(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Center/log-size offsets (dx, dy, dw, dh) mapping each anchor onto its target."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 4)
    targets = np.asarray(targets, dtype=float).reshape(-1, 4)
    aw = np.maximum(anchors[:, 2] - anchors[:, 0], MIN_BOX_SIZE)
    ah = np.maximum(anchors[:, 3] - anchors[:, 1], MIN_BOX_SIZE)
    acx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    acy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    tw = np.maximum(targets[:, 2] - targets[:, 0], MIN_BOX_SIZE)
    th = np.maximum(targets[:, 3] - targets[:, 1], MIN_BOX_SIZE)
    tcx = 0.5 * (targets[:, 0] + targets[:, 2])
    tcy = 0.5 * (targets[:, 1] + targets[:, 3])
    return np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)], axis=1
    )


def apply_offsets(anchors: np.ndarray, offsets: np.ndarray, extent: float = 1.0) -> np.ndarray:
    """Decode (dx, dy, dw, dh) offsets against anchors and clip to the extent."""
    anchors = np.asarray(anchors, dtype=float).reshape(-1, 4)
    offsets = np.asarray(offsets, dtype=float).reshape(-1, 4)
    aw = np.maximum(anchors[:, 2] - anchors[:, 0], MIN_BOX_SIZE)
    ah = np.maximum(anchors[:, 3] - anchors[:, 1], MIN_BOX_SIZE)
    acx = 0.5 * (anchors[:, 0] + anchors[:, 2])
    acy = 0.5 * (anchors[:, 1] + anchors[:, 3])
    cx = acx + offsets[:, 0] * aw
    cy = acy + offsets[:, 1] * ah
    # exp clamp keeps runaway early-training offsets from producing inf sizes
    w = aw * np.exp(np.clip(offsets[:, 2], -8.0, 8.0))
    h = ah * np.exp(np.clip(offsets[:, 3], -8.0, 8.0))
    raw = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    return clip_boxes(raw, extent)
