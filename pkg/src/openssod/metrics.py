"""Detection and OOD-filtering quality against known synthetic ground truth.

Average precision uses a single IoU threshold (default 0.5) with all-point
interpolation; detections with tied scores enter the precision-recall curve
as one block, which keeps the result identical to exhaustive threshold
enumeration. Evaluation is the one place allowed to read the latent
instances of unlabeled scenes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .config import RunConfig
from .geometry import BBox, boxes_to_array, iou_matrix
from .model import Detection, ModelParams, classify, raw_detections
from .ood import ood_scores
from .world import FeatureOracle, Scene

AP_IOU_THRESHOLD = 0.5
PSEUDO_MATCH_IOU = 0.5


def average_precision(
    dets: Sequence[tuple[int, BBox, float]],
    gts: Sequence[tuple[int, BBox]],
    iou_threshold: float = AP_IOU_THRESHOLD,
) -> float:
    """AP for one class over a set of scenes.

    ``dets`` are (scene_id, box, score); ``gts`` are (scene_id, box).
    Detections are matched greedily in descending-score order, each to at
    most one unmatched gt of the same scene (highest IoU wins, gt index
    breaks ties). With no gt the AP is 0 by definition.
    """
    scores = np.array([s for _, _, s in dets], dtype=float)
    if scores.size and not np.all(np.isfinite(scores)):
        raise ValueError("detection scores must be finite")
    n_gt = len(gts)
    if n_gt == 0 or len(dets) == 0:
        return 0.0

    by_scene: dict[int, list[int]] = {}
    for gi, (scene_id, _) in enumerate(gts):
        by_scene.setdefault(scene_id, []).append(gi)
    gt_boxes = boxes_to_array([b for _, b in gts])
    matched = np.zeros(n_gt, dtype=bool)

    order = np.lexsort((np.arange(len(dets)), -scores))
    tp = np.zeros(len(dets), dtype=bool)
    for rank, di in enumerate(order):
        scene_id, box, _ = dets[di]
        best_gi, best_iou = -1, 0.0
        for gi in by_scene.get(scene_id, ()):
            if matched[gi]:
                continue
            overlap = iou_matrix(box.as_array(), gt_boxes[gi])[0, 0]
            if overlap >= iou_threshold and overlap > best_iou:
                best_gi, best_iou = gi, overlap
        if best_gi >= 0:
            matched[best_gi] = True
            tp[rank] = True

    # One PR point per distinct score value (tied detections enter together).
    sorted_scores = scores[order]
    boundaries = np.flatnonzero(np.diff(sorted_scores) != 0.0)
    ends = np.append(boundaries, len(order) - 1)
    cum_tp = np.cumsum(tp)
    recalls = cum_tp[ends] / n_gt
    precisions = cum_tp[ends] / (ends + 1.0)

    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recalls, envelope):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def mean_ap(per_class: Sequence[float]) -> float:
    """Arithmetic mean of per-class APs (caller passes classes with gt only)."""
    if len(per_class) == 0:
        raise ValueError("mean_ap needs at least one evaluable class")
    return float(np.mean(per_class))


def ood_auroc(scores: Sequence[tuple[float, bool]]) -> float:
    """Probability a random ID instance outscores a random OOD one; ties count half."""
    values = np.array([s for s, _ in scores], dtype=float)
    labels = np.array([bool(flag) for _, flag in scores], dtype=bool)
    n_pos = int(labels.sum())
    n_neg = int(len(labels) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ood_auroc needs both ID and OOD samples")
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values), dtype=float)
    i = 0
    sorted_vals = values[order]
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0  # average rank, 1-based
        i = j + 1
    pos_rank_sum = ranks[labels].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def pseudo_label_quality(
    pairs: Sequence[tuple[Scene, "PseudoLabelSetLike"]], id_class_count: int
) -> tuple[float, float, bool]:
    """Precision/recall of the filtered pseudo labels against hidden gt.

    A pseudo label is correct iff some same-class ID instance in its scene
    overlaps it with IoU >= 0.5; an ID instance is recalled iff some filtered
    pseudo label does the same. Returns (precision, recall, precision_defined);
    with no filtered labels precision is reported as 0 with the flag cleared.
    """
    n_filtered = 0
    n_correct = 0
    n_gt = 0
    n_recalled = 0
    for scene, pseudo in pairs:
        boxes = scene.instance_boxes()
        classes = scene.instance_classes()
        id_mask = classes < id_class_count
        n_gt += int(id_mask.sum())
        dets = [pseudo.detections[i] for i in pseudo.filtered]
        n_filtered += len(dets)
        if len(dets) and len(classes):
            det_boxes = boxes_to_array([d.box for d in dets])
            det_classes = np.array([d.class_id for d in dets], dtype=int)
            overlaps = iou_matrix(det_boxes, boxes)
            same_class = det_classes[:, None] == classes[None, :]
            hits = (overlaps >= PSEUDO_MATCH_IOU) & same_class & id_mask[None, :]
            n_correct += int(hits.any(axis=1).sum())
            n_recalled += int(hits.any(axis=0)[id_mask].sum())
    precision_defined = n_filtered > 0
    precision = n_correct / n_filtered if precision_defined else 0.0
    recall = n_recalled / n_gt if n_gt else 0.0
    return float(precision), float(recall), precision_defined


@dataclass
class MetricsRecord:
    """One evaluation snapshot of the teacher model."""

    iteration: int
    map: float
    per_class_ap: list[float]  # NaN where the class had no eval gt
    ood_auroc: float  # NaN when the eval pool is single-label
    pseudo_precision: float
    pseudo_precision_defined: bool
    pseudo_recall: float
    loss_sup_det: float
    loss_unsup_det: float
    loss_ood_sup: float
    loss_ood_unsup: float
    loss_total: float
    pseudo_accepted: int
    pseudo_ignored: int
    pseudo_rejected: int

    def to_dict(self) -> dict:
        return {
            "iteration": self.iteration,
            "map": self.map,
            "per_class_ap": list(self.per_class_ap),
            "ood_auroc": self.ood_auroc,
            "pseudo_precision": self.pseudo_precision,
            "pseudo_precision_defined": self.pseudo_precision_defined,
            "pseudo_recall": self.pseudo_recall,
            "loss_sup_det": self.loss_sup_det,
            "loss_unsup_det": self.loss_unsup_det,
            "loss_ood_sup": self.loss_ood_sup,
            "loss_ood_unsup": self.loss_ood_unsup,
            "loss_total": self.loss_total,
            "pseudo_accepted": self.pseudo_accepted,
            "pseudo_ignored": self.pseudo_ignored,
            "pseudo_rejected": self.pseudo_rejected,
        }


CSV_BASE_COLUMNS = [
    "iteration",
    "map",
    "ood_auroc",
    "pseudo_precision",
    "pseudo_precision_defined",
    "pseudo_recall",
    "loss_sup_det",
    "loss_unsup_det",
    "loss_ood_sup",
    "loss_ood_unsup",
    "loss_total",
    "pseudo_accepted",
    "pseudo_ignored",
    "pseudo_rejected",
]


def csv_header(num_id_classes: int) -> str:
    return ",".join(CSV_BASE_COLUMNS + [f"ap_{c}" for c in range(num_id_classes)])


def record_to_csv_row(record: MetricsRecord) -> str:
    cells = [
        str(record.iteration),
        repr(record.map),
        repr(record.ood_auroc),
        repr(record.pseudo_precision),
        str(int(record.pseudo_precision_defined)),
        repr(record.pseudo_recall),
        repr(record.loss_sup_det),
        repr(record.loss_unsup_det),
        repr(record.loss_ood_sup),
        repr(record.loss_ood_unsup),
        repr(record.loss_total),
        str(record.pseudo_accepted),
        str(record.pseudo_ignored),
        str(record.pseudo_rejected),
    ]
    cells += [repr(ap) for ap in record.per_class_ap]
    return ",".join(cells)


def records_to_csv(records: Sequence[MetricsRecord]) -> str:
    if not records:
        raise ValueError("no records to serialize")
    n = len(records[0].per_class_ap)
    lines = [csv_header(n)] + [record_to_csv_row(r) for r in records]
    return "\n".join(lines) + "\n"


def summary_dict(records: Sequence[MetricsRecord], config_hash: str) -> dict:
    """JSON summary of a run: its final and its best-mAP evaluation."""
    if not records:
        raise ValueError("no records to summarize")
    best = max(records, key=lambda r: (r.map, -r.iteration))
    return {
        "config_hash": config_hash,
        "evaluations": len(records),
        "final": records[-1].to_dict(),
        "best": best.to_dict(),
    }


def scene_detections(
    params: ModelParams,
    scene: Scene,
    oracle: FeatureOracle,
    config: RunConfig,
    rng_proposals: np.random.Generator,
    rng_noise: np.random.Generator,
) -> list[Detection]:
    """All post-NMS detections of one scene (no confidence cut), OOD score filled."""
    from .trainer import scene_proposals

    proposals = scene_proposals(scene, config, rng_proposals)
    feats = oracle.features(scene, proposals, config.trainer.weak_noise, rng_noise)
    boxes, classes, scores, src = raw_detections(
        params, proposals, feats, config.trainer.nms_threshold
    )
    if len(src) == 0:
        return []
    ood = ood_scores(
        config.trainer.scorer, params, feats[src], classes, config.trainer.energy_temperature
    )
    return [
        Detection(BBox(*boxes[i]), int(classes[i]), float(scores[i]), float(ood[i]))
        for i in range(len(src))
    ]


def evaluate_model(
    teacher: ModelParams,
    eval_scenes: Sequence[Scene],
    unlabeled_eval: Sequence[Scene],
    pseudo_pairs: Sequence[tuple[Scene, "PseudoLabelSetLike"]],
    oracle: FeatureOracle,
    config: RunConfig,
    iteration: int,
    stats,
) -> MetricsRecord:
    """Score the teacher: mAP on held-out ID scenes, OOD AUROC and pseudo-label
    quality on (a deterministic sample of) the unlabeled pool."""
    from .trainer import Stream, stream_rng

    cfg = config.trainer
    n_classes = teacher.num_id_classes

    dets_by_class: dict[int, list[tuple[int, BBox, float]]] = {c: [] for c in range(n_classes)}
    gts_by_class: dict[int, list[tuple[int, BBox]]] = {c: [] for c in range(n_classes)}
    for scene in eval_scenes:
        dets = scene_detections(
            teacher,
            scene,
            oracle,
            config,
            stream_rng(cfg.seed, Stream.EVAL, iteration, scene.scene_id, 2),
            stream_rng(cfg.seed, Stream.EVAL, iteration, scene.scene_id, 3),
        )
        for det in dets:
            dets_by_class[det.class_id].append((scene.scene_id, det.box, det.cls_score))
        for inst in scene.instances:
            if inst.class_id < n_classes:
                gts_by_class[inst.class_id].append((scene.scene_id, inst.box))

    per_class_ap: list[float] = []
    evaluable: list[float] = []
    for c in range(n_classes):
        if gts_by_class[c]:
            ap = average_precision(dets_by_class[c], gts_by_class[c], AP_IOU_THRESHOLD)
            per_class_ap.append(ap)
            evaluable.append(ap)
        else:
            per_class_ap.append(math.nan)
    map_value = mean_ap(evaluable)

    pairs: list[tuple[float, bool]] = []
    for scene in unlabeled_eval:
        if not scene.instances:
            continue
        boxes = scene.instance_boxes()
        feats = oracle.features(
            scene, boxes, 0.0, stream_rng(cfg.seed, Stream.EVAL, iteration, scene.scene_id, 4)
        )
        probs = classify(teacher, feats)
        pred = probs[:, :n_classes].argmax(axis=1)
        scores = ood_scores(cfg.scorer, teacher, feats, pred, cfg.energy_temperature)
        is_id = scene.instance_classes() < n_classes
        pairs.extend((float(s), bool(flag)) for s, flag in zip(scores, is_id))
    try:
        auroc = ood_auroc(pairs)
    except ValueError:
        auroc = math.nan  # single-label pool (e.g. pure-ID unlabeled data)

    precision, recall, defined = pseudo_label_quality(pseudo_pairs, n_classes)

    return MetricsRecord(
        iteration=iteration,
        map=map_value,
        per_class_ap=per_class_ap,
        ood_auroc=auroc,
        pseudo_precision=precision,
        pseudo_precision_defined=defined,
        pseudo_recall=recall,
        loss_sup_det=stats.parts.sup_det,
        loss_unsup_det=stats.parts.unsup_det,
        loss_ood_sup=stats.parts.ood_sup,
        loss_ood_unsup=stats.parts.ood_unsup,
        loss_total=stats.total,
        pseudo_accepted=stats.pseudo_accepted,
        pseudo_ignored=stats.pseudo_ignored,
        pseudo_rejected=stats.pseudo_rejected,
    )
