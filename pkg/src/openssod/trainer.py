"""The online open-set semi-supervised training loop.

Burn-in on labeled data, teacher initialization, then joint iterations:
pseudo-label generation by the teacher on weakly-noised features,
dual-threshold filtering (classification confidence, then OOD confidence),
three-band mining of OOD-head targets from unlabeled data, one combined
gradient step on the student, and an EMA update of the teacher.

Randomness is split into named streams, each re-derived per iteration (and
per scene where applicable) from the run seed, so no component's draw count
can perturb any other component.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Optional, Sequence

import numpy as np

from .config import RunConfig
from .geometry import (
    BG,
    FG,
    IGNORE,
    BBox,
    LabelKind,
    ProposalLabel,
    assign_label_codes,
    boxes_to_array,
    encode_offsets,
    iou_matrix,
)
from .model import (
    Detection,
    DetectionBatch,
    Head,
    ModelParams,
    OVAParams,
    add_params,
    init_model_params,
    map_params,
    named_arrays,
    raw_detections,
    sgd_step,
    supervised_detection_loss,
    unsupervised_detection_loss,
)
from .ood import binary_head_loss, ood_scores, ova_batch_loss, scorer_spec
from .world import (
    DatasetSplits,
    FeatureOracle,
    Scene,
    proposal_array,
    training_annotations,
)


class Stream(IntEnum):
    """Independent RNG stream families; ids feed the seed sequence."""

    INIT = 0
    DATA = 1
    PROPOSALS = 2
    NOISE = 3
    SAMPLING = 4
    EVAL = 5


def stream_rng(seed: int, stream: Stream, *keys: int) -> np.random.Generator:
    """Generator for one named stream, optionally keyed by iteration/scene."""
    return np.random.default_rng([int(seed), int(stream), *(int(k) for k in keys)])


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class LossParts:
    """The four loss components of one optimizer step."""

    sup_det: float = 0.0
    unsup_det: float = 0.0
    ood_sup: float = 0.0
    ood_unsup: float = 0.0

    def total(self, lambda_unsup: float, lambda_ood: float) -> float:
        return (
            self.sup_det
            + lambda_unsup * self.unsup_det
            + self.ood_sup
            + lambda_ood * self.ood_unsup
        )


@dataclass
class StepStats:
    parts: LossParts
    total: float
    pseudo_accepted: int = 0
    pseudo_ignored: int = 0
    pseudo_rejected: int = 0
    pseudo_filtered: int = 0


@dataclass
class PseudoLabelSet:
    """Teacher detections that passed tau, with their OOD-band partition.

    Indices refer into ``detections``. ``accepted_id`` holds scores at or
    above tau_ood, ``rejected_ood`` scores below 0.5, ``ignored`` the band in
    between (a score of exactly 0.5 is ignored, not rejected). ``filtered``
    is the tau_prime-thresholded subset used for the detection losses.
    """

    detections: list[Detection] = field(default_factory=list)
    accepted_id: list[int] = field(default_factory=list)
    ignored: list[int] = field(default_factory=list)
    rejected_ood: list[int] = field(default_factory=list)
    filtered: list[int] = field(default_factory=list)

    def boxes(self, indices: Sequence[int]) -> np.ndarray:
        return boxes_to_array([self.detections[i].box for i in indices])

    def classes(self, indices: Sequence[int]) -> np.ndarray:
        return np.array([self.detections[i].class_id for i in indices], dtype=int)


def _num_random(config: RunConfig, scene: Scene) -> int:
    used = config.trainer.per_gt_copies * len(scene.instances)
    return max(0, config.trainer.proposals_per_image - used)


def scene_proposals(scene: Scene, config: RunConfig, rng: np.random.Generator) -> np.ndarray:
    """(P, 4) proposal boxes for one scene under the configured RPN surrogate."""
    return proposal_array(
        scene,
        config.trainer.jitter_scale,
        _num_random(config, scene),
        rng,
        per_gt_copies=config.trainer.per_gt_copies,
        random_size_range=(config.world.box_min, config.world.box_max),
    )


def generate_pseudo_labels(
    teacher: ModelParams,
    scene: Scene,
    oracle: FeatureOracle,
    config: RunConfig,
    rng_proposals: np.random.Generator,
    rng_noise: np.random.Generator,
) -> tuple[PseudoLabelSet, np.ndarray]:
    """Run the teacher on weakly-noised proposal features of one unlabeled scene.

    Proposals are scored, regressed, suppressed, thresholded at tau, and the
    survivors banded by their OOD score. Returns the pseudo-label set plus
    the (P, 4) proposal array so the student pass can reuse it.
    """
    cfg = config.trainer
    proposals = scene_proposals(scene, config, rng_proposals)
    feats = oracle.features(scene, proposals, cfg.weak_noise, rng_noise)
    boxes, classes, scores, src = raw_detections(teacher, proposals, feats, cfg.nms_threshold)
    keep = scores >= cfg.tau
    boxes, classes, scores, src = boxes[keep], classes[keep], scores[keep], src[keep]

    pseudo = PseudoLabelSet()
    if len(src):
        ood = ood_scores(cfg.scorer, teacher, feats[src], classes, cfg.energy_temperature)
        for i in range(len(src)):
            pseudo.detections.append(
                Detection(BBox(*boxes[i]), int(classes[i]), float(scores[i]), float(ood[i]))
            )
            if ood[i] >= cfg.tau_ood:
                pseudo.accepted_id.append(i)
            elif ood[i] < 0.5:
                pseudo.rejected_ood.append(i)
            else:
                pseudo.ignored.append(i)
            if ood[i] >= cfg.tau_prime:
                pseudo.filtered.append(i)
    return pseudo, proposals


def build_ood_targets_unlabeled(
    proposals: Sequence[BBox] | np.ndarray,
    pseudo: PseudoLabelSet,
    config: RunConfig,
) -> list[tuple[int, int]]:
    """OOD-head targets mined from one scene's pseudo labels.

    Each proposal is matched to its highest-IoU pseudo instance; matches
    above fg_iou to an accepted-ID instance become that class, matches to a
    rejected instance become background. Ignored-band matches and unmatched
    proposals emit nothing: no background sampling happens on unlabeled data.
    """
    parr = proposals if isinstance(proposals, np.ndarray) else boxes_to_array(list(proposals))
    if not pseudo.detections or parr.shape[0] == 0:
        return []
    det_boxes = pseudo.boxes(range(len(pseudo.detections)))
    band = np.zeros(len(pseudo.detections), dtype=int)  # 0 accepted, 1 ignored, 2 rejected
    band[pseudo.ignored] = 1
    band[pseudo.rejected_ood] = 2

    overlaps = iou_matrix(parr, det_boxes)
    best = overlaps.argmax(axis=1)
    best_iou = overlaps[np.arange(parr.shape[0]), best]
    background = config.world.num_id_classes
    out: list[tuple[int, int]] = []
    for i in np.flatnonzero(best_iou > config.trainer.fg_iou):
        j = best[i]
        if band[j] == 0:
            out.append((int(i), pseudo.detections[j].class_id))
        elif band[j] == 2:
            out.append((int(i), background))
    return out


def _subsample_codes(codes: np.ndarray, budget: int, rng: np.random.Generator) -> np.ndarray:
    if budget < 1:
        raise ValueError("budget must be at least 1")
    fg = np.flatnonzero(codes == FG)
    bg = np.flatnonzero(codes == BG)
    if len(fg) >= budget:
        return np.sort(rng.choice(fg, size=budget, replace=False))
    fill = min(budget - len(fg), len(bg))
    picked = rng.choice(bg, size=fill, replace=False) if fill else np.zeros(0, dtype=int)
    return np.sort(np.concatenate([fg, picked]).astype(int))


def subsample_ood_batch(
    labels: Sequence[ProposalLabel], budget: int, rng: np.random.Generator
) -> list[int]:
    """Pick OOD-head training rows, keeping every foreground proposal first.

    Foreground indices are only truncated (uniformly) when they alone exceed
    the budget; the remainder fills with uniformly sampled background rows.
    Ignored proposals are never selected.
    """
    codes = np.array(
        [FG if l.kind is LabelKind.FOREGROUND else BG if l.kind is LabelKind.BACKGROUND else IGNORE for l in labels],
        dtype=int,
    )
    return [int(i) for i in _subsample_codes(codes, budget, rng)]


@dataclass
class _SceneRows:
    detection: DetectionBatch
    ood_features: np.ndarray
    ood_targets: np.ndarray


def _detection_rows(
    parr: np.ndarray,
    feats: np.ndarray,
    codes: np.ndarray,
    classes: np.ndarray,
    matched: np.ndarray,
    gt_boxes: np.ndarray,
    background: int,
    config: RunConfig,
    rng: np.random.Generator,
) -> DetectionBatch:
    fg_rows = np.flatnonzero(codes == FG)
    bg_rows = np.flatnonzero(codes == BG)
    # Standard foreground/background rebalancing: all fg rows, capped bg rows,
    # so the softmax is not drowned by easy background proposals.
    cap = max(config.trainer.det_bg_floor, int(config.trainer.det_bg_ratio * len(fg_rows)))
    if len(bg_rows) > cap:
        bg_rows = np.sort(rng.choice(bg_rows, size=cap, replace=False))
    keep = np.concatenate([fg_rows, bg_rows])
    if keep.size == 0:
        return DetectionBatch.empty(feats.shape[1])
    fg_mask = codes[keep] == FG
    targets = np.where(fg_mask, classes[keep], background)
    reg_targets = np.zeros((len(keep), 4))
    if fg_mask.any():
        reg_targets[fg_mask] = encode_offsets(parr[fg_rows], gt_boxes[matched[fg_rows]])
    return DetectionBatch(
        features=feats[keep], targets=targets, reg_targets=reg_targets, fg_mask=fg_mask
    )


def _labeled_scene_rows(
    scene: Scene, oracle: FeatureOracle, config: RunConfig, iteration: int
) -> _SceneRows:
    cfg = config.trainer
    parr = scene_proposals(
        scene, config, stream_rng(cfg.seed, Stream.PROPOSALS, iteration, scene.scene_id)
    )
    annotations = training_annotations(scene)
    gt_boxes = boxes_to_array([inst.box for inst in annotations])
    gt_classes = np.array([inst.class_id for inst in annotations], dtype=int)
    codes, classes, matched = assign_label_codes(parr, gt_boxes, gt_classes, cfg.fg_iou, cfg.bg_iou)
    feats = oracle.features(
        scene, parr, cfg.strong_noise, stream_rng(cfg.seed, Stream.NOISE, iteration, scene.scene_id)
    )
    background = config.world.num_id_classes
    batch = _detection_rows(
        parr, feats, codes, classes, matched, gt_boxes, background, config,
        stream_rng(cfg.seed, Stream.SAMPLING, iteration, scene.scene_id, 1),
    )
    sel = _subsample_codes(
        codes, cfg.ood_subsample, stream_rng(cfg.seed, Stream.SAMPLING, iteration, scene.scene_id, 0)
    )
    ys = np.where(codes[sel] == FG, classes[sel], background)
    return _SceneRows(detection=batch, ood_features=feats[sel], ood_targets=ys)


def _unlabeled_scene_rows(
    scene: Scene,
    teacher: ModelParams,
    oracle: FeatureOracle,
    config: RunConfig,
    iteration: int,
) -> tuple[_SceneRows, PseudoLabelSet]:
    cfg = config.trainer
    pseudo, parr = generate_pseudo_labels(
        teacher,
        scene,
        oracle,
        config,
        stream_rng(cfg.seed, Stream.PROPOSALS, iteration, scene.scene_id),
        stream_rng(cfg.seed, Stream.NOISE, iteration, scene.scene_id, 0),
    )
    feats = oracle.features(
        scene, parr, cfg.strong_noise, stream_rng(cfg.seed, Stream.NOISE, iteration, scene.scene_id, 1)
    )
    background = config.world.num_id_classes
    if pseudo.filtered:
        pboxes = pseudo.boxes(pseudo.filtered)
        codes, classes, matched = assign_label_codes(
            parr, pboxes, pseudo.classes(pseudo.filtered), cfg.fg_iou, cfg.bg_iou
        )
        batch = _detection_rows(
            parr, feats, codes, classes, matched, pboxes, background, config,
            stream_rng(cfg.seed, Stream.SAMPLING, iteration, scene.scene_id, 1),
        )
    else:
        batch = DetectionBatch.empty(feats.shape[1])
    mined = build_ood_targets_unlabeled(parr, pseudo, config)
    if mined:
        idx = np.array([i for i, _ in mined], dtype=int)
        ys = np.array([t for _, t in mined], dtype=int)
        rows = _SceneRows(detection=batch, ood_features=feats[idx], ood_targets=ys)
    else:
        rows = _SceneRows(
            detection=batch,
            ood_features=np.zeros((0, feats.shape[1])),
            ood_targets=np.zeros(0, dtype=int),
        )
    return rows, pseudo


def _concat_rows(rows: list[_SceneRows], feature_dim: int) -> _SceneRows:
    return _SceneRows(
        detection=DetectionBatch.concat([r.detection for r in rows], feature_dim),
        ood_features=(
            np.vstack([r.ood_features for r in rows]) if rows else np.zeros((0, feature_dim))
        ),
        ood_targets=(
            np.concatenate([r.ood_targets for r in rows]) if rows else np.zeros(0, dtype=int)
        ),
    )


def _add_head(a: Head, b: Head, scale: float) -> Head:
    from .model import _map_head

    return _map_head(lambda x, y: x + scale * y, a, b)


def _scorer_head_loss(
    student: ModelParams, scorer: str, feats: np.ndarray, ys: np.ndarray
) -> tuple[float, Optional[OVAParams], Optional[Head]]:
    """Loss and grads of the scorer's trained head; (0, None, None) when idle."""
    spec = scorer_spec(scorer)
    if spec.trained_head == "none" or feats.shape[0] == 0:
        return 0.0, None, None
    if spec.trained_head == "ova":
        loss, grads = ova_batch_loss(student.ova, feats, ys)
        return loss, grads, None
    loss, grads = binary_head_loss(student.binary, feats, ys < student.num_id_classes)
    return loss, None, grads


def burn_in(
    student: ModelParams,
    labeled: Sequence[Scene],
    oracle: FeatureOracle,
    config: RunConfig,
) -> tuple[ModelParams, LossParts]:
    """Supervised-only phase: detection loss plus both auxiliary OOD heads.

    Both the one-vs-all and the binary head are trained here regardless of
    the configured scorer, so runs differing only in scorer share the entire
    burn-in trajectory. Returns the trained student and the last iteration's
    loss components.
    """
    cfg = config.trainer
    parts = LossParts()
    for iteration in range(1, cfg.burn_in_iters + 1):
        rng = stream_rng(cfg.seed, Stream.DATA, iteration, 0)
        picked = rng.choice(len(labeled), size=min(cfg.labeled_batch, len(labeled)), replace=False)
        rows = _concat_rows(
            [_labeled_scene_rows(labeled[i], oracle, config, iteration) for i in picked],
            oracle.feature_dim,
        )
        sup_loss, grads = supervised_detection_loss(student, rows.detection)
        ood_loss = 0.0
        if rows.ood_features.shape[0]:
            ova_loss_val, ova_grads = ova_batch_loss(student.ova, rows.ood_features, rows.ood_targets)
            bin_loss_val, bin_grads = binary_head_loss(
                student.binary, rows.ood_features, rows.ood_targets < student.num_id_classes
            )
            ood_loss = ova_loss_val + bin_loss_val
            grads.ova = OVAParams(
                [_add_head(a, b, 1.0) for a, b in zip(grads.ova.heads, ova_grads.heads)]
            )
            grads.binary = _add_head(grads.binary, bin_grads, 1.0)
        parts = LossParts(sup_det=sup_loss, ood_sup=ood_loss)
        total = parts.total(cfg.lambda_unsup, cfg.lambda_ood)
        if not np.isfinite(total):
            raise TrainingDivergedError(
                f"burn-in iteration {iteration}: non-finite loss (sup={sup_loss}, ood={ood_loss})"
            )
        student = sgd_step(student, grads, cfg.learning_rate)
    return student, parts


def init_teacher(student: ModelParams) -> ModelParams:
    """Teacher starts as an exact, independent copy of the student."""
    return student.copy()


def ema_update(teacher: ModelParams, student: ModelParams, alpha: float) -> ModelParams:
    """Convex blend of every parameter, OOD heads included."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    for (name_t, arr_t), (name_s, arr_s) in zip(named_arrays(teacher), named_arrays(student)):
        if name_t != name_s or arr_t.shape != arr_s.shape:
            raise ValueError(f"teacher/student shape mismatch at {name_t}/{name_s}")
    return map_params(lambda t, s: alpha * t + (1.0 - alpha) * s, teacher, student)


def train_step(
    student: ModelParams,
    teacher: ModelParams,
    labeled_batch: Sequence[Scene],
    unlabeled_batch: Sequence[Scene],
    oracle: FeatureOracle,
    config: RunConfig,
    iteration: int,
) -> tuple[ModelParams, ModelParams, StepStats]:
    """One joint optimizer step plus the teacher EMA update."""
    cfg = config.trainer
    labeled_rows = _concat_rows(
        [_labeled_scene_rows(s, oracle, config, iteration) for s in labeled_batch],
        oracle.feature_dim,
    )
    unlabeled_rows = []
    counts = np.zeros(4, dtype=int)
    for scene in unlabeled_batch:
        rows, pseudo = _unlabeled_scene_rows(scene, teacher, oracle, config, iteration)
        unlabeled_rows.append(rows)
        counts += (
            len(pseudo.accepted_id),
            len(pseudo.ignored),
            len(pseudo.rejected_ood),
            len(pseudo.filtered),
        )
    unsup_rows = _concat_rows(unlabeled_rows, oracle.feature_dim)

    sup_loss, grads = supervised_detection_loss(student, labeled_rows.detection)
    unsup_loss, unsup_grads = unsupervised_detection_loss(
        student, unsup_rows.detection, include_regression=cfg.unsup_regression
    )
    grads = add_params(grads, unsup_grads, cfg.lambda_unsup)

    ood_sup, ova_g, bin_g = _scorer_head_loss(
        student, cfg.scorer, labeled_rows.ood_features, labeled_rows.ood_targets
    )
    if ova_g is not None:
        grads.ova = OVAParams([_add_head(a, b, 1.0) for a, b in zip(grads.ova.heads, ova_g.heads)])
    if bin_g is not None:
        grads.binary = _add_head(grads.binary, bin_g, 1.0)

    ood_unsup, ova_g, bin_g = _scorer_head_loss(
        student, cfg.scorer, unsup_rows.ood_features, unsup_rows.ood_targets
    )
    if ova_g is not None:
        grads.ova = OVAParams(
            [_add_head(a, b, cfg.lambda_ood) for a, b in zip(grads.ova.heads, ova_g.heads)]
        )
    if bin_g is not None:
        grads.binary = _add_head(grads.binary, bin_g, cfg.lambda_ood)

    parts = LossParts(sup_det=sup_loss, unsup_det=unsup_loss, ood_sup=ood_sup, ood_unsup=ood_unsup)
    total = parts.total(cfg.lambda_unsup, cfg.lambda_ood)
    if not np.isfinite(total):
        raise TrainingDivergedError(
            f"iteration {iteration}: non-finite loss "
            f"(sup={sup_loss}, unsup={unsup_loss}, ood_sup={ood_sup}, ood_unsup={ood_unsup})"
        )
    student = sgd_step(student, grads, cfg.learning_rate)
    teacher = ema_update(teacher, student, cfg.alpha)
    stats = StepStats(
        parts=parts,
        total=total,
        pseudo_accepted=int(counts[0]),
        pseudo_ignored=int(counts[1]),
        pseudo_rejected=int(counts[2]),
        pseudo_filtered=int(counts[3]),
    )
    return student, teacher, stats


def run_experiment(
    config: RunConfig,
    splits: DatasetSplits,
    on_eval: Optional[Callable] = None,
):
    """Full pipeline: burn-in, teacher init, joint loop, periodic teacher evals.

    Returns the metric trajectory (one record after burn-in, one per
    ``eval_interval`` iterations, one at the end). ``on_eval`` is called as
    ``on_eval(record, teacher, student)`` after each evaluation, which is
    where checkpoint writers hook in. Deterministic in ``config.trainer.seed``.
    """
    from . import metrics as metrics_mod
    from .world import generate_eval_scenes

    config.validate()
    splits.validate()
    cfg = config.trainer
    oracle = FeatureOracle.for_splits(splits)
    student = init_model_params(
        splits.id_class_count,
        splits.feature_dim,
        stream_rng(cfg.seed, Stream.INIT),
        hidden_dim=cfg.hidden_dim,
        ood_hidden_dim=cfg.ood_hidden_dim,
    )
    student, parts = burn_in(student, splits.labeled, oracle, config)
    teacher = init_teacher(student)

    eval_scenes = generate_eval_scenes(
        splits.classes,
        cfg.eval_scenes,
        (config.world.min_instances, config.world.max_instances),
        cfg.seed,
        box_size_range=(config.world.box_min, config.world.box_max),
    )
    pool = splits.unlabeled
    cap = min(cfg.eval_unlabeled_cap, len(pool))
    picked = stream_rng(cfg.seed, Stream.EVAL, 0).choice(len(pool), size=cap, replace=False)
    unlabeled_eval = [pool[i] for i in sorted(picked)]

    def evaluate(iteration: int, stats: StepStats):
        pseudo_pairs = [
            (
                scene,
                generate_pseudo_labels(
                    teacher,
                    scene,
                    oracle,
                    config,
                    stream_rng(cfg.seed, Stream.EVAL, iteration, scene.scene_id, 0),
                    stream_rng(cfg.seed, Stream.EVAL, iteration, scene.scene_id, 1),
                )[0],
            )
            for scene in unlabeled_eval
        ]
        record = metrics_mod.evaluate_model(
            teacher, eval_scenes, unlabeled_eval, pseudo_pairs, oracle, config, iteration, stats
        )
        records.append(record)
        if on_eval is not None:
            on_eval(record, teacher, student)

    records: list = []
    stats = StepStats(parts=parts, total=parts.total(cfg.lambda_unsup, cfg.lambda_ood))
    evaluate(cfg.burn_in_iters, stats)
    for iteration in range(cfg.burn_in_iters + 1, cfg.total_iters + 1):
        rng_l = stream_rng(cfg.seed, Stream.DATA, iteration, 0)
        rng_u = stream_rng(cfg.seed, Stream.DATA, iteration, 1)
        labeled_batch = [
            splits.labeled[i]
            for i in rng_l.choice(
                len(splits.labeled), size=min(cfg.labeled_batch, len(splits.labeled)), replace=False
            )
        ]
        unlabeled_batch = [
            splits.unlabeled[i]
            for i in rng_u.choice(
                len(splits.unlabeled), size=min(cfg.unlabeled_batch, len(splits.unlabeled)), replace=False
            )
        ]
        student, teacher, stats = train_step(
            student, teacher, labeled_batch, unlabeled_batch, oracle, config, iteration
        )
        if (iteration - cfg.burn_in_iters) % cfg.eval_interval == 0 or iteration == cfg.total_iters:
            evaluate(iteration, stats)
    return records
