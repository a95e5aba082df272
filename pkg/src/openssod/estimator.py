"""Scikit-learn style facade over the training pipeline.

`OnlineOpenSetDetector` exposes every trainer hyperparameter as a
constructor argument (so ``get_params`` / ``set_params`` / ``clone`` work),
fits on a :class:`~openssod.world.DatasetSplits`, and predicts detections
for scenes with the trained teacher model.
"""

from __future__ import annotations

import dataclasses
import math

from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .config import RunConfig, TrainerConfig, WorldConfig
from .metrics import average_precision, mean_ap, scene_detections
from .model import Detection
from .trainer import Stream, run_experiment, stream_rng
from .world import DatasetSplits, FeatureOracle, Scene


def check_splits(X) -> DatasetSplits:
    """Validate a fit input: must be DatasetSplits with consistent scenes."""
    if not isinstance(X, DatasetSplits):
        raise TypeError(f"expected DatasetSplits, got {type(X).__name__}")
    X.validate()
    return X


def check_scenes(X) -> list[Scene]:
    """Validate a predict/score input: one Scene or a sequence of Scenes."""
    scenes = [X] if isinstance(X, Scene) else list(X)
    if not scenes or not all(isinstance(s, Scene) for s in scenes):
        raise TypeError("expected a Scene or a non-empty sequence of Scenes")
    return scenes


class OnlineOpenSetDetector(BaseEstimator):
    """Teacher-student open-set detector with pluggable OOD filtering.

    Parameters mirror :class:`~openssod.config.TrainerConfig`; see its
    docstring for semantics. ``fit`` consumes a DatasetSplits, ``predict``
    returns per-scene lists of :class:`~openssod.model.Detection` from the
    teacher model, and ``score`` reports mAP against the scenes' latent
    ground truth (an evaluation-context operation).
    """

    def __init__(
        self,
        tau=0.7,
        tau_prime=0.5,
        tau_ood=0.7,
        lambda_unsup=2.0,
        lambda_ood=0.1,
        alpha=0.999,
        fg_iou=0.7,
        bg_iou=0.3,
        proposals_per_image=64,
        ood_subsample=16,
        burn_in_iters=300,
        total_iters=1800,
        eval_interval=250,
        learning_rate=0.05,
        nms_threshold=0.5,
        weak_noise=0.05,
        strong_noise=0.2,
        scorer="ova",
        seed=0,
        unsup_regression=True,
        labeled_batch=8,
        unlabeled_batch=8,
        per_gt_copies=8,
        jitter_scale=0.4,
        hidden_dim=0,
        ood_hidden_dim=16,
        energy_temperature=1.0,
        eval_scenes=32,
        eval_unlabeled_cap=64,
    ):
        self.tau = tau
        self.tau_prime = tau_prime
        self.tau_ood = tau_ood
        self.lambda_unsup = lambda_unsup
        self.lambda_ood = lambda_ood
        self.alpha = alpha
        self.fg_iou = fg_iou
        self.bg_iou = bg_iou
        self.proposals_per_image = proposals_per_image
        self.ood_subsample = ood_subsample
        self.burn_in_iters = burn_in_iters
        self.total_iters = total_iters
        self.eval_interval = eval_interval
        self.learning_rate = learning_rate
        self.nms_threshold = nms_threshold
        self.weak_noise = weak_noise
        self.strong_noise = strong_noise
        self.scorer = scorer
        self.seed = seed
        self.unsup_regression = unsup_regression
        self.labeled_batch = labeled_batch
        self.unlabeled_batch = unlabeled_batch
        self.per_gt_copies = per_gt_copies
        self.jitter_scale = jitter_scale
        self.hidden_dim = hidden_dim
        self.ood_hidden_dim = ood_hidden_dim
        self.energy_temperature = energy_temperature
        self.eval_scenes = eval_scenes
        self.eval_unlabeled_cap = eval_unlabeled_cap

    def _run_config(self, splits: DatasetSplits) -> RunConfig:
        trainer = TrainerConfig(**{f.name: getattr(self, f.name) for f in dataclasses.fields(TrainerConfig)})
        world = dataclasses.replace(
            WorldConfig(),
            num_classes=len(splits.classes),
            num_id_classes=splits.id_class_count,
            feature_dim=splits.feature_dim,
        )
        config = RunConfig(world=world, trainer=trainer)
        config.validate()
        return config

    def fit(self, X, y=None):
        """Run burn-in plus the semi-supervised loop on a DatasetSplits."""
        splits = check_splits(X)
        config = self._run_config(splits)
        captured = {}

        def keep_latest(record, teacher, student):
            captured["teacher"] = teacher
            captured["student"] = student

        self.history_ = run_experiment(config, splits, on_eval=keep_latest)
        self.teacher_ = captured["teacher"]
        self.student_ = captured["student"]
        self.config_ = config
        self.oracle_ = FeatureOracle.for_splits(splits)
        self.n_features_in_ = splits.feature_dim
        self.id_class_count_ = splits.id_class_count
        return self

    def _require_fitted(self):
        if not hasattr(self, "teacher_"):
            raise NotFittedError("this OnlineOpenSetDetector instance is not fitted yet")

    def predict(self, X) -> list[list[Detection]]:
        """Teacher detections per scene (post-NMS, no confidence cut)."""
        self._require_fitted()
        scenes = check_scenes(X)
        out = []
        for scene in scenes:
            out.append(
                scene_detections(
                    self.teacher_,
                    scene,
                    self.oracle_,
                    self.config_,
                    stream_rng(self.seed, Stream.EVAL, 2**30, scene.scene_id, 0),
                    stream_rng(self.seed, Stream.EVAL, 2**30, scene.scene_id, 1),
                )
            )
        return out

    def score(self, X, y=None) -> float:
        """mAP over ID classes against the scenes' latent instances."""
        self._require_fitted()
        scenes = check_scenes(X)
        predictions = self.predict(scenes)
        dets_by_class = {c: [] for c in range(self.id_class_count_)}
        gts_by_class = {c: [] for c in range(self.id_class_count_)}
        for scene, dets in zip(scenes, predictions):
            for det in dets:
                dets_by_class[det.class_id].append((scene.scene_id, det.box, det.cls_score))
            for inst in scene.instances:
                if inst.class_id < self.id_class_count_:
                    gts_by_class[inst.class_id].append((scene.scene_id, inst.box))
        aps = [
            average_precision(dets_by_class[c], gts_by_class[c])
            for c in range(self.id_class_count_)
            if gts_by_class[c]
        ]
        if not aps:
            return math.nan
        return mean_ap(aps)
