"""Procedural open-set detection benchmark.

Generates a world of feature-space classes split into in-distribution (ID)
and out-of-distribution (OOD), scenes tagged ID / MIX / OOD, a labeled
subset, and a deterministic feature oracle that stands in for ROI-pooled
backbone features. No raster images exist anywhere; every "appearance" is a
point in feature space.

Scenes keep two channels deliberately separate:

* ``instances`` is the latent scene content. It drives the feature oracle
  and proposal generator (the physics of the scene) and is what the
  evaluator scores against.
* ``annotations`` is the label channel a trainer is allowed to read, and it
  is ``None`` for unlabeled scenes. :func:`training_annotations` is the one
  sanctioned accessor.

Keeping the channels apart lets tests poison the hidden annotations of
unlabeled scenes and assert that training is bit-for-bit unaffected.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np

from .geometry import BBox, boxes_to_array, clip_boxes, iou_matrix

SplitTag = Literal["ID", "MIX", "OOD"]

_WORLD_STREAM = 11
_SPLITS_STREAM = 12


def subspace_split(feature_dim: int, num_classes: int) -> tuple[int, int]:
    """(semantic_dims, style_dims): the style half must host one direction per class."""
    d_style = min(max(num_classes, feature_dim // 2), feature_dim - 2)
    return feature_dim - d_style, d_style


def background_spread_vector(
    feature_dim: int, num_classes: int, style_spread: float
) -> np.ndarray:
    """Per-dimension appearance spread of background crops.

    Backgrounds are semantically empty but texturally diverse: their spread
    lives in the style subspace only, so random crops imitate no class yet
    cover the space of appearances.
    """
    d_sem, _ = subspace_split(feature_dim, num_classes)
    out = np.zeros(feature_dim)
    out[d_sem:] = style_spread
    return out


class SeparationError(RuntimeError):
    """Raised when class means cannot be placed 2*spread apart."""


class HiddenAnnotationsError(RuntimeError):
    """Raised when training code touches annotations of an unlabeled scene."""


@dataclass(frozen=True)
class ClassSpec:
    class_id: int
    is_id: bool
    feature_mean: np.ndarray
    feature_spread: float

    def __post_init__(self):
        if self.feature_spread <= 0:
            raise ValueError("feature_spread must be positive")


@dataclass(frozen=True)
class Instance:
    box: BBox
    class_id: int


@dataclass(frozen=True)
class Scene:
    """A synthetic image: latent instances plus an access-controlled label view."""

    scene_id: int
    split_tag: SplitTag
    labeled: bool
    instances: tuple[Instance, ...]
    annotations: Optional[tuple[Instance, ...]]

    def instance_boxes(self) -> np.ndarray:
        return boxes_to_array([inst.box for inst in self.instances])

    def instance_classes(self) -> np.ndarray:
        return np.array([inst.class_id for inst in self.instances], dtype=int)


def training_annotations(scene: Scene) -> tuple[Instance, ...]:
    """Annotations visible to the trainer. Unlabeled scenes raise."""
    if not scene.labeled or scene.annotations is None:
        raise HiddenAnnotationsError(
            f"scene {scene.scene_id} is unlabeled; its annotations are hidden from training"
        )
    return scene.annotations


@dataclass
class DatasetSplits:
    """Labeled/unlabeled scene pools plus the world they were drawn from."""

    labeled: list[Scene]
    unlabeled: list[Scene]
    classes: list[ClassSpec]
    id_class_count: int
    background_feature_mean: np.ndarray
    background_spread: np.ndarray | float = 0.0  # scalar or per-dimension

    @property
    def feature_dim(self) -> int:
        return int(self.background_feature_mean.shape[0])

    def validate(self) -> None:
        if any(s.split_tag != "ID" for s in self.labeled):
            raise ValueError("labeled scenes must all be ID-tagged")
        ids = {s.scene_id for s in self.labeled}
        if ids & {s.scene_id for s in self.unlabeled}:
            raise ValueError("labeled and unlabeled scene ids overlap")
        for scene in self.labeled + self.unlabeled:
            _validate_scene(scene, self.id_class_count)


def _validate_scene(scene: Scene, id_class_count: int) -> None:
    classes = scene.instance_classes()
    is_id = classes < id_class_count
    if scene.split_tag == "ID" and not np.all(is_id):
        raise ValueError(f"scene {scene.scene_id}: ID scene contains OOD instances")
    if scene.split_tag == "OOD" and (len(classes) == 0 or np.any(is_id)):
        raise ValueError(f"scene {scene.scene_id}: OOD scene must contain only OOD instances")
    if scene.split_tag == "MIX" and not (np.any(is_id) and np.any(~is_id)):
        raise ValueError(f"scene {scene.scene_id}: MIX scene needs both ID and OOD instances")
    boxes = scene.instance_boxes()
    if boxes.size and (boxes.min() < 0.0 or boxes.max() > 1.0):
        raise ValueError(f"scene {scene.scene_id}: instance boxes leave the unit extent")


def generate_world(
    num_classes: int,
    num_id_classes: int,
    feature_dim: int,
    seed: int,
    feature_spread: float = 0.25,
    mean_scale: float = 1.2,
    style_scale: float = 1.5,
    ood_primary_weight: float = 1.0,
    ood_secondary_weight: float = 0.6,
    ood_dir_noise: float = 0.15,
    ood_radius: float = 1.0,
    style_max_cos: float = 0.35,
    max_attempts: int = 200,
) -> list[ClassSpec]:
    """Sample class feature means, ID classes first.

    Classes ``[0, num_id_classes)`` are ID; the rest are OOD. Feature space
    splits into two halves. The *semantic* half carries what a classifier
    discriminates on: ID classes get random directions at radius
    ``mean_scale``, and each OOD class leans toward a random ID anchor with a
    weaker pull toward a second ID class, so OOD instances look like a
    confident blend of known classes. The *style* half carries each class's
    own appearance signature at radius ``style_scale``; OOD styles are
    foreign directions. A relative comparison across classes cancels the
    style mismatch (every ID class fits an OOD instance equally badly there),
    while a one-vs-rest comparison does not: that asymmetry is what makes
    open-set filtering a nontrivial, learnable problem here. All means are
    rejection-resampled until pairwise separated by at least
    ``2 * feature_spread``.
    """
    if not 0 < num_id_classes < num_classes:
        raise ValueError("need 0 < num_id_classes < num_classes")
    if feature_dim < 4:
        raise ValueError("feature_dim must be at least 4")
    rng = np.random.default_rng([seed, _WORLD_STREAM])
    min_sep = 2.0 * feature_spread
    # Style half sized to hold one direction per class where possible.
    d_style = min(max(num_classes, feature_dim // 2), feature_dim - 2)
    d_sem = feature_dim - d_style
    means: list[np.ndarray] = []

    def unit(v: np.ndarray) -> np.ndarray:
        norm = np.linalg.norm(v)
        return v / norm if norm > 0 else v

    # Styles are class identity: a random orthonormal set where it fits,
    # rejection-decorrelated extras beyond the dimension budget.
    basis, _ = np.linalg.qr(rng.standard_normal((d_style, d_style)))
    style_dirs = [basis[:, j] for j in range(min(num_classes, d_style))]
    for _ in range(num_classes - len(style_dirs)):
        for _ in range(max_attempts):
            candidate = unit(rng.standard_normal(d_style))
            if all(abs(candidate @ s) <= style_max_cos for s in style_dirs):
                style_dirs.append(candidate)
                break
        else:
            raise SeparationError(
                f"could not decorrelate {num_classes} style directions below "
                f"|cos| = {style_max_cos} in {d_style} dimensions"
            )

    def place(index: int, sample_semantic) -> np.ndarray:
        for _ in range(max_attempts):
            candidate = np.zeros(feature_dim)
            candidate[:d_sem] = sample_semantic()
            candidate[d_sem:] = style_scale * style_dirs[index]
            if all(np.linalg.norm(candidate - m) >= min_sep for m in means):
                means.append(candidate)
                return candidate
        raise SeparationError(
            f"could not separate {num_classes} class means by {min_sep} "
            f"in {feature_dim} dimensions after {max_attempts} attempts"
        )

    for i in range(num_id_classes):
        place(i, lambda: mean_scale * unit(rng.standard_normal(d_sem)))

    id_sem_dirs = [unit(m[:d_sem]) for m in means]

    def ood_semantic() -> np.ndarray:
        a, b = rng.choice(num_id_classes, size=2, replace=False)
        direction = unit(
            ood_primary_weight * id_sem_dirs[a]
            + ood_secondary_weight * id_sem_dirs[b]
            + ood_dir_noise * rng.standard_normal(d_sem)
        )
        return ood_radius * mean_scale * direction

    for i in range(num_id_classes, num_classes):
        place(i, ood_semantic)

    return [
        ClassSpec(class_id=i, is_id=i < num_id_classes, feature_mean=means[i], feature_spread=feature_spread)
        for i in range(num_classes)
    ]


def _sample_box_array(
    rng: np.random.Generator, count: int, size_range: tuple[float, float]
) -> np.ndarray:
    """(count, 4) boxes with uniform sizes, placed uniformly inside the unit square."""
    w = rng.uniform(size_range[0], size_range[1], size=count)
    h = rng.uniform(size_range[0], size_range[1], size=count)
    x = rng.uniform(0.0, 1.0, size=count) * (1.0 - w)
    y = rng.uniform(0.0, 1.0, size=count) * (1.0 - h)
    return np.stack([x, y, x + w, y + h], axis=1)


def _sample_box(rng: np.random.Generator, size_range: tuple[float, float]) -> BBox:
    return BBox(*_sample_box_array(rng, 1, size_range)[0])


def _scene_classes(
    rng: np.random.Generator, tag: SplitTag, count: int, id_ids: np.ndarray, ood_ids: np.ndarray
) -> list[int]:
    if tag == "ID":
        return list(rng.choice(id_ids, size=count))
    if tag == "OOD":
        return list(rng.choice(ood_ids, size=count))
    picks = [int(rng.choice(id_ids)), int(rng.choice(ood_ids))]
    all_ids = np.concatenate([id_ids, ood_ids])
    picks += list(rng.choice(all_ids, size=count - 2))
    return list(rng.permutation(picks))


def generate_splits(
    classes: Sequence[ClassSpec],
    num_labeled: int,
    num_unlabeled_per_tag: tuple[int, int, int],
    instances_per_scene: tuple[int, int],
    seed: int,
    box_size_range: tuple[float, float] = (0.05, 0.3),
    background_spread: np.ndarray | float = 0.0,
) -> DatasetSplits:
    """Draw labeled ID scenes plus an unlabeled pool of ID/MIX/OOD scenes.

    ``num_unlabeled_per_tag`` gives the (ID, MIX, OOD) unlabeled scene
    counts; ``instances_per_scene`` is an inclusive count range. Boxes get
    uniform centers and sizes inside the unit square. Deterministic in seed.
    """
    if num_labeled < 1:
        raise ValueError("need at least one labeled scene")
    if sum(num_unlabeled_per_tag) < 1:
        raise ValueError("need at least one unlabeled scene")
    lo, hi = instances_per_scene
    if not 1 <= lo <= hi:
        raise ValueError("bad instances_per_scene range")

    id_ids = np.array([c.class_id for c in classes if c.is_id], dtype=int)
    ood_ids = np.array([c.class_id for c in classes if not c.is_id], dtype=int)
    if len(id_ids) == 0 or len(ood_ids) == 0:
        raise ValueError("world must contain both ID and OOD classes")

    tags: list[tuple[SplitTag, bool]] = [("ID", True)] * num_labeled
    for tag, count in zip(("ID", "MIX", "OOD"), num_unlabeled_per_tag):
        tags += [(tag, False)] * count

    scenes: list[Scene] = []
    for scene_id, (tag, labeled) in enumerate(tags):
        rng = np.random.default_rng([seed, _SPLITS_STREAM, scene_id])
        count = int(rng.integers(lo, hi + 1))
        if tag == "MIX":
            count = max(count, 2)
        inst = tuple(
            Instance(box=_sample_box(rng, box_size_range), class_id=int(cid))
            for cid in _scene_classes(rng, tag, count, id_ids, ood_ids)
        )
        scenes.append(
            Scene(
                scene_id=scene_id,
                split_tag=tag,
                labeled=labeled,
                instances=inst,
                annotations=inst if labeled else None,
            )
        )

    splits = DatasetSplits(
        labeled=scenes[:num_labeled],
        unlabeled=scenes[num_labeled:],
        classes=list(classes),
        id_class_count=int(len(id_ids)),
        background_feature_mean=np.zeros_like(classes[0].feature_mean),
        background_spread=background_spread,
    )
    splits.validate()
    return splits


class FeatureOracle:
    """Deterministic stand-in for a backbone + ROI pooling.

    A proposal's feature is an IoU-weighted mixture of its best-overlapping
    instance's class mean and the background mean, plus isotropic noise whose
    scale combines the requested augmentation noise, the class's own
    appearance spread (weighted by the overlap m), and the background's
    appearance spread (weighted by 1 - m). Low-quality proposals hence carry
    background-contaminated features, and background crops are diverse rather
    than a point mass, as random crops of real scenes would be.
    """

    def __init__(
        self,
        classes: Sequence[ClassSpec],
        background_feature_mean: np.ndarray,
        background_spread: np.ndarray | float = 0.0,
    ):
        order = sorted(classes, key=lambda c: c.class_id)
        if [c.class_id for c in order] != list(range(len(order))):
            raise ValueError("class ids must be contiguous from 0")
        self.class_means = np.stack([c.feature_mean for c in order])
        self.class_spreads = np.array([c.feature_spread for c in order], dtype=float)
        self.background_mean = np.asarray(background_feature_mean, dtype=float)
        self.feature_dim = int(self.background_mean.shape[0])
        # scalar or per-dimension (anisotropic) appearance spread
        self.background_spread = np.broadcast_to(
            np.asarray(background_spread, dtype=float), (self.feature_dim,)
        ).copy()

    @classmethod
    def for_splits(cls, splits: DatasetSplits) -> "FeatureOracle":
        return cls(splits.classes, splits.background_feature_mean, splits.background_spread)

    def features(
        self,
        scene: Scene,
        boxes: np.ndarray,
        noise_scale: float,
        rng: np.random.Generator,
    ) -> np.ndarray:
        """Features for an (P, 4) array of proposal boxes in one scene."""
        boxes = np.asarray(boxes, dtype=float).reshape(-1, 4)
        n = boxes.shape[0]
        eps = rng.standard_normal((n, self.feature_dim))
        if len(scene.instances) == 0:
            std = noise_scale + self.background_spread[None, :]
            return self.background_mean[None, :] + std * eps
        overlaps = iou_matrix(boxes, scene.instance_boxes())
        m = overlaps.max(axis=1)
        g = overlaps.argmax(axis=1)
        cls_ids = scene.instance_classes()[g]
        mean = m[:, None] * self.class_means[cls_ids] + (1.0 - m)[:, None] * self.background_mean
        std = (noise_scale + m * self.class_spreads[cls_ids])[:, None] + (1.0 - m)[
            :, None
        ] * self.background_spread[None, :]
        return mean + std * eps

    def feature_oracle(
        self, scene: Scene, proposal: BBox, noise_scale: float, rng: np.random.Generator
    ) -> np.ndarray:
        """Feature vector for a single proposal box."""
        return self.features(scene, proposal.as_array()[None, :], noise_scale, rng)[0]


def proposal_array(
    scene: Scene,
    jitter_scale: float,
    num_random: int,
    rng: np.random.Generator,
    per_gt_copies: int = 8,
    random_size_range: tuple[float, float] = (0.05, 0.3),
) -> np.ndarray:
    """Array form of :func:`generate_proposals`; the hot path uses this."""
    if jitter_scale < 0:
        raise ValueError("jitter_scale must be non-negative")
    blocks: list[np.ndarray] = []
    if len(scene.instances) and per_gt_copies > 0:
        base = scene.instance_boxes()
        dims = np.stack(
            [base[:, 2] - base[:, 0], base[:, 3] - base[:, 1]], axis=1
        )[:, [0, 1, 0, 1]]
        if per_gt_copies == 1:
            mags = np.array([0.0])
        else:
            mags = np.linspace(0.0, jitter_scale, per_gt_copies)
        noise = rng.standard_normal((per_gt_copies,) + base.shape)
        jittered = base[None] + mags[:, None, None] * dims[None] * noise
        blocks.append(clip_boxes(jittered.reshape(-1, 4)))
    if num_random > 0:
        blocks.append(_sample_box_array(rng, num_random, random_size_range))
    if not blocks:
        return np.zeros((0, 4))
    return np.vstack(blocks)


def generate_proposals(
    scene: Scene,
    jitter_scale: float,
    num_random: int,
    rng: np.random.Generator,
    per_gt_copies: int = 8,
    random_size_range: tuple[float, float] = (0.05, 0.3),
) -> list[BBox]:
    """RPN surrogate: jittered copies of each instance box plus random boxes.

    Copy k of an instance gets corner noise of magnitude
    ``jitter_scale * k / (per_gt_copies - 1)`` times the box size, so the
    copies spread from IoU 1.0 down through the background band. Output
    length is exactly ``per_gt_copies * len(instances) + num_random``.
    """
    return [
        BBox(*row)
        for row in proposal_array(
            scene, jitter_scale, num_random, rng, per_gt_copies, random_size_range
        )
    ]


def generate_eval_scenes(
    classes: Sequence[ClassSpec],
    count: int,
    instances_per_scene: tuple[int, int],
    seed: int,
    box_size_range: tuple[float, float] = (0.05, 0.3),
    max_ood_clutter: int = 2,
) -> list[Scene]:
    """Held-out scenes for evaluation (the validation-split analog).

    Every scene carries ID instances; most also carry a little OOD clutter,
    the way validation images of a real open-set benchmark contain objects
    of the held-out classes. Evaluation annotates only the ID instances, so
    clutter detections count as false positives. Scene ids are offset by 1e6
    so they never collide with training scenes in derived RNG streams.
    """
    id_ids = np.array([c.class_id for c in classes if c.is_id], dtype=int)
    ood_ids = np.array([c.class_id for c in classes if not c.is_id], dtype=int)
    lo, hi = instances_per_scene
    scenes = []
    for i in range(count):
        scene_id = 1_000_000 + i
        rng = np.random.default_rng([seed, _SPLITS_STREAM, scene_id])
        n_id = int(rng.integers(lo, hi + 1))
        n_ood = int(rng.integers(0, max_ood_clutter + 1)) if len(ood_ids) else 0
        cids = list(rng.choice(id_ids, size=n_id))
        cids += list(rng.choice(ood_ids, size=n_ood))
        inst = tuple(
            Instance(box=_sample_box(rng, box_size_range), class_id=int(cid)) for cid in cids
        )
        tag: SplitTag = "MIX" if n_ood else "ID"
        scenes.append(
            Scene(scene_id=scene_id, split_tag=tag, labeled=False, instances=inst, annotations=None)
        )
    return scenes


def poison_hidden_annotations(splits: DatasetSplits, rng: np.random.Generator) -> DatasetSplits:
    """Copy of the splits with garbage in the unlabeled scenes' annotation channel.

    Latent instances are untouched, so features and evaluation are identical;
    only a trainer that illegally reads hidden annotations would notice.
    """
    num_classes = len(splits.classes)
    poisoned = []
    for scene in splits.unlabeled:
        garbage = tuple(
            Instance(box=_sample_box(rng, (0.05, 0.3)), class_id=int(rng.integers(num_classes)))
            for _ in range(max(1, len(scene.instances)))
        )
        poisoned.append(replace(scene, annotations=garbage))
    return DatasetSplits(
        labeled=list(splits.labeled),
        unlabeled=poisoned,
        classes=list(splits.classes),
        id_class_count=splits.id_class_count,
        background_feature_mean=splits.background_feature_mean,
    )


# Dataset files are JSON lines: one world record, then one record per scene
# (labeled scenes first). See README for the field order.


def save_dataset(splits: DatasetSplits, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        world = {
            "record": "world",
            "feature_dim": splits.feature_dim,
            "id_class_count": splits.id_class_count,
            "background_feature_mean": [float(v) for v in splits.background_feature_mean],
            "background_spread": (
                [float(v) for v in np.atleast_1d(splits.background_spread)]
                if np.ndim(splits.background_spread)
                else float(splits.background_spread)
            ),
            "classes": [
                {
                    "class_id": c.class_id,
                    "is_id": c.is_id,
                    "feature_spread": c.feature_spread,
                    "feature_mean": [float(v) for v in c.feature_mean],
                }
                for c in splits.classes
            ],
        }
        fh.write(json.dumps(world) + "\n")
        for scene in splits.labeled + splits.unlabeled:
            record = {
                "record": "scene",
                "scene_id": scene.scene_id,
                "tag": scene.split_tag,
                "labeled": scene.labeled,
                "instances": [
                    [inst.box.x_min, inst.box.y_min, inst.box.x_max, inst.box.y_max, inst.class_id]
                    for inst in scene.instances
                ],
            }
            fh.write(json.dumps(record) + "\n")


def load_dataset(path) -> DatasetSplits:
    labeled: list[Scene] = []
    unlabeled: list[Scene] = []
    world = None
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            record = json.loads(line)
            if record["record"] == "world":
                world = record
                continue
            inst = tuple(
                Instance(box=BBox(x0, y0, x1, y1), class_id=int(cid))
                for x0, y0, x1, y1, cid in record["instances"]
            )
            scene = Scene(
                scene_id=int(record["scene_id"]),
                split_tag=record["tag"],
                labeled=bool(record["labeled"]),
                instances=inst,
                annotations=inst if record["labeled"] else None,
            )
            (labeled if scene.labeled else unlabeled).append(scene)
    if world is None:
        raise ValueError(f"{path}: missing world record")
    classes = [
        ClassSpec(
            class_id=int(c["class_id"]),
            is_id=bool(c["is_id"]),
            feature_mean=np.array(c["feature_mean"], dtype=float),
            feature_spread=float(c["feature_spread"]),
        )
        for c in world["classes"]
    ]
    splits = DatasetSplits(
        labeled=labeled,
        unlabeled=unlabeled,
        classes=classes,
        id_class_count=int(world["id_class_count"]),
        background_feature_mean=np.array(world["background_feature_mean"], dtype=float),
        background_spread=(
            np.array(raw_spread, dtype=float) if isinstance(raw_spread := world.get("background_spread", 0.0), list) else float(raw_spread)
        ),
    )
    splits.validate()
    return splits
