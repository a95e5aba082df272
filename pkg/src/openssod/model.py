"""Miniature two-stage detector head stack on oracle features.

Heads are affine maps by default, with an optional one-hidden-layer tanh
variant per head group. All gradients are analytic; the optimizer is plain
constant-rate gradient descent. Parameters are plain numpy arrays held in
value-like dataclasses, so copying, EMA blending, and checkpointing are
structural operations with no framework underneath.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional

import numpy as np

from .geometry import BBox, apply_offsets

BACKGROUND = -1  # sentinel used in a few call sites; background target index is num_id_classes


class EmptyBatchError(ValueError):
    """A loss that requires samples received none."""


class NonFiniteGradientError(FloatingPointError):
    """Gradient entries stopped being finite; training has diverged."""


@dataclass
class Head:
    """One head: affine, or tanh-MLP when the hidden arrays are present."""

    w_out: np.ndarray  # (out, hidden or feature_dim)
    b_out: np.ndarray  # (out,)
    w_hidden: Optional[np.ndarray] = None  # (hidden, feature_dim)
    b_hidden: Optional[np.ndarray] = None

    @property
    def out_dim(self) -> int:
        return self.w_out.shape[0]

    def copy(self) -> "Head":
        return _map_head(np.copy, self)

    def zeros_like(self) -> "Head":
        return _map_head(np.zeros_like, self)


def init_head(
    out_dim: int, feature_dim: int, hidden_dim: int, rng: np.random.Generator
) -> Head:
    """Zero output layer (uniform initial predictions); random tanh layer if any."""
    if hidden_dim <= 0:
        return Head(w_out=np.zeros((out_dim, feature_dim)), b_out=np.zeros(out_dim))
    return Head(
        w_out=np.zeros((out_dim, hidden_dim)),
        b_out=np.zeros(out_dim),
        w_hidden=rng.normal(0.0, 1.0 / np.sqrt(feature_dim), size=(hidden_dim, feature_dim)),
        b_hidden=np.zeros(hidden_dim),
    )


def head_forward(head: Head, feats: np.ndarray):
    """Logits for a (B, d) batch, plus the cache backprop needs."""
    feats = np.asarray(feats, dtype=float)
    if head.w_hidden is None:
        return feats @ head.w_out.T + head.b_out, (feats, None)
    h = np.tanh(feats @ head.w_hidden.T + head.b_hidden)
    return h @ head.w_out.T + head.b_out, (feats, h)


def head_backward(head: Head, cache, dlogits: np.ndarray) -> Head:
    """Gradients w.r.t. head parameters given d(loss)/d(logits)."""
    feats, h = cache
    if head.w_hidden is None:
        return Head(w_out=dlogits.T @ feats, b_out=dlogits.sum(axis=0))
    dpre = (dlogits @ head.w_out) * (1.0 - h * h)
    return Head(
        w_out=dlogits.T @ h,
        b_out=dlogits.sum(axis=0),
        w_hidden=dpre.T @ feats,
        b_hidden=dpre.sum(axis=0),
    )


def _map_head(fn: Callable, *heads: Head) -> Head:
    has_hidden = heads[0].w_hidden is not None
    return Head(
        w_out=fn(*[h.w_out for h in heads]),
        b_out=fn(*[h.b_out for h in heads]),
        w_hidden=fn(*[h.w_hidden for h in heads]) if has_hidden else None,
        b_hidden=fn(*[h.b_hidden for h in heads]) if has_hidden else None,
    )


@dataclass
class OVAParams:
    """One binary (2-logit) head per class, background included as the last."""

    heads: list[Head] = field(default_factory=list)

    def __post_init__(self):
        for h in self.heads:
            if h.out_dim != 2:
                raise ValueError("OVA sub-heads must emit 2 logits")

    @property
    def num_heads(self) -> int:
        return len(self.heads)

    def copy(self) -> "OVAParams":
        return OVAParams([h.copy() for h in self.heads])

    def zeros_like(self) -> "OVAParams":
        return OVAParams([h.zeros_like() for h in self.heads])


@dataclass
class ModelParams:
    """All learnable weights of one model (classifier, regressor, OOD heads)."""

    num_id_classes: int
    feature_dim: int
    cls: Head
    reg: Head
    ova: OVAParams
    binary: Head

    @property
    def background_index(self) -> int:
        return self.num_id_classes

    def copy(self) -> "ModelParams":
        return map_params(np.copy, self)

    def zeros_like(self) -> "ModelParams":
        return map_params(np.zeros_like, self)


def init_model_params(
    num_id_classes: int,
    feature_dim: int,
    rng: np.random.Generator,
    hidden_dim: int = 0,
    ood_hidden_dim: int = 0,
) -> ModelParams:
    if num_id_classes < 1:
        raise ValueError("need at least one ID class")
    k = num_id_classes + 1
    return ModelParams(
        num_id_classes=num_id_classes,
        feature_dim=feature_dim,
        cls=init_head(k, feature_dim, hidden_dim, rng),
        reg=init_head(4, feature_dim, hidden_dim, rng),
        ova=OVAParams([init_head(2, feature_dim, ood_hidden_dim, rng) for _ in range(k)]),
        binary=init_head(2, feature_dim, ood_hidden_dim, rng),
    )


def map_params(fn: Callable, *params: ModelParams) -> ModelParams:
    """Apply fn leaf-wise across one or more same-shaped parameter sets."""
    first = params[0]
    return ModelParams(
        num_id_classes=first.num_id_classes,
        feature_dim=first.feature_dim,
        cls=_map_head(fn, *[p.cls for p in params]),
        reg=_map_head(fn, *[p.reg for p in params]),
        ova=OVAParams(
            [_map_head(fn, *[p.ova.heads[i] for p in params]) for i in range(first.ova.num_heads)]
        ),
        binary=_map_head(fn, *[p.binary for p in params]),
    )


def named_arrays(params: ModelParams) -> Iterator[tuple[str, np.ndarray]]:
    """Deterministic (name, array) walk over every parameter leaf."""

    def head_items(prefix: str, head: Head):
        yield f"{prefix}.w_out", head.w_out
        yield f"{prefix}.b_out", head.b_out
        if head.w_hidden is not None:
            yield f"{prefix}.w_hidden", head.w_hidden
            yield f"{prefix}.b_hidden", head.b_hidden

    yield from head_items("cls", params.cls)
    yield from head_items("reg", params.reg)
    for i, head in enumerate(params.ova.heads):
        yield from head_items(f"ova.{i}", head)
    yield from head_items("binary", params.binary)


def flatten_params(params: ModelParams) -> np.ndarray:
    return np.concatenate([arr.ravel() for _, arr in named_arrays(params)])


def unflatten_params(template: ModelParams, flat: np.ndarray) -> ModelParams:
    out = template.copy()
    offset = 0
    for _, arr in named_arrays(out):
        n = arr.size
        arr[...] = flat[offset : offset + n].reshape(arr.shape)
        offset += n
    if offset != flat.size:
        raise ValueError("flat vector length does not match parameter count")
    return out


def add_params(a: ModelParams, b: ModelParams, scale: float = 1.0) -> ModelParams:
    return map_params(lambda x, y: x + scale * y, a, b)


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def classify(params: ModelParams, feature: np.ndarray) -> np.ndarray:
    """Softmax class probabilities over N ID classes plus background."""
    single = np.asarray(feature).ndim == 1
    feats = np.atleast_2d(np.asarray(feature, dtype=float))
    logits, _ = head_forward(params.cls, feats)
    probs = softmax(logits)
    return probs[0] if single else probs


def class_logits(params: ModelParams, feats: np.ndarray) -> np.ndarray:
    logits, _ = head_forward(params.cls, np.atleast_2d(np.asarray(feats, dtype=float)))
    return logits


def regress_batch(params: ModelParams, feats: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    offsets, _ = head_forward(params.reg, np.atleast_2d(np.asarray(feats, dtype=float)))
    return apply_offsets(anchors, offsets)


def regress(params: ModelParams, feature: np.ndarray, anchor: BBox) -> BBox:
    """Apply predicted center/log-size offsets to the anchor, clipped to the scene."""
    box = regress_batch(params, np.asarray(feature, dtype=float)[None, :], anchor.as_array()[None, :])
    return BBox(*box[0])


@dataclass
class DetectionBatch:
    """Proposal rows ready for the detection loss (ignored rows already dropped)."""

    features: np.ndarray  # (B, d)
    targets: np.ndarray  # (B,) class index; background = num_id_classes
    reg_targets: np.ndarray  # (B, 4); meaningful only where fg_mask
    fg_mask: np.ndarray  # (B,) bool

    @property
    def size(self) -> int:
        return int(self.features.shape[0])

    @staticmethod
    def empty(feature_dim: int) -> "DetectionBatch":
        return DetectionBatch(
            features=np.zeros((0, feature_dim)),
            targets=np.zeros(0, dtype=int),
            reg_targets=np.zeros((0, 4)),
            fg_mask=np.zeros(0, dtype=bool),
        )

    @staticmethod
    def concat(batches: list["DetectionBatch"], feature_dim: int) -> "DetectionBatch":
        batches = [b for b in batches if b.size]
        if not batches:
            return DetectionBatch.empty(feature_dim)
        return DetectionBatch(
            features=np.vstack([b.features for b in batches]),
            targets=np.concatenate([b.targets for b in batches]),
            reg_targets=np.vstack([b.reg_targets for b in batches]),
            fg_mask=np.concatenate([b.fg_mask for b in batches]),
        )


def _smooth_l1(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Value and derivative of smooth L1 with transition point 1."""
    ax = np.abs(x)
    val = np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)
    grad = np.where(ax < 1.0, x, np.sign(x))
    return val, grad


def _detection_loss(
    params: ModelParams, batch: DetectionBatch, include_regression: bool
) -> tuple[float, ModelParams]:
    n = batch.size
    logits, cls_cache = head_forward(params.cls, batch.features)
    probs = softmax(logits)
    ce = float(-np.mean(np.log(probs[np.arange(n), batch.targets] + 1e-300)))
    dlogits = probs.copy()
    dlogits[np.arange(n), batch.targets] -= 1.0
    dlogits /= n

    grads = params.zeros_like()
    grads.cls = head_backward(params.cls, cls_cache, dlogits)

    reg_loss = 0.0
    fg = batch.fg_mask
    n_fg = int(fg.sum())
    if include_regression and n_fg > 0:
        offsets, reg_cache = head_forward(params.reg, batch.features[fg])
        diff = offsets - batch.reg_targets[fg]
        val, dval = _smooth_l1(diff)
        reg_loss = float(val.sum() / n_fg)
        grads.reg = head_backward(params.reg, reg_cache, dval / n_fg)
    return ce + reg_loss, grads


def supervised_detection_loss(
    params: ModelParams, batch: DetectionBatch, include_regression: bool = True
) -> tuple[float, ModelParams]:
    """Mean cross-entropy over proposals plus mean smooth-L1 over foreground rows.

    Raises :class:`EmptyBatchError` when no effective (non-ignored) rows remain.
    """
    if batch.size == 0:
        raise EmptyBatchError("supervised detection loss needs at least one proposal")
    return _detection_loss(params, batch, include_regression)


def unsupervised_detection_loss(
    params: ModelParams, batch: DetectionBatch, include_regression: bool = True
) -> tuple[float, ModelParams]:
    """Same functional form as the supervised loss; empty batches cost exactly 0."""
    if batch.size == 0:
        return 0.0, params.zeros_like()
    return _detection_loss(params, batch, include_regression)


def sgd_step(params: ModelParams, grads: ModelParams, learning_rate: float) -> ModelParams:
    """One plain gradient-descent step. Non-finite gradients abort training."""
    if learning_rate <= 0:
        raise ValueError("learning_rate must be positive")
    for name, arr in named_arrays(grads):
        if not np.all(np.isfinite(arr)):
            raise NonFiniteGradientError(f"non-finite gradient in {name}")
    return map_params(lambda p, g: p - learning_rate * g, params, grads)


@dataclass(frozen=True)
class Detection:
    """One detector output: box, predicted ID class, and its two confidences."""

    box: BBox
    class_id: int
    cls_score: float
    ood_score: float


def raw_detections(
    params: ModelParams,
    proposal_boxes: np.ndarray,
    features: np.ndarray,
    nms_threshold: float,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Forward + NMS over one scene's proposals.

    Proposals whose argmax class is background are dropped; the rest are
    regressed and suppressed class-agnostically. Returns (boxes, classes,
    scores, src) where ``src`` indexes the surviving rows in the input
    proposal arrays, so callers can fetch the matching features.
    """
    from .geometry import nms_arrays  # local import to avoid cycle in docs builds

    probs = classify(params, features)
    pred = probs.argmax(axis=1)
    keep = pred < params.num_id_classes
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return np.zeros((0, 4)), np.zeros(0, dtype=int), np.zeros(0), np.zeros(0, dtype=int)
    boxes = regress_batch(params, features[idx], np.asarray(proposal_boxes)[idx])
    scores = probs[idx, pred[idx]]
    kept = nms_arrays(boxes, scores, nms_threshold)
    kept = np.array(sorted(kept), dtype=int)
    return boxes[kept], pred[idx][kept], scores[kept], idx[kept]


def save_checkpoint(path, params: ModelParams, config_hash: str = "") -> None:
    """Dump every weight matrix with a JSON shape/meta header; round-trips bit-exactly."""
    arrays = dict(named_arrays(params))
    meta = {
        "num_id_classes": params.num_id_classes,
        "feature_dim": params.feature_dim,
        "config_hash": config_hash,
        "arrays": {name: list(arr.shape) for name, arr in arrays.items()},
    }
    np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path) -> tuple[ModelParams, str]:
    with np.load(path) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        arrays = {name: data[name] for name in meta["arrays"]}

    def build_head(prefix: str) -> Head:
        return Head(
            w_out=arrays[f"{prefix}.w_out"],
            b_out=arrays[f"{prefix}.b_out"],
            w_hidden=arrays.get(f"{prefix}.w_hidden"),
            b_hidden=arrays.get(f"{prefix}.b_hidden"),
        )

    k = meta["num_id_classes"] + 1
    params = ModelParams(
        num_id_classes=meta["num_id_classes"],
        feature_dim=meta["feature_dim"],
        cls=build_head("cls"),
        reg=build_head("reg"),
        ova=OVAParams([build_head(f"ova.{i}") for i in range(k)]),
        binary=build_head("binary"),
    )
    return params, meta["config_hash"]
