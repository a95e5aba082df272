"""OOD scoring heads and the interchangeable scorer registry.

The primary head is one-vs-all: one 2-logit sub-head per class (background
included), each reporting the probability that a feature belongs to that
class as an in-distribution sample. Its loss combines a positive term on the
labeled class with a single hard-negative term on the most-offending other
head. Alternative scorers (max softmax probability, energy, a lone binary
head) plug into the same trainer through :class:`ScorerSpec`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import (
    Head,
    ModelParams,
    OVAParams,
    class_logits,
    classify,
    head_backward,
    head_forward,
    softmax,
)

_LOG_GUARD = 1e-300


def ova_forward(params: OVAParams, feature: np.ndarray) -> np.ndarray:
    """Per-class positive probabilities; (K,) for a vector, (B, K) for a batch.

    Each entry is its own 2-way softmax, so rows do not sum to one.
    """
    single = np.asarray(feature).ndim == 1
    feats = np.atleast_2d(np.asarray(feature, dtype=float))
    cols = []
    for head in params.heads:
        logits, _ = head_forward(head, feats)
        cols.append(softmax(logits)[:, 1])
    out = np.stack(cols, axis=1)
    return out[0] if single else out


def ova_batch_loss(
    params: OVAParams, features: np.ndarray, labels: np.ndarray
) -> tuple[float, OVAParams]:
    """Mean one-vs-all loss over a batch of (feature, class) samples.

    Per sample: -log p_y - log(1 - p_j*), where j* is the non-target head
    with the largest positive probability (ties broken by lowest index).
    Gradients touch only heads y and j* for each sample.
    """
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    labels = np.asarray(labels, dtype=int).reshape(-1)
    n, k = feats.shape[0], params.num_heads
    if n == 0:
        raise ValueError("ova_batch_loss requires a nonempty batch")
    if k < 2:
        raise ValueError("one-vs-all needs at least one negative head")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError("ova label out of range")

    probs = np.zeros((n, k))
    sms = []
    caches = []
    for j, head in enumerate(params.heads):
        logits, cache = head_forward(head, feats)
        sm = softmax(logits)
        sms.append(sm)
        caches.append(cache)
        probs[:, j] = sm[:, 1]

    masked = probs.copy()
    masked[np.arange(n), labels] = -np.inf
    hard = masked.argmax(axis=1)  # first max wins ties

    pos = -np.log(probs[np.arange(n), labels] + _LOG_GUARD)
    neg = -np.log(1.0 - probs[np.arange(n), hard] + _LOG_GUARD)
    loss = float(np.mean(pos + neg))

    grads = params.zeros_like()
    for j in range(k):
        dlogits = np.zeros((n, 2))
        rows_pos = labels == j
        rows_neg = hard == j
        if not rows_pos.any() and not rows_neg.any():
            continue
        if rows_pos.any():
            dlogits[rows_pos] = sms[j][rows_pos] - np.array([0.0, 1.0])
        if rows_neg.any():
            dlogits[rows_neg] = sms[j][rows_neg] - np.array([1.0, 0.0])
        grads.heads[j] = head_backward(params.heads[j], caches[j], dlogits / n)
    return loss, grads


def ova_loss(params: OVAParams, feature: np.ndarray, label_class: int) -> tuple[float, OVAParams]:
    """Single-sample one-vs-all loss; see :func:`ova_batch_loss`."""
    return ova_batch_loss(params, np.asarray(feature, dtype=float)[None, :], np.array([label_class]))


def binary_head_loss(
    head: Head, features: np.ndarray, is_positive: np.ndarray
) -> tuple[float, Head]:
    """Cross-entropy for the lone ID-vs-not head (the OVA labeling collapsed)."""
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    targets = np.asarray(is_positive, dtype=bool).reshape(-1).astype(int)
    n = feats.shape[0]
    if n == 0:
        raise ValueError("binary_head_loss requires a nonempty batch")
    logits, cache = head_forward(head, feats)
    sm = softmax(logits)
    loss = float(-np.mean(np.log(sm[np.arange(n), targets] + _LOG_GUARD)))
    dlogits = sm.copy()
    dlogits[np.arange(n), targets] -= 1.0
    return loss, head_backward(head, cache, dlogits / n)


def score_msp(cls_probs: np.ndarray) -> np.ndarray | float:
    """Max softmax probability over the foreground entries (background is last)."""
    probs = np.asarray(cls_probs, dtype=float)
    out = probs[..., :-1].max(axis=-1)
    return float(out) if out.ndim == 0 else out


def score_energy(logits: np.ndarray, temperature: float = 1.0) -> np.ndarray | float:
    """Energy score -T * logsumexp(logits / T); lower means more in-distribution."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    z = np.asarray(logits, dtype=float) / temperature
    m = z.max(axis=-1, keepdims=True)
    out = -temperature * (np.log(np.exp(z - m).sum(axis=-1)) + m[..., 0])
    return float(out) if out.ndim == 0 else out


def score_entropy_head(head: Head, feature: np.ndarray) -> np.ndarray | float:
    """Positive-class probability of the standalone binary ID-vs-not head."""
    single = np.asarray(feature).ndim == 1
    logits, _ = head_forward(head, np.atleast_2d(np.asarray(feature, dtype=float)))
    p = softmax(logits)[:, 1]
    return float(p[0]) if single else p


@dataclass(frozen=True)
class ScorerSpec:
    """How one OOD scoring method plugs into the trainer.

    ``higher_is_id`` describes the raw score; :func:`ood_scores` always
    returns the normalized form (in [0, 1], higher = more ID) so the trainer
    applies one thresholding rule to every scorer.
    """

    name: str
    higher_is_id: bool
    default_threshold: float
    trained_head: str  # "ova" | "binary" | "none"


SCORERS: dict[str, ScorerSpec] = {
    "ova": ScorerSpec("ova", higher_is_id=True, default_threshold=0.5, trained_head="ova"),
    "msp": ScorerSpec("msp", higher_is_id=True, default_threshold=0.5, trained_head="none"),
    "energy": ScorerSpec("energy", higher_is_id=False, default_threshold=0.5, trained_head="none"),
    "entropy": ScorerSpec("entropy", higher_is_id=True, default_threshold=0.5, trained_head="binary"),
}


def scorer_spec(name: str) -> ScorerSpec:
    try:
        return SCORERS[name]
    except KeyError:
        raise ValueError(f"unknown scorer {name!r}; choose from {sorted(SCORERS)}") from None


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def ood_scores(
    name: str,
    params: ModelParams,
    features: np.ndarray,
    predicted_classes: np.ndarray,
    energy_temperature: float = 1.0,
) -> np.ndarray:
    """Normalized ID-confidence scores for a batch of features.

    ``predicted_classes`` selects the per-class head entry where the scorer
    is class-conditional (ova); class-agnostic scorers ignore it. The energy
    score is squashed through a sigmoid of its negation so that every scorer
    shares the [0, 1], higher-is-ID convention.
    """
    spec = scorer_spec(name)
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    pred = np.asarray(predicted_classes, dtype=int).reshape(-1)
    if spec.name == "ova":
        return ova_forward(params.ova, feats)[np.arange(feats.shape[0]), pred]
    if spec.name == "msp":
        return np.asarray(score_msp(classify(params, feats)))
    if spec.name == "energy":
        raw = np.asarray(score_energy(class_logits(params, feats), energy_temperature))
        return _sigmoid(-raw)
    return np.asarray(score_entropy_head(params.binary, feats))
