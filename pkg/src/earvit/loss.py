"""Large-margin cosine loss over identity classes, with class sampling.

Logits are cosine similarities between unit embeddings and unit class
prototypes; the target class logit has a margin m subtracted before scaling
by s and feeding softmax cross-entropy. When the class count is large, the
denominator runs over a sampled subset of classes that always contains the
batch's positives (the sampled-softmax trick used by large face-ID heads).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractError
from .tensor import Tensor, l2_normalize, logsumexp


@dataclass(frozen=True)
class MarginSpec:
    """Scale, margin, and class sample rate for the loss head."""

    scale: float = 64.0
    margin: float = 0.35
    sample_rate: float = 0.3

    def __post_init__(self):
        if self.scale <= 0:
            raise ConfigError(f"scale must be positive, got {self.scale}")
        if self.margin < 0:
            raise ConfigError(f"margin must be non-negative, got {self.margin}")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ConfigError(f"sample_rate must lie in (0, 1], got {self.sample_rate}")


@dataclass(frozen=True)
class ClassSubset:
    """Sorted class ids in the softmax denominator, plus id -> position map."""

    class_ids: np.ndarray

    @classmethod
    def of(cls, ids) -> "ClassSubset":
        arr = np.unique(np.asarray(ids, dtype=np.int64))
        return cls(class_ids=arr)

    def __len__(self) -> int:
        return len(self.class_ids)

    def positions(self, labels: np.ndarray) -> np.ndarray:
        pos = np.searchsorted(self.class_ids, labels)
        ok = (pos < len(self.class_ids)) & (self.class_ids[np.minimum(pos, len(self.class_ids) - 1)] == labels)
        if not np.all(ok):
            missing = np.asarray(labels)[~ok]
            raise ContractError(f"labels {missing.tolist()} are not in the class subset")
        return pos


def full_subset(num_classes: int) -> ClassSubset:
    return ClassSubset(class_ids=np.arange(num_classes, dtype=np.int64))


def sample_classes(num_classes: int, batch_labels, rate: float,
                   rng: np.random.Generator) -> ClassSubset:
    """Positives plus uniform negatives, |subset| = max(ceil(rate*C), #positives)."""
    if not 0.0 < rate <= 1.0:
        raise ConfigError(f"rate must lie in (0, 1], got {rate}")
    labels = np.asarray(batch_labels, dtype=np.int64)
    if labels.size == 0:
        raise ContractError("cannot sample classes for an empty batch")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise ContractError(f"labels out of range [0, {num_classes})")
    positives = np.unique(labels)
    target = max(int(np.ceil(rate * num_classes)), len(positives))
    if target >= num_classes:
        return full_subset(num_classes)
    mask = np.ones(num_classes, dtype=bool)
    mask[positives] = False
    candidates = np.flatnonzero(mask)
    extra = rng.choice(candidates, size=target - len(positives), replace=False)
    return ClassSubset.of(np.concatenate([positives, extra]))


def cosine_logits(embeddings: Tensor, weights: Tensor, subset: ClassSubset) -> Tensor:
    """Dot products against re-normalized prototype rows of the subset."""
    protos = l2_normalize(weights.take_rows(subset.class_ids))
    return embeddings @ protos.swapaxes(0, 1)


def cosface_loss(embeddings: Tensor, labels, weights: Tensor, spec: MarginSpec,
                 subset: ClassSubset | None = None) -> Tensor:
    """Mean margin-softmax loss over the batch.

    Per sample with target y:
      -log( exp(s*(cos_y - m)) / (exp(s*(cos_y - m)) + sum_{j != y} exp(s*cos_j)) )
    where j runs over the subset. Embedding rows must already be unit-norm
    (the encoder head guarantees this); prototypes are normalized here.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ContractError(
            f"embeddings {embeddings.shape} do not match {labels.shape[0]} labels")
    norms = np.sqrt((embeddings.data ** 2).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > 1e-6):
        raise ContractError("embeddings must be unit-norm (off by more than 1e-6)")
    if subset is None:
        subset = full_subset(weights.shape[0])
    target_pos = subset.positions(labels)

    logits = cosine_logits(embeddings, weights, subset)      # [B, |subset|]
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), target_pos] = 1.0
    scaled = (logits - Tensor(onehot) * spec.margin) * spec.scale
    target_logit = (scaled * Tensor(onehot)).sum(axis=1)
    per_sample = logsumexp(scaled, axis=1) - target_logit
    return per_sample.mean()
