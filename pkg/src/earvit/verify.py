"""Verification evaluation: pairing, dot-product scoring, ROC/AUC, and PV.

Genuine pairs (same identity, distinct images) are always enumerated
exhaustively; impostor pairs are sampled without replacement up to a
configurable multiple of the genuine count. AUC is the trapezoidal area
under the threshold-swept ROC with tied scores handled atomically, which
makes it exactly the rank statistic: P(genuine > impostor) + P(tie)/2.

Repeated evaluation re-samples the impostor set under consecutive seeds and
reports mean +/- sample standard deviation, the table convention
``0.9834 +/- 0.0011``.
"""

from __future__ import annotations

import itertools
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetIndex, preprocess_file
from .errors import ConfigError, ContractError, DataFormatError, EvalError
from .model import ModelParams, forward_embeddings
from .tensor import Tensor, no_grad

EMBED_MAGIC = b"EVITEMB\x00"
EMBED_VERSION = 1


@dataclass
class EmbeddingSet:
    """identity_key -> [(image_id, unit vector)] with a fixed dimension."""

    dim: int
    by_identity: dict[str, list[tuple[str, np.ndarray]]] = field(default_factory=dict)

    def add(self, identity_key: str, image_id: str, vector: np.ndarray) -> None:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (self.dim,):
            raise ContractError(f"embedding shape {vector.shape} != ({self.dim},)")
        if abs(float(np.linalg.norm(vector)) - 1.0) > 1e-6:
            raise ContractError(f"embedding for {identity_key}/{image_id} is not unit-norm")
        self.by_identity.setdefault(identity_key, []).append((image_id, vector))

    @property
    def num_images(self) -> int:
        return sum(len(v) for v in self.by_identity.values())

    def flat(self) -> list[tuple[str, str, np.ndarray]]:
        out = []
        for key in sorted(self.by_identity):
            for image_id, vec in self.by_identity[key]:
                out.append((key, image_id, vec))
        return out


def extract_embeddings(params: ModelParams, index: DatasetIndex,
                       batch_size: int = 32) -> EmbeddingSet:
    """One unit embedding per indexed image, in deterministic index order."""
    cfg = params.config
    out = EmbeddingSet(dim=cfg.embed_dim)
    records = index.records
    with no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start:start + batch_size]
            imgs = np.stack([preprocess_file(r.path, cfg.grid.image_size).data
                             for r in chunk])
            if imgs.shape[1] != cfg.channels:
                raise ConfigError(
                    f"dataset has {imgs.shape[1]} channels but model expects {cfg.channels}")
            vecs = forward_embeddings(Tensor(imgs), params).data
            for rec, vec in zip(chunk, vecs):
                out.add(rec.identity_key, rec.image_id, vec)
    return out


@dataclass
class PairSet:
    """Exhaustive genuine pairs and sampled impostor pairs (vector pairs)."""

    genuine: list[tuple[np.ndarray, np.ndarray]]
    impostor: list[tuple[np.ndarray, np.ndarray]]
    seed: int


def make_pairs(emb: EmbeddingSet, impostor_ratio: float, seed: int) -> PairSet:
    """All genuine pairs; impostors sampled uniformly without replacement.

    Impostor count = min(ceil(ratio * genuine count), all cross-identity
    pairs). The genuine set is seed-independent; only impostor sampling
    varies with the seed.
    """
    if impostor_ratio <= 0:
        raise ConfigError(f"impostor_ratio must be positive, got {impostor_ratio}")
    entries = emb.flat()
    if len({k for k, _, _ in entries}) < 2:
        raise EvalError("need at least 2 identities for impostor pairs")
    genuine: list[tuple[np.ndarray, np.ndarray]] = []
    for key in sorted(emb.by_identity):
        vecs = [v for _, v in emb.by_identity[key]]
        genuine.extend(itertools.combinations(vecs, 2))
    if not genuine:
        raise EvalError("no identity has 2+ images; genuine pairs are impossible")

    cross = [(a[2], b[2]) for a, b in itertools.combinations(entries, 2) if a[0] != b[0]]
    want = min(int(np.ceil(impostor_ratio * len(genuine))), len(cross))
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(cross), size=want, replace=False)
    impostor = [cross[i] for i in sorted(chosen)]
    return PairSet(genuine=genuine, impostor=impostor, seed=seed)


def score_pairs(pairs: PairSet) -> tuple[np.ndarray, np.ndarray]:
    """Dot-product similarity per pair: (genuine scores, impostor scores)."""
    genuine = np.array([float(a @ b) for a, b in pairs.genuine])
    impostor = np.array([float(a @ b) for a, b in pairs.impostor])
    return genuine, impostor


@dataclass(frozen=True)
class RocCurve:
    """Threshold-swept (FPR, TPR) points from (0,0) to (1,1), plus the area."""

    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def roc_auc(genuine_scores, impostor_scores) -> RocCurve:
    """ROC over all distinct score thresholds; trapezoidal AUC.

    Equal scores move atomically between threshold steps, so the trapezoid
    area equals the rank statistic with ties counted one half.
    """
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    if genuine.size == 0 or impostor.size == 0:
        raise EvalError("AUC undefined: need at least one genuine and one impostor score")
    scores = np.concatenate([genuine, impostor])
    labels = np.concatenate([np.ones(genuine.size), np.zeros(impostor.size)])
    order = np.argsort(-scores, kind="stable")
    scores, labels = scores[order], labels[order]

    # collapse runs of equal scores into single threshold steps
    distinct = np.flatnonzero(np.diff(scores)) if scores.size > 1 else np.array([], dtype=np.intp)
    step_ends = np.concatenate([distinct, [scores.size - 1]])
    tp = np.cumsum(labels)[step_ends]
    fp = np.cumsum(1.0 - labels)[step_ends]
    tpr = np.concatenate([[0.0], tp / genuine.size, [1.0]])
    fpr = np.concatenate([[0.0], fp / impostor.size, [1.0]])
    auc = float(np.trapezoid(tpr, fpr))
    return RocCurve(fpr=fpr, tpr=tpr, auc=auc)


def mann_whitney_auc(genuine_scores, impostor_scores) -> float:
    """Brute-force P(genuine > impostor) + P(equal)/2; oracle for roc_auc."""
    genuine = np.asarray(genuine_scores, dtype=np.float64)
    impostor = np.asarray(impostor_scores, dtype=np.float64)
    wins = 0.0
    for g in genuine:
        for i in impostor:
            if g > i:
                wins += 1.0
            elif g == i:
                wins += 0.5
    return wins / (genuine.size * impostor.size)


@dataclass(frozen=True)
class EvalSummary:
    mean_auc: float
    std_auc: float
    repeats: int
    aucs: tuple[float, ...]

    def formatted(self) -> str:
        return f"{self.mean_auc:.4f} ± {self.std_auc:.4f}"


def repeat_eval(emb: EmbeddingSet, repeats: int = 5, base_seed: int = 0,
                impostor_ratio: float = 10.0) -> EvalSummary:
    """Mean +/- sample std of AUC over re-sampled impostor sets."""
    if repeats < 1:
        raise ConfigError(f"repeats must be at least 1, got {repeats}")
    aucs = []
    for r in range(repeats):
        pairs = make_pairs(emb, impostor_ratio, seed=base_seed + r)
        genuine, impostor = score_pairs(pairs)
        aucs.append(roc_auc(genuine, impostor).auc)
    arr = np.array(aucs)
    std = float(arr.std(ddof=1)) if repeats > 1 else 0.0
    return EvalSummary(mean_auc=float(arr.mean()), std_auc=std,
                       repeats=repeats, aucs=tuple(aucs))


def percentage_variation(auc_a: float, auc_b: float) -> float:
    """Relative AUC change of setting A over setting B, in percent."""
    if auc_b == 0:
        raise ConfigError("percentage variation undefined for zero reference AUC")
    return (auc_a - auc_b) / auc_b * 100.0


@dataclass(frozen=True)
class PVRecord:
    setting_a: str
    setting_b: str
    auc_a: float
    auc_b: float
    pv_percent: float


def pv_record(setting_a: str, setting_b: str, auc_a: float, auc_b: float) -> PVRecord:
    return PVRecord(setting_a=setting_a, setting_b=setting_b, auc_a=auc_a,
                    auc_b=auc_b, pv_percent=percentage_variation(auc_a, auc_b))


# -- embedding file format -----------------------------------------------------
#
# magic "EVITEMB\0" | u32 version | u32 count | u32 dim
# count rows of dim little-endian float32
# manifest: count entries of (u16 len + identity_key utf-8, u16 len + image_id)


def save_embeddings(path: str, emb: EmbeddingSet) -> None:
    entries = emb.flat()
    tmp = path + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(EMBED_MAGIC)
        fh.write(struct.pack("<III", EMBED_VERSION, len(entries), emb.dim))
        for _, _, vec in entries:
            fh.write(vec.astype("<f4").tobytes())
        for key, image_id, _ in entries:
            for text in (key, image_id):
                raw = text.encode("utf-8")
                fh.write(struct.pack("<H", len(raw)))
                fh.write(raw)
    os.replace(tmp, path)


def load_embeddings(path: str) -> EmbeddingSet:
    """Read an embedding file; exact at float32 precision."""
    with open(path, "rb") as fh:
        if fh.read(8) != EMBED_MAGIC:
            raise DataFormatError(f"{path} is not an embedding file (bad magic)")
        version, count, dim = struct.unpack("<III", fh.read(12))
        if version != EMBED_VERSION:
            raise DataFormatError(f"unsupported embedding file version {version}")
        raw = fh.read(count * dim * 4)
        if len(raw) != count * dim * 4:
            raise DataFormatError(f"{path}: truncated embedding rows")
        rows = np.frombuffer(raw, dtype="<f4")
        rows = rows.reshape(count, dim).astype(np.float64)
        out = EmbeddingSet(dim=dim)
        for i in range(count):
            texts = []
            for _ in range(2):
                raw = fh.read(2)
                if len(raw) != 2:
                    raise DataFormatError(f"{path}: truncated manifest")
                (n,) = struct.unpack("<H", raw)
                texts.append(fh.read(n).decode("utf-8"))
            out.add(texts[0], texts[1], rows[i])
    return out
