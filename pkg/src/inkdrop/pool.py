"""Candidate-pool construction: source-class selection and top-kappa1 extraction."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch.nn as nn

from .core import LabeledDataset, fraction_count
from .surrogate import TopConfidenceSet, argmax_lowest, predict_distribution, rank_by_confidence

KL_EPS = 1e-12


@dataclass(frozen=True)
class ReferenceDistribution:
    probs: np.ndarray
    support_size: int


@dataclass(frozen=True)
class ClassScoreRow:
    source_class: int
    proximity: float
    misrate: float
    score: float


@dataclass(frozen=True)
class CandidatePool:
    source_class: int
    members: LabeledDataset
    confidences: np.ndarray

    def __len__(self) -> int:
        return len(self.members)


def reference_distribution(m: nn.Module, top: TopConfidenceSet) -> ReferenceDistribution:
    if len(top.members) == 0:
        raise ValueError("top-confidence set is empty")
    probs = predict_distribution(m, top.members.images).mean(axis=0)
    return ReferenceDistribution(probs / probs.sum(), len(top.members))


def smooth(q: np.ndarray, eps: float = KL_EPS) -> np.ndarray:
    q = np.maximum(np.asarray(q, dtype=np.float64), eps)
    return q / q.sum(axis=-1, keepdims=True)


def kl_divergence(p, q) -> float | np.ndarray:
    """KL(p || q) in nats with 0 log 0 = 0; ``q`` is floored at 1e-12 and renormalized.

    ``p`` may be a single distribution or a batch of rows.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape[-1] != q.shape[-1]:
        raise ValueError("distributions differ in length")
    q = smooth(q)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * (np.log(p) - np.log(q)), 0.0)
    kl = np.maximum(terms.sum(axis=-1), 0.0)
    return float(kl) if kl.ndim == 0 else kl


def _check_slice(source: LabeledDataset) -> None:
    if len(source) == 0:
        raise ValueError("empty class slice")
    if len(np.unique(source.labels)) != 1:
        raise ValueError("class slice must carry a single label")


def information_proximity(m: nn.Module, source: LabeledDataset, ref: ReferenceDistribution) -> float:
    _check_slice(source)
    return float(np.mean(kl_divergence(predict_distribution(m, source.images), ref.probs)))


def misclassification_rate(m: nn.Module, source: LabeledDataset, target: int) -> float:
    _check_slice(source)
    return float(np.mean(argmax_lowest(predict_distribution(m, source.images)) == target))


def score_classes(m: nn.Module, d: LabeledDataset, target: int, ref: ReferenceDistribution,
                  lam: float) -> list[ClassScoreRow]:
    rows = []
    for o in range(d.class_count):
        if o == target:
            continue
        cls = d.class_slice(o)
        if len(cls) == 0:
            raise ValueError(f"class {o} is empty")
        prox = information_proximity(m, cls, ref)
        mis = misclassification_rate(m, cls, target)
        rows.append(ClassScoreRow(o, prox, mis, prox - lam * mis))
    return rows


def argmin_score(rows: list[ClassScoreRow]) -> int:
    """Lowest score wins; ties go to the lowest class index."""
    return min(rows, key=lambda r: (r.score, r.source_class)).source_class


def select_source_class(m: nn.Module, d: LabeledDataset, target: int, lam: float,
                        ref: ReferenceDistribution) -> tuple[int, list[ClassScoreRow]]:
    if d.class_count < 2:
        raise ValueError("source selection needs at least two classes")
    rows = score_classes(m, d, target, ref, lam)
    return argmin_score(rows), rows


def build_candidate_pool(m: nn.Module, d: LabeledDataset, source: int, target: int, kappa1: float) -> CandidatePool:
    if not 0.0 < kappa1 <= 1.0:
        raise ValueError("kappa1 must lie in (0, 1]")
    cls = d.class_slice(source)
    if len(cls) == 0:
        raise ValueError(f"source class {source} is empty")
    conf = predict_distribution(m, cls.images)[:, target]
    order = rank_by_confidence(conf, cls.ids)[: fraction_count(kappa1, len(cls))]
    return CandidatePool(source, cls.subset(order, name=f"pool[{source}->{target}]"), conf[order])


def write_pool_csv(path: str | Path, rows: list[ClassScoreRow], pool: CandidatePool) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "proximity", "misrate", "score"])
        for r in rows:
            w.writerow([r.source_class, repr(r.proximity), repr(r.misrate), repr(r.score)])
        w.writerow([])
        w.writerow(["selected_source", pool.source_class])
        w.writerow(["member_id", "confidence"])
        for i, c in zip(pool.members.ids, pool.confidences):
            w.writerow([int(i), repr(float(c))])
