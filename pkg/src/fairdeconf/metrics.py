"""Accuracy and health-disparity metrics over encounter-level predictions.

AUC follows the Mann-Whitney convention (ties count one half) and is exact:
it must match a brute-force all-pairs count bit for bit. Disparity metrics
compare a metric across the two subgroups induced by one sensitive bit and
scale the absolute difference by 1000.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np


class UndefinedMetricError(ValueError):
    """The metric is undefined on this input (single-class, all-zero, ...)."""


@dataclass(frozen=True)
class ScoredSet:
    """Parallel scores, binary labels, and one group bit per item."""

    scores: tuple[float, ...]
    labels: tuple[int, ...]
    group_bits: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "scores", tuple(float(s) for s in self.scores))
        object.__setattr__(self, "labels", tuple(int(v) for v in self.labels))
        object.__setattr__(self, "group_bits",
                           tuple(int(b) for b in self.group_bits))
        if not (len(self.scores) == len(self.labels) == len(self.group_bits)):
            raise ValueError("scores, labels, group_bits must be equal length")
        if any(v not in (0, 1) for v in self.labels):
            raise ValueError("labels must be binary")
        if any(b not in (0, 1) for b in self.group_bits):
            raise ValueError("group bits must be binary")

    def subset(self, bit: int) -> "ScoredSet":
        keep = [i for i, b in enumerate(self.group_bits) if b == bit]
        return ScoredSet(scores=tuple(self.scores[i] for i in keep),
                         labels=tuple(self.labels[i] for i in keep),
                         group_bits=tuple(self.group_bits[i] for i in keep))


@dataclass(frozen=True)
class PredictionRow:
    """One encounter-level prediction carrying its patient's sensitive bits."""

    patient_id: str
    encounter_index: int
    score: float
    label: int
    sensitive_bits: tuple[int, ...]


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Exact Mann-Whitney AUC: P(score+ > score-) + 0.5 P(tie)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be 1-D "
                         "and equal length")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and s[order[j + 1]] == s[order[i]]:
            j += 1
        # tie group shares the average rank; halves are exact in f64
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_pairs(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Brute-force all-pairs AUC; the oracle the fast path must match exactly."""
    s = list(map(float, scores))
    y = list(map(int, labels))
    pos = [v for v, lab in zip(s, y) if lab == 1]
    neg = [v for v, lab in zip(s, y) if lab == 0]
    if not pos or not neg:
        raise UndefinedMetricError("AUC undefined on single-class input")
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def ndcg_at_k(scores: Sequence[float], relevances: Sequence[float],
              k: int = 5) -> float:
    """nDCG@k with gain = relevance and discount 1/log2(rank + 1)."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    s = np.asarray(scores, dtype=np.float64)
    rel = np.asarray(relevances, dtype=np.float64)
    if s.shape != rel.shape or s.ndim != 1:
        raise ValueError("scores and relevances must be 1-D and equal length")
    if not np.any(rel > 0):
        raise UndefinedMetricError("nDCG undefined: all relevances are zero")
    # stable order: descending score, ties by original position
    order = np.argsort(-s, kind="mergesort")
    discounts = 1.0 / np.log2(np.arange(2, k + 2, dtype=np.float64))
    top = rel[order[:k]]
    dcg = float((top * discounts[:len(top)]).sum())
    ideal = np.sort(rel)[::-1][:k]
    idcg = float((ideal * discounts[:len(ideal)]).sum())
    return dcg / idcg


def hd_binary(scored: ScoredSet) -> float:
    """|AUC(G1) - AUC(G2)| * 1000 over the two group-bit subgroups."""
    g1, g2 = scored.subset(0), scored.subset(1)
    return abs(auc(g1.scores, g1.labels) - auc(g2.scores, g2.labels)) * 1000.0


def hd_multi(scored: ScoredSet, k: int = 5) -> float:
    """|nDCG@k(G1) - nDCG@k(G2)| * 1000 over the two group-bit subgroups."""
    g1, g2 = scored.subset(0), scored.subset(1)
    return abs(ndcg_at_k(g1.scores, g1.labels, k)
               - ndcg_at_k(g2.scores, g2.labels, k)) * 1000.0


def group_split(rows: Sequence[PredictionRow],
                sensitive_names: Sequence[str],
                attribute: str) -> tuple[ScoredSet, ScoredSet]:
    """Partition predictions by one sensitive bit; G1 is bit=0, G2 is bit=1."""
    names = list(sensitive_names)
    if attribute not in names:
        raise KeyError(f"unknown sensitive attribute {attribute!r}; have {names}")
    idx = names.index(attribute)
    pooled = scored_set(rows, bit_index=idx)
    return pooled.subset(0), pooled.subset(1)


def scored_set(rows: Sequence[PredictionRow], bit_index: int) -> ScoredSet:
    return ScoredSet(scores=tuple(r.score for r in rows),
                     labels=tuple(r.label for r in rows),
                     group_bits=tuple(r.sensitive_bits[bit_index] for r in rows))


@dataclass(frozen=True)
class FairnessReport:
    """Per-attribute accuracy and disparity summary for one prediction set."""

    attribute: str
    auc_overall: float
    auc_g1: float
    auc_g2: float
    hd_binary: float
    ndcg_g1: float
    ndcg_g2: float
    hd_multi: float
    n_g1: int
    n_g2: int
    cf_gap: float | None = None

    def to_json(self) -> dict:
        return {"attribute": self.attribute,
                "auc_overall": self.auc_overall,
                "auc_g1": self.auc_g1, "auc_g2": self.auc_g2,
                "hd_binary": self.hd_binary,
                "ndcg_g1": self.ndcg_g1, "ndcg_g2": self.ndcg_g2,
                "hd_multi": self.hd_multi,
                "n_g1": self.n_g1, "n_g2": self.n_g2,
                "cf_gap": self.cf_gap}

    @classmethod
    def from_json(cls, doc: dict) -> "FairnessReport":
        return cls(**doc)

    @staticmethod
    def csv_header() -> str:
        return ("attribute,auc_overall,auc_g1,auc_g2,hd_binary,"
                "ndcg_g1,ndcg_g2,hd_multi,n_g1,n_g2,cf_gap")

    def csv_row(self) -> str:
        cf = "" if self.cf_gap is None else repr(self.cf_gap)
        return (f"{self.attribute},{self.auc_overall!r},{self.auc_g1!r},"
                f"{self.auc_g2!r},{self.hd_binary!r},{self.ndcg_g1!r},"
                f"{self.ndcg_g2!r},{self.hd_multi!r},{self.n_g1},{self.n_g2},{cf}")


def fairness_report(rows: Sequence[PredictionRow],
                    sensitive_names: Sequence[str], attribute: str,
                    k: int = 5, cf_gap: float | None = None) -> FairnessReport:
    """Compute overall AUC plus per-group AUC/nDCG disparities for one bit."""
    g1, g2 = group_split(rows, sensitive_names, attribute)
    pooled = scored_set(rows, list(sensitive_names).index(attribute))
    auc_g1 = auc(g1.scores, g1.labels)
    auc_g2 = auc(g2.scores, g2.labels)
    ndcg_g1 = ndcg_at_k(g1.scores, g1.labels, k)
    ndcg_g2 = ndcg_at_k(g2.scores, g2.labels, k)
    return FairnessReport(
        attribute=attribute,
        auc_overall=auc(pooled.scores, pooled.labels),
        auc_g1=auc_g1, auc_g2=auc_g2,
        hd_binary=abs(auc_g1 - auc_g2) * 1000.0,
        ndcg_g1=ndcg_g1, ndcg_g2=ndcg_g2,
        hd_multi=abs(ndcg_g1 - ndcg_g2) * 1000.0,
        n_g1=len(g1.scores), n_g2=len(g2.scores),
        cf_gap=cf_gap)


def save_report(report: FairnessReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2)
        fh.write("\n")
