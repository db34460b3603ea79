"""Scores for recovered biclusters and sparse matrices."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from itertools import combinations

import numpy as np

from .model import Bicluster

MODES = ("cells", "genes")


@dataclass(frozen=True)
class ScorePair:
    recovery: float
    relevance: float


def jaccard(b1: Bicluster, b2: Bicluster, mode: str = "cells") -> float:
    """Jaccard index of two biclusters over (gene, sample) cells or over genes only."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if b1.is_empty or b2.is_empty:
        raise ValueError("biclusters must have non-empty gene and sample sets")
    if mode == "genes":
        inter = len(b1.genes & b2.genes)
        return inter / len(b1.genes | b2.genes)
    # |A x B  intersect  C x D| = |A & C| |B & D|
    inter = len(b1.genes & b2.genes) * len(b1.samples & b2.samples)
    union = len(b1.genes) * len(b1.samples) + len(b2.genes) * len(b2.samples) - inter
    return inter / union


def _jaccard_matrix(truth, found, mode):
    return np.array([[jaccard(t, f, mode) for f in found] for t in truth]).reshape(len(truth), len(found))


def recovery_relevance(truth, found, mode: str = "cells") -> ScorePair:
    """Mean best match of each true bicluster (recovery) and of each found one (relevance)."""
    truth, found = list(truth), list(found)
    if not truth:
        raise ValueError("truth must be non-empty")
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not found:
        return ScorePair(0.0, 0.0)
    J = _jaccard_matrix(truth, found, mode)
    return ScorePair(float(J.max(axis=1).mean()), float(J.max(axis=0).mean()))


def _abs_corr(A, B):
    A = A - A.mean(axis=0)
    B = B - B.mean(axis=0)
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        R = np.abs(A.T @ B) / np.outer(na, nb)
    return np.nan_to_num(np.clip(R, 0.0, 1.0), nan=0.0)


def stability_index(true_mat, est_mat) -> float:
    """Symmetric best-match mean of absolute column correlations.

    Invariant to column order, scale and sign.  Constant columns score 0.
    Duplicated columns are not penalized.
    """
    A = np.asarray(true_mat, float)
    B = np.asarray(est_mat, float)
    if A.ndim != 2 or B.ndim != 2 or A.shape[0] != B.shape[0]:
        raise ValueError("matrices must be 2-D with equal row counts")
    if A.shape[1] < 1 or B.shape[1] < 1:
        raise ValueError("both matrices need at least one column")
    R = _abs_corr(A, B)
    return float(0.5 * (R.max(axis=1).mean() + R.max(axis=0).mean()))


def redundancy_count(components) -> int:
    """Count pairs of components with identical gene and sample supports.

    ``components`` is a sequence of (gene indicator vector, sample indicator vector).
    Pairs are only compared within groups of equal support sizes.
    """
    groups = defaultdict(list)
    for genes, samples in components:
        g = np.asarray(genes).astype(bool)
        s = np.asarray(samples).astype(bool)
        groups[(int(g.sum()), int(s.sum()))].append((g, s))
    count = 0
    for members in groups.values():
        for (g1, s1), (g2, s2) in combinations(members, 2):
            ng_dif = int(np.sum((g1.astype(int) - g2.astype(int)) ** 2))
            ns_dif = int(np.sum((s1.astype(int) - s2.astype(int)) ** 2))
            if ng_dif == 0 and ns_dif == 0:
                count += 1
    return count
