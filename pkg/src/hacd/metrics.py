"""Clustering agreement metrics: best-permutation accuracy, NMI, ARI, and
aligned F1. All four are computed from the contingency table, which makes
relabel invariance structural rather than incidental.

Conventions pinned here: NMI uses the geometric mean of the entropies and
returns 1 for identical partitions / 0 when one side is degenerate and the
partitions differ; ARI resolves a zero adjustment denominator the same way;
F1 aligns predicted to true classes with the same optimal assignment used by
the accuracy score.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

__all__ = ["ContingencyTable", "accuracy_hungarian", "nmi", "ari",
           "f1_score", "f1_macro", "all_metrics"]


@dataclass
class ContingencyTable:
    counts: np.ndarray   # k_pred x k_true
    n: int

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.sum() != self.n:
            raise ValueError("contingency counts must sum to n")

    @classmethod
    def from_labels(cls, pred, truth) -> "ContingencyTable":
        pred = np.asarray(pred)
        truth = np.asarray(truth)
        if pred.shape != truth.shape or pred.ndim != 1:
            raise ValueError("pred and truth must be equal-length vectors")
        if pred.size == 0:
            raise ValueError("empty label vectors")
        _, pi = np.unique(pred, return_inverse=True)
        _, ti = np.unique(truth, return_inverse=True)
        kp, kt = pi.max() + 1, ti.max() + 1
        counts = np.zeros((kp, kt), dtype=np.int64)
        np.add.at(counts, (pi, ti), 1)
        return cls(counts=counts, n=pred.size)

    def padded_square(self) -> np.ndarray:
        kp, kt = self.counts.shape
        k = max(kp, kt)
        out = np.zeros((k, k), dtype=np.int64)
        out[:kp, :kt] = self.counts
        return out

    def identical_partitions(self) -> bool:
        """True when pred and truth induce the same grouping of the items."""
        nz = self.counts != 0
        return bool((nz.sum(axis=0) == 1).all() and (nz.sum(axis=1) == 1).all())


def _hungarian(table: ContingencyTable) -> tuple[np.ndarray, np.ndarray]:
    """Optimal pred-to-true assignment on the padded square table.

    Matched count is the primary criterion; among equally-accurate mappings
    the per-class F1 sum (separable as 2*tp/(rowsum+colsum)) breaks the tie,
    which pins one value regardless of how the inputs are relabeled.
    """
    square = table.padded_square().astype(np.float64)
    k = square.shape[0]
    rowsum = square.sum(axis=1, keepdims=True)
    colsum = square.sum(axis=0, keepdims=True)
    denom = np.maximum(rowsum + colsum, 1.0)
    cost = square * (k + 1.0) + 2.0 * square / denom
    return linear_sum_assignment(cost, maximize=True)


def accuracy_hungarian(pred, truth) -> float:
    """Best-label-mapping accuracy: the matched fraction under the optimal
    assignment of predicted to true classes."""
    table = ContingencyTable.from_labels(pred, truth)
    rows, cols = _hungarian(table)
    return float(table.padded_square()[rows, cols].sum() / table.n)


def nmi(pred, truth) -> float:
    """Normalized mutual information with geometric-mean normalization."""
    table = ContingencyTable.from_labels(pred, truth)
    counts = table.counts
    n = table.n
    p_row = counts.sum(axis=1) / n
    p_col = counts.sum(axis=0) / n
    h_row = -(p_row[p_row > 0] * np.log(p_row[p_row > 0])).sum()
    h_col = -(p_col[p_col > 0] * np.log(p_col[p_col > 0])).sum()
    if h_row <= 0 or h_col <= 0:
        return 1.0 if table.identical_partitions() else 0.0
    pij = counts / n
    nzr, nzc = np.nonzero(counts)
    mi = (pij[nzr, nzc] * np.log(pij[nzr, nzc] / (p_row[nzr] * p_col[nzc]))).sum()
    value = mi / np.sqrt(h_row * h_col)
    return float(min(max(value, 0.0), 1.0))


def _comb2(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.float64)
    return x * (x - 1.0) / 2.0


def ari(pred, truth) -> float:
    """Adjusted Rand index via pair counting with expected-index correction."""
    table = ContingencyTable.from_labels(pred, truth)
    if table.n < 2:
        raise ValueError("ARI needs at least two items")
    counts = table.counts
    index = _comb2(counts).sum()
    sum_rows = _comb2(counts.sum(axis=1)).sum()
    sum_cols = _comb2(counts.sum(axis=0)).sum()
    total = _comb2(np.array([table.n]))[0]
    expected = sum_rows * sum_cols / total
    max_index = (sum_rows + sum_cols) / 2.0
    denom = max_index - expected
    if denom == 0:
        return 1.0 if table.identical_partitions() else 0.0
    return float((index - expected) / denom)


def f1_score(pred, truth, average: str = "macro") -> float:
    """Per-class F1 after aligning predicted labels with the same optimal
    mapping as the accuracy score; unweighted or support-weighted mean."""
    if average not in ("macro", "weighted"):
        raise ValueError("average must be 'macro' or 'weighted'")
    table = ContingencyTable.from_labels(pred, truth)
    square = table.padded_square()
    rows, cols = _hungarian(table)
    kt = table.counts.shape[1]
    # square[p, c]: items predicted p with true class c; pred class p is mapped
    # to true class cols[p]
    col_of = np.empty(square.shape[0], dtype=np.int64)
    col_of[rows] = cols
    f1s = np.zeros(kt)
    support = table.counts.sum(axis=0).astype(np.float64)
    for c in range(kt):
        preds_mapped_to_c = np.flatnonzero(col_of == c)
        tp = square[preds_mapped_to_c, c].sum()
        predicted_c = square[preds_mapped_to_c, :].sum()
        actual_c = square[:, c].sum()
        precision = tp / predicted_c if predicted_c > 0 else 0.0
        recall = tp / actual_c if actual_c > 0 else 0.0
        f1s[c] = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    if average == "weighted":
        return float((f1s * support).sum() / support.sum())
    return float(f1s.mean())


def f1_macro(pred, truth) -> float:
    return f1_score(pred, truth, average="macro")


def all_metrics(pred, truth, *, f1_average: str = "macro") -> dict[str, float]:
    return {
        "acc": accuracy_hungarian(pred, truth),
        "nmi": nmi(pred, truth),
        "ari": ari(pred, truth),
        "f1": f1_score(pred, truth, average=f1_average),
    }
