"""Clustering agreement metrics, all derived from one contingency table.

Label values are arbitrary hashable integers; every metric is invariant to
relabeling. NMI uses arithmetic-mean normalization; ACC solves the optimal
one-to-one matching on the (square-padded) table; ARI is the pair-counting
adjusted index.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import EmptyInputError, LengthMismatchError


def contingency_table(truth, predicted) -> np.ndarray:
    """Counts[i, j] = #points with truth label i and predicted label j (labels sorted)."""
    t = np.asarray(truth).ravel()
    p = np.asarray(predicted).ravel()
    if t.size == 0:
        raise EmptyInputError("metrics need at least one point")
    if t.size != p.size:
        raise LengthMismatchError(f"lengths {t.size} and {p.size} differ")
    t_values, t_idx = np.unique(t, return_inverse=True)
    p_values, p_idx = np.unique(p, return_inverse=True)
    table = np.zeros((t_values.size, p_values.size), dtype=np.int64)
    np.add.at(table, (t_idx, p_idx), 1)
    return table


def _entropy(counts: np.ndarray, total: int) -> float:
    probs = counts[counts > 0] / total
    return float(-np.sum(probs * np.log(probs)))


def nmi(truth, predicted) -> float:
    """Mutual information normalized by the arithmetic mean of the two label entropies.

    Both partitions trivial (zero entropy) gives 1.0; exactly one trivial gives 0.0.
    """
    table = contingency_table(truth, predicted)
    n = int(table.sum())
    row = table.sum(axis=1)
    col = table.sum(axis=0)
    h_t = _entropy(row, n)
    h_p = _entropy(col, n)
    if h_t == 0.0 and h_p == 0.0:
        return 1.0
    nz = table > 0
    joint = table[nz] / n
    outer = np.outer(row, col)[nz] / (n * n)
    info = float(np.sum(joint * np.log(joint / outer)))
    return info / ((h_t + h_p) / 2.0)


def acc(truth, predicted) -> float:
    """Clustering accuracy: best one-to-one label matching, found on the padded square table."""
    table = contingency_table(truth, predicted)
    size = max(table.shape)
    padded = np.zeros((size, size), dtype=np.int64)
    padded[: table.shape[0], : table.shape[1]] = table
    rows, cols = linear_sum_assignment(-padded)  # maximize matched count
    return float(padded[rows, cols].sum()) / float(table.sum())


def ari(truth, predicted) -> float:
    """Adjusted Rand index via pair counting; 1.0 when the denominator degenerates
    (both partitions trivial in the same way)."""
    table = contingency_table(truth, predicted)
    n = int(table.sum())
    if n < 2:
        return 1.0

    def pairs(x) -> float:
        x = np.asarray(x, dtype=np.float64)
        return float(np.sum(x * (x - 1.0) / 2.0))

    index = pairs(table)
    sum_rows = pairs(table.sum(axis=1))
    sum_cols = pairs(table.sum(axis=0))
    total = n * (n - 1.0) / 2.0
    expected = sum_rows * sum_cols / total
    maximum = (sum_rows + sum_cols) / 2.0
    if maximum == expected:
        return 1.0
    return (index - expected) / (maximum - expected)
