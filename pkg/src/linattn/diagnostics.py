"""Quantified attention properties: low-entropy spikiness, within-row
dot-product monotonicity, and KL fidelity against the softmax reference."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attention import linear_weights, softmax_weights
from .feature_maps import FeatureMapSpec, featurize
from .numerics import check_matrix

ROW_SUM_TOL = 1e-6
KL_SMOOTH_EPS = 1e-12


@dataclass
class EntropyReport:
    per_row: np.ndarray  # Shannon entropy in nats, one per query row
    mean: float
    normalized_mean: float  # per-row H / ln(support), averaged; in [0, 1]


@dataclass
class MonotonicityReport:
    concordance: float  # fraction of D-ordered pairs whose A order agrees
    violations: int
    pairs_tested: int


@dataclass
class PropertyPanel:
    entropy: EntropyReport
    monotonicity: MonotonicityReport
    kl_vs_softmax: float


def _row_supports(n_rows: int, n_cols: int, causal: bool) -> np.ndarray:
    if causal:
        return np.minimum(np.arange(1, n_rows + 1), n_cols)
    return np.full(n_rows, n_cols)


def _check_stochastic(a: np.ndarray, causal: bool, name: str) -> np.ndarray:
    a = check_matrix(a, name)
    n, m = a.shape
    if np.any(a < 0):
        row = int(np.argwhere(a < 0)[0][0])
        raise ValueError(f"{name} row {row} has negative entries")
    if causal:
        upper = a * ~np.tril(np.ones((n, m), dtype=bool))
        if np.any(np.abs(upper) > 0):
            row = int(np.argwhere(np.abs(upper) > 0)[0][0])
            raise ValueError(f"{name} row {row} has mass above the diagonal")
    sums = a.sum(axis=1)
    off = np.abs(sums - 1.0)
    if np.any(off > ROW_SUM_TOL):
        row = int(np.argmax(off))
        raise ValueError(
            f"{name} row {row} is not stochastic (sum {sums[row]:.9g})"
        )
    return a


def attention_entropy(a, causal: bool = False) -> EntropyReport:
    """Per-row Shannon entropy (nats) of a row-stochastic weight matrix.

    normalized_mean divides each row by ln(its support size); causal row i
    has support i+1. Rows with a single visible position carry no
    information and are left out of the normalized mean.
    """
    a = _check_stochastic(a, causal, "weights")
    with np.errstate(divide="ignore", invalid="ignore"):
        logs = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), 0.0)
    per_row = -np.sum(a * logs, axis=1)
    supports = _row_supports(a.shape[0], a.shape[1], causal)
    multi = supports > 1
    normalized = (
        float(np.mean(per_row[multi] / np.log(supports[multi])))
        if np.any(multi)
        else 0.0
    )
    return EntropyReport(
        per_row=per_row, mean=float(per_row.mean()), normalized_mean=normalized
    )


def monotonicity_concordance(d, a, causal: bool = False) -> MonotonicityReport:
    """Within-row pairwise concordance between weights and dot products.

    For every row i and unordered pair {j, j'} in the visible range with
    D[i,j] != D[i,j'], the pair is a violation when sign(A[i,j] - A[i,j'])
    differs from sign(D[i,j] - D[i,j']). Dot-product ties are excluded.
    """
    d = check_matrix(d, "dot products")
    a = check_matrix(a, "weights")
    if d.shape != a.shape:
        raise ValueError(f"shape mismatch: D {d.shape} vs A {a.shape}")
    n, m = d.shape
    pairs = 0
    violations = 0
    for i in range(n):
        width = min(i + 1, m) if causal else m
        if width < 2:
            continue
        drow = d[i, :width]
        arow = a[i, :width]
        dd = np.sign(drow[:, None] - drow[None, :])
        da = np.sign(arow[:, None] - arow[None, :])
        upper = np.triu(np.ones((width, width), dtype=bool), k=1)
        valid = upper & (dd != 0)
        pairs += int(np.count_nonzero(valid))
        violations += int(np.count_nonzero(valid & (da != dd)))
    concordance = 1.0 if pairs == 0 else 1.0 - violations / pairs
    return MonotonicityReport(
        concordance=concordance, violations=violations, pairs_tested=pairs
    )


def attention_kl(a_true, a_pred, causal: bool = False) -> float:
    """Mean over rows of KL(A_true row || A_pred row).

    Both rows are mixed with KL_SMOOTH_EPS uniform mass and renormalized over
    the visible support before the log, so exact zeros in ReLU-style maps
    stay finite.
    """
    a_true = _check_stochastic(a_true, causal, "A_true")
    a_pred = check_matrix(a_pred, "A_pred")
    if a_true.shape != a_pred.shape:
        raise ValueError(
            f"shape mismatch: A_true {a_true.shape} vs A_pred {a_pred.shape}"
        )
    n, m = a_true.shape
    total = 0.0
    for i in range(n):
        width = min(i + 1, m) if causal else m
        p = a_true[i, :width] + KL_SMOOTH_EPS
        q = a_pred[i, :width] + KL_SMOOTH_EPS
        p = p / p.sum()
        q = q / q.sum()
        total += float(np.sum(p * (np.log(p) - np.log(q))))
    return total / n


def property_panel(
    q, k, spec: FeatureMapSpec, causal: bool = False
) -> PropertyPanel:
    """Entropy, monotonicity, and KL-vs-softmax for one feature map on one
    (Q, K) batch. The softmax teacher and the dot products D share the
    1/sqrt(d) scaling of the reference attention."""
    q = check_matrix(q, "Q")
    k = check_matrix(k, "K")
    if q.shape[1] != k.shape[1]:
        raise ValueError(f"shape mismatch: Q {q.shape}, K {k.shape}")
    d = (q @ k.T) / np.sqrt(q.shape[1])
    a_softmax = softmax_weights(d, causal)
    if spec.kind == "softmax_reference":
        a_map = a_softmax
    else:
        qf = featurize(spec, q, positions=np.arange(q.shape[0]))
        kf = featurize(spec, k, positions=np.arange(k.shape[0]))
        a_map, _, _ = linear_weights(qf, kf, causal, strict=True)
    return PropertyPanel(
        entropy=attention_entropy(a_map, causal),
        monotonicity=monotonicity_concordance(d, a_map, causal),
        kl_vs_softmax=attention_kl(a_softmax, a_map, causal),
    )


def panel_rows(panel: PropertyPanel) -> list[tuple[str, float]]:
    """Flatten a panel into (metric, value) pairs for CSV emission."""
    return [
        ("mean_entropy", panel.entropy.mean),
        ("normalized_entropy", panel.entropy.normalized_mean),
        ("concordance", panel.monotonicity.concordance),
        ("kl_vs_softmax", panel.kl_vs_softmax),
    ]
