"""Attention computations: softmax reference, quadratic-materialized linear
attention, the O(n) recurrent form, and rotary position embeddings.

Core weight computations are written batched over leading axes (..., n, d)
so the same code serves single heads and whole models. Backward helpers for
the softmax and linear normalizations live here too, shared by the
distillation and recall trainers.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .numerics import check_matrix

# Stabilizer added to every linear-attention row denominator. Rows whose raw
# denominator falls below it are degenerate (see DegenerateNormalizationError).
EPS_DEN = 1e-12


class DegenerateNormalizationError(ValueError):
    """A linear-attention row normalizer collapsed below EPS_DEN."""


class DegenCounter:
    """Counts rows where the EPS_DEN guard was the dominant term."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def reset(self):
        self.count = 0


DEGEN_EVENTS = DegenCounter()


@dataclass
class AttentionResult:
    outputs: np.ndarray  # (..., n, d)
    weights: Optional[np.ndarray]  # (..., n, n) row-stochastic, if requested


def causal_mask(n: int, m: Optional[int] = None) -> np.ndarray:
    """Boolean (n, m) mask, True where key j is visible to query i (j <= i)."""
    return np.tril(np.ones((n, m if m is not None else n), dtype=bool))


# ---------------------------------------------------------------------------
# Softmax attention (reference)
# ---------------------------------------------------------------------------


def softmax_weights(logits: np.ndarray, causal: bool) -> np.ndarray:
    """Stable row softmax over the last axis, optionally causal-masked."""
    n, m = logits.shape[-2], logits.shape[-1]
    if causal:
        visible = causal_mask(n, m)
        shifted = np.where(visible, logits, -np.inf)
        shifted = shifted - np.max(shifted, axis=-1, keepdims=True)
        e = np.where(visible, np.exp(shifted), 0.0)
    else:
        e = np.exp(logits - np.max(logits, axis=-1, keepdims=True))
    return e / np.sum(e, axis=-1, keepdims=True)


def softmax_weights_vjp(weights: np.ndarray, d_weights: np.ndarray) -> np.ndarray:
    """Backward of softmax_weights: d(logits) from d(weights)."""
    inner = np.sum(d_weights * weights, axis=-1, keepdims=True)
    return weights * (d_weights - inner)


def softmax_attention(
    q, k, v, causal: bool = False, scale: bool = True, return_weights: bool = True
) -> AttentionResult:
    """Standard attention: A = softmax(Q K^T / sqrt(d)), Y = A V.

    `scale` toggles the 1/sqrt(d) temperature (on by default).
    """
    q = check_matrix(q, "Q")
    k = check_matrix(k, "K")
    v = check_matrix(v, "V")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ValueError(
            f"shape mismatch: Q {q.shape}, K {k.shape}, V {v.shape}"
        )
    logits = q @ k.T
    if scale:
        logits = logits / np.sqrt(q.shape[1])
    a = softmax_weights(logits, causal)
    y = a @ v
    return AttentionResult(outputs=y, weights=a if return_weights else None)


# ---------------------------------------------------------------------------
# Linear attention, quadratic-materialized
# ---------------------------------------------------------------------------


def linear_weights(
    qf: np.ndarray, kf: np.ndarray, causal: bool, strict: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row-normalized similarity weights from featurized queries/keys.

    Returns (A, S, denom) where S[i, j] = phi(q_i).phi(k_j) over the visible
    range and denom is the per-row sum plus EPS_DEN. With `strict`, a raw
    denominator below EPS_DEN raises DegenerateNormalizationError naming the
    first offending row; otherwise the guard floors it and the event is
    counted.
    """
    s = qf @ np.swapaxes(kf, -1, -2)
    n, m = s.shape[-2], s.shape[-1]
    if causal:
        s = np.where(causal_mask(n, m), s, 0.0)
    raw = np.sum(s, axis=-1, keepdims=True)
    bad = raw < EPS_DEN
    if np.any(bad):
        DEGEN_EVENTS.add(int(np.count_nonzero(bad)))
        if strict:
            row = int(np.argwhere(bad)[0][-2])
            raise DegenerateNormalizationError(
                f"degenerate normalization in row {row}"
            )
    denom = raw + EPS_DEN
    return s / denom, s, denom


def linear_weights_vjp(
    s: np.ndarray, denom: np.ndarray, d_weights: np.ndarray, causal: bool
) -> np.ndarray:
    """Backward of the row normalization: dS from dA given A = S / denom."""
    inner = np.sum(d_weights * s, axis=-1, keepdims=True) / denom
    ds = (d_weights - inner) / denom
    if causal:
        n, m = ds.shape[-2], ds.shape[-1]
        ds = np.where(causal_mask(n, m), ds, 0.0)
    return ds


def linear_attention_quadratic(
    qf, kf, v, causal: bool = False, return_weights: bool = True, strict: bool = True
) -> AttentionResult:
    """Linear attention with the n x n weight matrix materialized.

    A[i, j] = phi(q_i).phi(k_j) / sum_m phi(q_i).phi(k_m), Y = A V.
    """
    qf = check_matrix(qf, "Qf")
    kf = check_matrix(kf, "Kf")
    v = check_matrix(v, "V")
    if qf.shape[1] != kf.shape[1] or kf.shape[0] != v.shape[0]:
        raise ValueError(
            f"shape mismatch: Qf {qf.shape}, Kf {kf.shape}, V {v.shape}"
        )
    a, _, _ = linear_weights(qf, kf, causal, strict=strict)
    return AttentionResult(outputs=a @ v, weights=a if return_weights else None)


# ---------------------------------------------------------------------------
# Linear attention, recurrent (causal only)
# ---------------------------------------------------------------------------


@dataclass
class RecurrentState:
    """Running sums S = sum_j phi(k_j) v_j^T and z = sum_j phi(k_j).

    Memory is d' x d + d' regardless of how many tokens have been absorbed.
    """

    s: np.ndarray  # (d', d)
    z: np.ndarray  # (d',)
    position: int = 0

    @staticmethod
    def zeros(d_feat: int, d_val: int) -> "RecurrentState":
        return RecurrentState(np.zeros((d_feat, d_val)), np.zeros(d_feat), 0)

    def update(self, kf_t: np.ndarray, v_t: np.ndarray):
        self.s += np.outer(kf_t, v_t)
        self.z += kf_t
        self.position += 1

    def readout(self, qf_t: np.ndarray, strict: bool = True) -> np.ndarray:
        num = qf_t @ self.s
        den = float(qf_t @ self.z)
        if den < EPS_DEN:
            DEGEN_EVENTS.add(1)
            if strict:
                raise DegenerateNormalizationError(
                    f"degenerate normalization at step {self.position - 1}"
                )
        return num / (den + EPS_DEN)

    def live_values(self) -> int:
        """Number of scalars held: the constant-in-n state-size claim."""
        return self.s.size + self.z.size


def linear_attention_recurrent(qf, kf, v, strict: bool = True) -> np.ndarray:
    """Causal linear attention in O(n d' d) time and O(d' d) state.

    Never materializes an n x n object; equals the quadratic form exactly up
    to float64 accumulation order.
    """
    qf = check_matrix(qf, "Qf")
    kf = check_matrix(kf, "Kf")
    v = check_matrix(v, "V")
    n, d_feat = qf.shape
    if kf.shape != (n, d_feat) or v.shape[0] != n:
        raise ValueError(
            f"shape mismatch: Qf {qf.shape}, Kf {kf.shape}, V {v.shape}"
        )
    state = RecurrentState.zeros(d_feat, v.shape[1])
    out = np.empty((n, v.shape[1]))
    for t in range(n):
        state.update(kf[t], v[t])
        out[t] = state.readout(qf[t], strict=strict)
    return out


# ---------------------------------------------------------------------------
# Rotary position embedding
# ---------------------------------------------------------------------------


def _rotary_trig(
    n: int, d: int, base: float, positions=None
) -> tuple[np.ndarray, np.ndarray]:
    if d % 2 != 0:
        raise ValueError(f"rotary needs even dimension, got {d}")
    if positions is None:
        positions = np.arange(n)
    freqs = base ** (-np.arange(0, d, 2, dtype=np.float64) / d)  # (d/2,)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * freqs[None, :]
    return np.cos(angles), np.sin(angles)


def apply_rotary(x, base: float = 10000.0, positions=None, inverse: bool = False):
    """Rotate adjacent coordinate pairs of each row by position-dependent
    angles (pair k uses frequency base^(-2k/d)).

    Row norms are preserved and dot products between rotated vectors depend
    on relative position only. `inverse` applies the transpose rotation,
    which is also the backward pass.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape[-2], x.shape[-1]
    cos, sin = _rotary_trig(n, d, base, positions)
    if inverse:
        sin = -sin
    x_even = x[..., 0::2]
    x_odd = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x_even * cos - x_odd * sin
    out[..., 1::2] = x_even * sin + x_odd * cos
    return out


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------


def export_weights_csv(a: np.ndarray, path):
    """Write a weight matrix as CSV, one row per line, 9 significant digits."""
    a = check_matrix(a, "weights")
    with open(path, "w") as fh:
        for row in a:
            fh.write(",".join(format(v, ".9g") for v in row) + "\n")
