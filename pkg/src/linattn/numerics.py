"""Dense float64 array helpers, deterministic RNG streams, and the
finite-difference gradient oracle that certifies every analytic gradient
in this package."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

# Floor for the relative-error denominator in gradient checks; avoids
# division blowup when both analytic and numeric values are near zero.
REL_ERR_FLOOR = 1e-8


def as_f64(x, name: str = "input") -> np.ndarray:
    """Coerce to a float64 array, rejecting non-finite entries."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite input: {name}")
    return arr


def check_matrix(m, name: str = "matrix") -> np.ndarray:
    """Validate a 2-D, non-empty, finite float64 matrix."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite input: {name}")
    return arr


class RngStream:
    """Counter-based (Philox) random stream.

    Identical seeds give identical draw sequences on every platform, and
    `split` derives independent child streams without consuming state, so
    parallel and serial runs draw the same numbers.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = tuple(int(p) for p in _path)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._path)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def split(self, index: int) -> "RngStream":
        """Derive the `index`-th child stream. Pure: does not advance self."""
        return RngStream(self.seed, self._path + (int(index),))

    def gaussian(self, *shape: int) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def choice(self, a, size=None, replace: bool = True):
        return self._gen.choice(a, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self._path})"


def seeded_gaussian(rng: RngStream, rows: int, cols: int) -> np.ndarray:
    """Draw a (rows, cols) matrix of i.i.d. standard normals from `rng`."""
    if rows <= 0 or cols <= 0:
        raise ValueError(f"dimensions must be positive, got ({rows}, {cols})")
    return rng.gaussian(rows, cols)


def softmax_rows(m, mask_causal: bool = False) -> np.ndarray:
    """Row-wise softmax with row-max subtraction for stability.

    With `mask_causal`, entry (i, j) is exactly 0 for j > i (row index read
    as query position), and each row normalizes over its visible prefix.
    """
    arr = check_matrix(m, "softmax input")
    rows, cols = arr.shape
    if mask_causal:
        visible = np.tril(np.ones((rows, cols), dtype=bool))
        shifted = np.where(visible, arr, -np.inf)
        shifted = shifted - np.max(shifted, axis=1, keepdims=True)
        e = np.where(visible, np.exp(shifted), 0.0)
    else:
        e = np.exp(arr - np.max(arr, axis=1, keepdims=True))
    return e / np.sum(e, axis=1, keepdims=True)


def finite_diff_grad(
    f: Callable[[np.ndarray], float], theta, eps: float = 1e-5
) -> np.ndarray:
    """Central-difference gradient of a scalar function at `theta`.

    This is the independent oracle: it never shares code with the analytic
    backward passes it certifies.
    """
    if not (1e-6 <= eps <= 1e-4):
        raise ValueError(f"eps must lie in [1e-6, 1e-4], got {eps}")
    theta = np.asarray(theta, dtype=np.float64).copy()
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    gflat = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + eps
        up = float(f(theta))
        flat[k] = orig - eps
        down = float(f(theta))
        flat[k] = orig
        if not (np.isfinite(up) and np.isfinite(down)):
            raise ValueError(f"non-finite function value at coordinate {k}")
        gflat[k] = (up - down) / (2.0 * eps)
    return grad


@dataclass
class GradCheckReport:
    max_rel_error: float
    worst_coordinate: int
    analytic: float
    numeric: float

    def __post_init__(self):
        assert self.max_rel_error >= 0.0


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """|a - n| / max(1e-8, |a|, |n|), elementwise."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(REL_ERR_FLOOR, np.maximum(np.abs(a), np.abs(n)))
    return np.abs(a - n) / denom


def grad_check(
    f: Callable[[np.ndarray], float],
    analytic_grad,
    theta,
    eps: float = 1e-5,
) -> GradCheckReport:
    """Compare an analytic gradient against central finite differences."""
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    numeric = finite_diff_grad(f, theta, eps)
    if analytic.shape != numeric.shape:
        raise ValueError(
            f"gradient shape mismatch: {analytic.shape} vs {numeric.shape}"
        )
    rel = relative_error(analytic, numeric).reshape(-1)
    worst = int(np.argmax(rel)) if rel.size else 0
    return GradCheckReport(
        max_rel_error=float(rel[worst]) if rel.size else 0.0,
        worst_coordinate=worst,
        analytic=float(analytic.reshape(-1)[worst]) if rel.size else 0.0,
        numeric=float(numeric.reshape(-1)[worst]) if rel.size else 0.0,
    )
