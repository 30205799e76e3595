"""Wall-clock and memory scaling of softmax vs linear attention, plus the
context-length KL-stability study.

Memory is an explicit accounting model (bytes of live arrays each algorithm
needs), not process RSS, so the asymptotic claims are platform-independent.
Timing uses a monotonic clock, warmup discards, and median-of-repeats; no
timing row is emitted unless the kind's output first matches an independent
reference computation on the same inputs.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import feature_maps as fm
from .attention import DEGEN_EVENTS, EPS_DEN
from .distill import TeacherHead, gaussian_sequences, heldout_kl, project_batches
from .feature_maps import CLAMP_EVENTS, FeatureMapSpec, featurize, hedgehog_spec
from .numerics import RngStream

BENCH_KINDS = (
    "softmax",
    "hedgehog-recurrent",
    "hedgehog-quadratic",
    "taylor2-recurrent",
)

FEATURE_CHUNK = 512  # tokens featurized per block in the recurrent path
GATE_ROWS = 128  # rows recomputed exactly for the softmax gate


@dataclass
class BenchConfig:
    n_heads: int = 12
    head_dim: int = 64
    seq_lens: Sequence[int] = (512, 1024, 2048, 4096, 8192, 16384, 32768)
    repeats: int = 3
    warmup: int = 1
    dtype: str = "f32"  # timing dtype; correctness gates use the same
    mem_budget_bytes: int = 2_500_000_000
    seed: int = 0

    def validate(self):
        if self.repeats < 3:
            raise ValueError("repeats must be >= 3")
        if list(self.seq_lens) != sorted(self.seq_lens):
            raise ValueError("seq_lens must be ascending")
        if self.dtype not in ("f32", "f64"):
            raise ValueError(f"dtype must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64

    @property
    def gate_tol(self) -> float:
        return 1e-4 if self.dtype == "f32" else 1e-8


@dataclass
class BenchRow:
    kind: str
    n: int
    median_seconds: float
    p25_seconds: float
    p75_seconds: float
    peak_live_bytes: int
    state_bytes: int  # constant-in-n recurrent state term (0 for quadratic)
    clamp_events: int
    degen_events: int
    gate_max_abs_err: float
    gate_ok: bool
    skipped: bool = False
    skip_reason: str = ""


# ---------------------------------------------------------------------------
# Accounting model: bytes of simultaneously live arrays, per head, plus the
# unavoidable per-head inputs/outputs (Q, K, V, Y).
# ---------------------------------------------------------------------------


def io_bytes(n: int, d: int, itemsize: int) -> int:
    return 4 * n * d * itemsize


def softmax_peak_bytes(n: int, d: int, itemsize: int) -> int:
    # One n x n score matrix, normalized in place.
    return io_bytes(n, d, itemsize) + n * n * itemsize


def quadratic_peak_bytes(n: int, d: int, d_feat: int, itemsize: int) -> int:
    # Featurized Q and K plus the n x n similarity matrix.
    return io_bytes(n, d, itemsize) + (2 * n * d_feat + n * n) * itemsize


def recurrent_state_bytes(d: int, d_feat: int, itemsize: int) -> int:
    return (d_feat * d + d_feat) * itemsize


def recurrent_peak_bytes(n: int, d: int, d_feat: int, itemsize: int) -> int:
    # Inputs/outputs plus constant-size working set: two feature chunks and
    # the running state. The only n-dependent term is the I/O term.
    chunk = min(FEATURE_CHUNK, n)
    working = 2 * chunk * d_feat * itemsize
    return io_bytes(n, d, itemsize) + working + recurrent_state_bytes(d, d_feat, itemsize)


# ---------------------------------------------------------------------------
# Bench kernels (head-sequential, dtype-configurable)
# ---------------------------------------------------------------------------


def _mask_causal_inplace(scores: np.ndarray, fill: float, block: int = 1024):
    """Set entries above the diagonal to `fill` without a full n x n mask."""
    n = scores.shape[0]
    cols = np.arange(scores.shape[1])
    for start in range(0, n, block):
        stop = min(start + block, n)
        rows = np.arange(start, stop)
        scores[start:stop][cols[None, :] > rows[:, None]] = fill


def _softmax_head(q, k, v):
    d = q.shape[1]
    scores = q @ k.T
    scores /= np.asarray(np.sqrt(d), dtype=scores.dtype)
    _mask_causal_inplace(scores, -np.inf)
    scores -= scores.max(axis=1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=1, keepdims=True)
    return scores @ v


def _quadratic_head(spec: FeatureMapSpec, q, k, v, dtype):
    qf = featurize(spec, q.astype(np.float64)).astype(dtype)
    kf = featurize(spec, k.astype(np.float64)).astype(dtype)
    s = qf @ kf.T
    _mask_causal_inplace(s, 0.0)
    denom = s.sum(axis=1, keepdims=True) + np.asarray(EPS_DEN, dtype=dtype)
    s /= denom
    return s @ v


def _recurrent_head(spec: FeatureMapSpec, q, k, v, dtype, d_feat):
    n, d = q.shape
    state = np.zeros((d_feat, d), dtype=dtype)
    zsum = np.zeros(d_feat, dtype=dtype)
    out = np.empty((n, d), dtype=dtype)
    eps = dtype(EPS_DEN)
    for start in range(0, n, FEATURE_CHUNK):
        stop = min(start + FEATURE_CHUNK, n)
        qf = featurize(spec, q[start:stop].astype(np.float64)).astype(dtype)
        kf = featurize(spec, k[start:stop].astype(np.float64)).astype(dtype)
        for t in range(stop - start):
            state += np.outer(kf[t], v[start + t])
            zsum += kf[t]
            num = qf[t] @ state
            den = qf[t] @ zsum
            out[start + t] = num / (den + eps)
    return out


def _linear_row_reference(spec, q, k, v, rows, dtype):
    """Direct definition of selected linear-attention rows: featurize, take
    the visible prefix, normalize, and average the values."""
    kf = featurize(spec, k.astype(np.float64)).astype(dtype)
    out = np.empty((len(rows), v.shape[1]), dtype=dtype)
    for idx, i in enumerate(rows):
        qf_i = featurize(spec, q[i].astype(np.float64)).astype(dtype)
        s = qf_i @ kf[: i + 1].T
        out[idx] = (s / (s.sum() + np.asarray(EPS_DEN, dtype=dtype))) @ v[: i + 1]
    return out


def _softmax_row_reference(q, k, v, rows):
    """Exact per-row recomputation of selected softmax attention rows."""
    d = q.shape[1]
    out = np.empty((len(rows), v.shape[1]), dtype=q.dtype)
    for idx, i in enumerate(rows):
        logits = (q[i] @ k[: i + 1].T) / np.asarray(np.sqrt(d), dtype=q.dtype)
        logits = logits - logits.max()
        w = np.exp(logits)
        w = w / w.sum()
        out[idx] = w @ v[: i + 1]
    return out


def _bench_specs(cfg: BenchConfig) -> dict[str, FeatureMapSpec]:
    return {
        "hedgehog": hedgehog_spec(cfg.head_dim),
        "taylor2": FeatureMapSpec(kind="taylor2"),
    }


def _kind_layout(kind: str, cfg: BenchConfig):
    """(base feature map or None, mode) for a bench kind name."""
    if kind == "softmax":
        return None, "softmax"
    base, mode = kind.rsplit("-", 1)
    if base not in ("hedgehog", "taylor2") or mode not in ("recurrent", "quadratic"):
        raise ValueError(f"unknown bench kind {kind!r}")
    return base, mode


def _accounting(kind: str, n: int, cfg: BenchConfig) -> tuple[int, int]:
    itemsize = np.dtype(cfg.np_dtype).itemsize
    d = cfg.head_dim
    base, mode = _kind_layout(kind, cfg)
    if mode == "softmax":
        return softmax_peak_bytes(n, d, itemsize), 0
    spec = _bench_specs(cfg)[base]
    d_feat = fm.feature_dim(spec, d)
    if mode == "quadratic":
        return quadratic_peak_bytes(n, d, d_feat, itemsize), 0
    return (
        recurrent_peak_bytes(n, d, d_feat, itemsize),
        recurrent_state_bytes(d, d_feat, itemsize),
    )


def _run_kind(kind: str, q, k, v, cfg: BenchConfig):
    """Execute one (kind, n) cell over all heads; returns (outputs, runner)."""
    base, mode = _kind_layout(kind, cfg)
    dtype = cfg.np_dtype
    specs = _bench_specs(cfg)

    def runner():
        outs = np.empty_like(v)
        for h in range(q.shape[0]):
            if mode == "softmax":
                outs[h] = _softmax_head(q[h], k[h], v[h])
            elif mode == "quadratic":
                outs[h] = _quadratic_head(specs[base], q[h], k[h], v[h], dtype)
            else:
                d_feat = fm.feature_dim(specs[base], cfg.head_dim)
                outs[h] = _recurrent_head(
                    specs[base], q[h], k[h], v[h], dtype, d_feat
                )
        return outs

    return runner


def _gate(kind: str, q, k, v, outputs, cfg: BenchConfig) -> float:
    """Max-abs error of `outputs` against the kind's independent reference.

    References are per-row direct evaluations of the defining formula: all
    rows when n is small, a seeded random subset at large n so the gate
    stays cheap relative to the timed kernel."""
    base, mode = _kind_layout(kind, cfg)
    dtype = cfg.np_dtype
    specs = _bench_specs(cfg)
    n = q.shape[1]
    err = 0.0
    gate_rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(7)))
    for h in range(q.shape[0]):
        if n <= 1024:
            rows = np.arange(n)
        else:
            rows = np.unique(gate_rng.integers(0, n, size=GATE_ROWS))
        if mode == "softmax":
            ref = _softmax_row_reference(q[h], k[h], v[h], rows)
        else:
            ref = _linear_row_reference(specs[base], q[h], k[h], v[h], rows, dtype)
        err = max(err, float(np.max(np.abs(ref - outputs[h][rows]))))
    return err


def bench_attention(cfg: BenchConfig, kinds: Sequence[str]) -> list[BenchRow]:
    """Median wall-clock time and accounted peak memory per (kind, n).

    Cells whose accounted memory exceeds the budget are marked skipped;
    larger n values are still attempted for the other kinds.
    """
    cfg.validate()
    rows: list[BenchRow] = []
    rng = RngStream(cfg.seed)
    for kind in kinds:
        _kind_layout(kind, cfg)  # validate early
    for ni, n in enumerate(cfg.seq_lens):
        for ki, kind in enumerate(kinds):
            peak, state_b = _accounting(kind, n, cfg)
            if peak > cfg.mem_budget_bytes:
                rows.append(
                    BenchRow(
                        kind=kind, n=n, median_seconds=np.nan,
                        p25_seconds=np.nan, p75_seconds=np.nan,
                        peak_live_bytes=peak, state_bytes=state_b,
                        clamp_events=0, degen_events=0,
                        gate_max_abs_err=np.nan, gate_ok=False,
                        skipped=True, skip_reason="over memory budget",
                    )
                )
                continue
            cell = rng.split(ni * 1000 + ki)
            dtype = cfg.np_dtype
            q = cell.split(0).gaussian(cfg.n_heads, n, cfg.head_dim).astype(dtype)
            k = cell.split(1).gaussian(cfg.n_heads, n, cfg.head_dim).astype(dtype)
            v = cell.split(2).gaussian(cfg.n_heads, n, cfg.head_dim).astype(dtype)
            CLAMP_EVENTS.reset()
            DEGEN_EVENTS.reset()
            runner = _run_kind(kind, q, k, v, cfg)
            outputs = runner()  # doubles as the first warmup run
            clamp = CLAMP_EVENTS.count
            degen = DEGEN_EVENTS.count
            gate_err = _gate(kind, q, k, v, outputs, cfg)
            gate_ok = gate_err <= cfg.gate_tol
            if not gate_ok:
                rows.append(
                    BenchRow(
                        kind=kind, n=n, median_seconds=np.nan,
                        p25_seconds=np.nan, p75_seconds=np.nan,
                        peak_live_bytes=peak, state_bytes=state_b,
                        clamp_events=clamp, degen_events=degen,
                        gate_max_abs_err=gate_err, gate_ok=False,
                        skipped=True, skip_reason="correctness gate failed",
                    )
                )
                continue
            for _ in range(max(cfg.warmup - 1, 0)):
                runner()
            times = []
            for _ in range(cfg.repeats):
                t0 = time.perf_counter()
                runner()
                times.append(time.perf_counter() - t0)
            times = np.sort(times)
            rows.append(
                BenchRow(
                    kind=kind, n=n,
                    median_seconds=float(np.median(times)),
                    p25_seconds=float(np.quantile(times, 0.25)),
                    p75_seconds=float(np.quantile(times, 0.75)),
                    peak_live_bytes=peak, state_bytes=state_b,
                    clamp_events=clamp, degen_events=degen,
                    gate_max_abs_err=gate_err, gate_ok=True,
                )
            )
    return rows


def doubling_ratios(rows: Sequence[BenchRow], kind: str) -> list[tuple[int, float]]:
    """(n, time(n)/time(n/2)) for consecutive doubled lengths of one kind."""
    timed = {r.n: r.median_seconds for r in rows if r.kind == kind and not r.skipped}
    out = []
    for n, t in sorted(timed.items()):
        if n // 2 in timed and timed[n // 2] > 0:
            out.append((n, t / timed[n // 2]))
    return out


# ---------------------------------------------------------------------------
# Context-length KL stability
# ---------------------------------------------------------------------------


def build_length_eval_batches(
    heads: Sequence[TeacherHead],
    rng: RngStream,
    d_model: int,
    sample_len: int,
    length: int,
    n_seqs: int,
):
    """Evaluation sequences of `length` tokens made by concatenating fresh
    held-out samples of `sample_len` tokens each."""
    if length < sample_len:
        raise ValueError(
            f"length {length} shorter than one sample ({sample_len})"
        )
    n_chunks = length // sample_len
    actual = n_chunks * sample_len
    xs = gaussian_sequences(rng, n_seqs, actual, d_model)
    return project_batches(heads, [xs])


def context_length_kl(
    specs: Sequence[FeatureMapSpec],
    heads: Sequence[TeacherHead],
    rng: RngStream,
    d_model: int,
    sample_len: int,
    lengths: Sequence[int],
    n_seqs: int = 4,
    causal: bool = True,
    teacher_scale: bool = True,
) -> list[tuple[int, float]]:
    """Per-length mean KL(teacher softmax || student linear weights) on
    identical held-out inputs; `specs` gives one trained map per head."""
    out = []
    for li, length in enumerate(lengths):
        batches = build_length_eval_batches(
            heads, rng.split(li), d_model, sample_len, length, n_seqs
        )
        kl = heldout_kl(batches, specs, causal=causal, teacher_scale=teacher_scale)
        out.append((length, kl))
    return out
