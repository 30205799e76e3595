"""Attention-weight distillation: trains per-head feature maps so linear
attention weights match a frozen softmax teacher.

The teacher is any source of projected query/key batches; provided here are
frozen random projection heads (hidden states -> Q, K). The recall_lab
module can capture Q/K from a frozen toy transformer for the same purpose.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .attention import apply_rotary, linear_weights, softmax_weights
from .diagnostics import attention_kl
from .feature_maps import (
    FeatureMapSpec,
    HedgehogParams,
    featurize,
    hedgehog_spec,
    phi_hedgehog,
    phi_hedgehog_grads,
    spec_from_text,
    spec_to_text,
)
from .numerics import check_matrix

# QKBatch: per training batch, one (Q, K) pair per head, each (B, n, d).
QKBatch = Sequence[tuple[np.ndarray, np.ndarray]]


class CheckpointError(IOError):
    """A checkpoint directory is missing pieces or fails to parse."""


# ---------------------------------------------------------------------------
# Loss and analytic gradient (cross-entropy between teacher softmax weights
# and student linear-attention weights)
# ---------------------------------------------------------------------------


def teacher_weights(
    q: np.ndarray, k: np.ndarray, causal: bool, teacher_scale: bool
) -> np.ndarray:
    logits = q @ np.swapaxes(k, -1, -2)
    if teacher_scale:
        logits = logits / np.sqrt(q.shape[-1])
    return softmax_weights(logits, causal)


def _student_weights(q, k, params, activation, negation):
    qf = phi_hedgehog(q, params, activation, negation)
    kf = phi_hedgehog(k, params, activation, negation)
    return qf, kf


def distillation_loss(
    q,
    k,
    params: HedgehogParams,
    activation: str = "raw_exp",
    negation: bool = True,
    causal: bool = True,
    teacher_scale: bool = True,
) -> float:
    """Mean over query rows of the soft cross-entropy
    -sum_j T[i,j] ln A[i,j], teacher T from softmax, student A from the
    trainable map through the linear-attention normalization."""
    loss, _, _ = _loss_and_grads(
        q, k, params, activation, negation, causal, teacher_scale, want_grads=False
    )
    return loss


def distillation_grad(
    q,
    k,
    params: HedgehogParams,
    activation: str = "raw_exp",
    negation: bool = True,
    causal: bool = True,
    teacher_scale: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact gradient of distillation_loss w.r.t. (W, b)."""
    _, dw, db = _loss_and_grads(
        q, k, params, activation, negation, causal, teacher_scale, want_grads=True
    )
    return dw, db


def _loss_and_grads(
    q,
    k,
    params: HedgehogParams,
    activation: str,
    negation: bool,
    causal: bool,
    teacher_scale: bool,
    want_grads: bool,
    teacher_override: Optional[np.ndarray] = None,
):
    q = check_matrix(q, "Q")
    k = check_matrix(k, "K")
    n = q.shape[0]
    t = (
        teacher_override
        if teacher_override is not None
        else teacher_weights(q, k, causal, teacher_scale)
    )
    qf, kf = _student_weights(q, k, params, activation, negation)
    _, s, denom = linear_weights(qf, kf, causal, strict=True)

    # ln A = ln S - ln denom on the visible support (T is zero elsewhere).
    with np.errstate(divide="ignore"):
        log_s = np.where(t > 0, np.log(np.where(s > 0, s, 1.0)), 0.0)
    loss = float(np.mean(np.sum(t * (np.log(denom) - log_s), axis=-1)))
    if not want_grads:
        return loss, None, None

    # dL/dS[i,k] = (1/denom_i - T[i,k]/S[i,k]) / n over the visible range.
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(t > 0, t / np.where(s > 0, s, 1.0), 0.0)
    ds = (1.0 / denom - ratio) / n
    if causal:
        ds = np.where(np.tril(np.ones_like(ds, dtype=bool)), ds, 0.0)

    d_qf = ds @ kf
    d_kf = ds.T @ qf
    dw_q, db_q, _ = phi_hedgehog_grads(q, params, d_qf, activation, negation)
    dw_k, db_k, _ = phi_hedgehog_grads(k, params, d_kf, activation, negation)
    return loss, dw_q + dw_k, db_q + db_k


# ---------------------------------------------------------------------------
# AdamW (decoupled weight decay)
# ---------------------------------------------------------------------------


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @staticmethod
    def init(params: dict[str, np.ndarray]) -> "AdamWState":
        return AdamWState(
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
            step=0,
        )


def adamw_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamWState,
    lr: float,
    weight_decay: float = 0.0,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamWState]:
    """One bias-corrected AdamW update, in place.

    Weight decay is decoupled (multiplicative shrink before the moment
    step). Non-finite gradients raise before any state is touched.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name!r}")
        if g.shape != params[name].shape:
            raise ValueError(
                f"gradient shape mismatch for {name!r}: "
                f"{g.shape} vs {params[name].shape}"
            )
    state.step += 1
    c1 = 1.0 - beta1**state.step
    c2 = 1.0 - beta2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        if weight_decay:
            p *= 1.0 - lr * weight_decay
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


@dataclass
class TeacherHead:
    """Frozen query/key projections of one attention head."""

    wq: np.ndarray  # (d_model, d)
    wk: np.ndarray  # (d_model, d)
    rotary: bool = False
    rotary_base: float = 10000.0
    causal: bool = True

    def project(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Hidden states (..., n, d_model) -> (Q, K), each (..., n, d)."""
        q = x @ self.wq
        k = x @ self.wk
        if self.rotary:
            q = apply_rotary(q, self.rotary_base)
            k = apply_rotary(k, self.rotary_base)
        return q, k


def make_random_teacher(
    d_model: int, head_dim: int, n_heads: int, rng, causal: bool = True
) -> list[TeacherHead]:
    """Standalone frozen heads with Gaussian projections scaled 1/sqrt(d_model),
    so query/key entries are unit-scale for unit-scale hidden states."""
    scale = 1.0 / np.sqrt(d_model)
    return [
        TeacherHead(
            wq=rng.split(2 * h).gaussian(d_model, head_dim) * scale,
            wk=rng.split(2 * h + 1).gaussian(d_model, head_dim) * scale,
            causal=causal,
        )
        for h in range(n_heads)
    ]


def gaussian_sequences(rng, n_seqs: int, seq_len: int, d_model: int) -> np.ndarray:
    """Synthetic hidden-state stream: (n_seqs, seq_len, d_model) unit normals."""
    return rng.gaussian(n_seqs, seq_len, d_model)


def project_batches(
    heads: Sequence[TeacherHead], x_batches: Sequence[np.ndarray]
) -> list[list[tuple[np.ndarray, np.ndarray]]]:
    """Run hidden-state batches (B, n, d_model) through every frozen head."""
    return [[head.project(x) for head in heads] for x in x_batches]


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------


@dataclass
class DistillConfig:
    lr: float = 1e-2
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 2
    batch_size: int = 8
    causal: bool = True
    teacher_scale: bool = True
    activation: str = "raw_exp"
    negation: bool = True
    share_qk_map: bool = True  # one MLP per head for queries and keys


@dataclass
class DistillSession:
    head_labels: list[str]
    students: list[dict[str, np.ndarray]]  # weight/bias (plus _k copies if unshared)
    opt_states: list[AdamWState]
    config: DistillConfig
    loss_history: list[list[float]] = field(default_factory=list)  # [epoch][head]

    @property
    def n_heads(self) -> int:
        return len(self.head_labels)

    def student_params(self, h: int, side: str = "q") -> HedgehogParams:
        suffix = "" if (self.config.share_qk_map or side == "q") else "_k"
        return HedgehogParams(
            weight=self.students[h][f"weight{suffix}"],
            bias=self.students[h][f"bias{suffix}"],
        )

    def student_spec(self, h: int, side: str = "q") -> FeatureMapSpec:
        p = self.student_params(h, side)
        return hedgehog_spec(
            p.weight.shape[0],
            params=p.copy(),
            activation=self.config.activation,
            negation=self.config.negation,
        )


def make_session(
    head_dim: int, head_labels: Sequence[str], config: DistillConfig
) -> DistillSession:
    students = []
    for _ in head_labels:
        params = {"weight": np.eye(head_dim), "bias": np.zeros(head_dim)}
        if not config.share_qk_map:
            params["weight_k"] = np.eye(head_dim)
            params["bias_k"] = np.zeros(head_dim)
        students.append(params)
    return DistillSession(
        head_labels=list(head_labels),
        students=students,
        opt_states=[AdamWState.init(p) for p in students],
        config=config,
        loss_history=[],
    )


def _head_batch_loss_and_grads(
    session: DistillSession, h: int, qk: tuple[np.ndarray, np.ndarray]
):
    cfg = session.config
    q_all, k_all = qk
    if q_all.ndim == 2:
        q_all = q_all[None]
        k_all = k_all[None]
    params = session.students[h]
    total_loss = 0.0
    grads = {name: np.zeros_like(p) for name, p in params.items()}
    b = q_all.shape[0]
    for s in range(b):
        if cfg.share_qk_map:
            loss, dw, db = _loss_and_grads(
                q_all[s], k_all[s],
                HedgehogParams(params["weight"], params["bias"]),
                cfg.activation, cfg.negation, cfg.causal, cfg.teacher_scale,
                want_grads=True,
            )
            grads["weight"] += dw / b
            grads["bias"] += db / b
        else:
            loss, dq, dk = _loss_and_grads_separate(session, h, q_all[s], k_all[s])
            grads["weight"] += dq[0] / b
            grads["bias"] += dq[1] / b
            grads["weight_k"] += dk[0] / b
            grads["bias_k"] += dk[1] / b
        total_loss += loss / b
    return total_loss, grads


def _loss_and_grads_separate(session: DistillSession, h: int, q, k):
    """Distillation with distinct query and key MLPs (unshared variant)."""
    cfg = session.config
    pq = session.student_params(h, "q")
    pk = session.student_params(h, "k")
    n = q.shape[0]
    t = teacher_weights(q, k, cfg.causal, cfg.teacher_scale)
    qf = phi_hedgehog(q, pq, cfg.activation, cfg.negation)
    kf = phi_hedgehog(k, pk, cfg.activation, cfg.negation)
    _, s, denom = linear_weights(qf, kf, cfg.causal, strict=True)
    with np.errstate(divide="ignore"):
        log_s = np.where(t > 0, np.log(np.where(s > 0, s, 1.0)), 0.0)
    loss = float(np.mean(np.sum(t * (np.log(denom) - log_s), axis=-1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(t > 0, t / np.where(s > 0, s, 1.0), 0.0)
    ds = (1.0 / denom - ratio) / n
    if cfg.causal:
        ds = np.where(np.tril(np.ones_like(ds, dtype=bool)), ds, 0.0)
    dw_q, db_q, _ = phi_hedgehog_grads(q, pq, ds @ kf, cfg.activation, cfg.negation)
    dw_k, db_k, _ = phi_hedgehog_grads(k, pk, ds.T @ qf, cfg.activation, cfg.negation)
    return loss, (dw_q, db_q), (dw_k, db_k)


def distill_session_run(
    session: DistillSession, qk_batches: Sequence[QKBatch]
) -> DistillSession:
    """Train every head's feature map against its teacher weights.

    `qk_batches` is re-iterated once per epoch; heads share no state, so the
    per-head updates are order-independent. Aborts if the mean loss exceeds
    10x its initial value for 3 consecutive epochs.
    """
    if len(qk_batches) == 0:
        raise ValueError("need at least one batch")
    cfg = session.config
    initial_mean: Optional[float] = None
    diverged_streak = 0
    for _ in range(cfg.epochs):
        sums = np.zeros(session.n_heads)
        counts = 0
        for batch in qk_batches:
            if len(batch) != session.n_heads:
                raise ValueError(
                    f"batch has {len(batch)} heads, session has {session.n_heads}"
                )
            for h in range(session.n_heads):
                loss, grads = _head_batch_loss_and_grads(session, h, batch[h])
                adamw_step(
                    session.students[h],
                    grads,
                    session.opt_states[h],
                    lr=cfg.lr,
                    weight_decay=cfg.weight_decay,
                    beta1=cfg.beta1,
                    beta2=cfg.beta2,
                    eps=cfg.eps,
                )
                sums[h] += loss
            counts += 1
        epoch_losses = sums / counts
        session.loss_history.append([float(x) for x in epoch_losses])
        mean_loss = float(epoch_losses.mean())
        if initial_mean is None:
            initial_mean = mean_loss
        diverged_streak = diverged_streak + 1 if mean_loss > 10.0 * initial_mean else 0
        if diverged_streak >= 3:
            raise RuntimeError(
                f"distillation diverged: mean loss {mean_loss:.6g} exceeded "
                f"10x initial {initial_mean:.6g} for 3 consecutive epochs"
            )
    return session


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


def heldout_kl(
    qk_batches: Sequence[QKBatch],
    specs: Sequence[FeatureMapSpec],
    causal: bool = True,
    teacher_scale: bool = True,
) -> float:
    """Mean KL(teacher softmax || feature-map weights) over heads and
    sequences, on identical inputs."""
    total = 0.0
    count = 0
    for batch in qk_batches:
        for h, (q_all, k_all) in enumerate(batch):
            if q_all.ndim == 2:
                q_all = q_all[None]
                k_all = k_all[None]
            spec = specs[h] if len(specs) > 1 else specs[0]
            for s in range(q_all.shape[0]):
                q, k = q_all[s], k_all[s]
                t = teacher_weights(q, k, causal, teacher_scale)
                pos = np.arange(q.shape[0])
                qf = featurize(spec, q, positions=pos)
                kf = featurize(spec, k, positions=pos)
                a, _, _ = linear_weights(qf, kf, causal, strict=False)
                total += attention_kl(t, a, causal)
                count += 1
    if count == 0:
        raise ValueError("no evaluation sequences")
    return total / count


# ---------------------------------------------------------------------------
# Checkpoints: one FeatureMapSpec text file per head plus a manifest.
# ---------------------------------------------------------------------------

MANIFEST_NAME = "manifest.txt"
LOSS_CSV_NAME = "loss_curve.csv"


def save_session(session: DistillSession, out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    for h, label in enumerate(session.head_labels):
        with open(os.path.join(out_dir, f"{label}.spec.txt"), "w") as fh:
            fh.write(spec_to_text(session.student_spec(h, "q")))
        if not session.config.share_qk_map:
            with open(os.path.join(out_dir, f"{label}.k.spec.txt"), "w") as fh:
                fh.write(spec_to_text(session.student_spec(h, "k")))
    cfg = session.config
    with open(os.path.join(out_dir, MANIFEST_NAME), "w") as fh:
        fh.write(f"n_heads={session.n_heads}\n")
        fh.write("heads=" + ",".join(session.head_labels) + "\n")
        for key in (
            "lr", "weight_decay", "beta1", "beta2", "eps", "epochs",
            "batch_size", "causal", "teacher_scale", "activation",
            "negation", "share_qk_map",
        ):
            val = getattr(cfg, key)
            if isinstance(val, bool):
                val = int(val)
            fh.write(f"{key}={val}\n")
        fh.write(f"epochs_recorded={len(session.loss_history)}\n")
        if session.loss_history:
            final = ",".join(format(x, ".17g") for x in session.loss_history[-1])
            fh.write(f"final_losses={final}\n")
    with open(os.path.join(out_dir, LOSS_CSV_NAME), "w") as fh:
        fh.write("epoch,head,loss\n")
        for e, row in enumerate(session.loss_history):
            for label, loss in zip(session.head_labels, row):
                fh.write(f"{e},{label},{format(loss, '.17g')}\n")


def load_session(ckpt_dir: str) -> DistillSession:
    manifest_path = os.path.join(ckpt_dir, MANIFEST_NAME)
    if not os.path.isfile(manifest_path):
        raise CheckpointError(f"missing manifest in {ckpt_dir}")
    try:
        with open(manifest_path) as fh:
            fields = dict(
                line.strip().split("=", 1)
                for line in fh
                if line.strip() and "=" in line
            )
        labels = fields["heads"].split(",")
        cfg = DistillConfig(
            lr=float(fields["lr"]),
            weight_decay=float(fields["weight_decay"]),
            beta1=float(fields["beta1"]),
            beta2=float(fields["beta2"]),
            eps=float(fields["eps"]),
            epochs=int(fields["epochs"]),
            batch_size=int(fields["batch_size"]),
            causal=bool(int(fields["causal"])),
            teacher_scale=bool(int(fields["teacher_scale"])),
            activation=fields["activation"],
            negation=bool(int(fields["negation"])),
            share_qk_map=bool(int(fields["share_qk_map"])),
        )
        students = []
        for label in labels:
            with open(os.path.join(ckpt_dir, f"{label}.spec.txt")) as fh:
                spec = spec_from_text(fh.read())
            if spec.kind != "hedgehog":
                raise CheckpointError(f"head {label} is not a trainable map")
            params = {"weight": spec.hedgehog.weight, "bias": spec.hedgehog.bias}
            if not cfg.share_qk_map:
                with open(os.path.join(ckpt_dir, f"{label}.k.spec.txt")) as fh:
                    spec_k = spec_from_text(fh.read())
                params["weight_k"] = spec_k.hedgehog.weight
                params["bias_k"] = spec_k.hedgehog.bias
            students.append(params)
        history: list[list[float]] = []
        loss_path = os.path.join(ckpt_dir, LOSS_CSV_NAME)
        if os.path.isfile(loss_path):
            with open(loss_path) as fh:
                next(fh)
                for line in fh:
                    epoch, _, loss = line.strip().split(",")
                    e = int(epoch)
                    while len(history) <= e:
                        history.append([])
                    history[e].append(float(loss))
    except CheckpointError:
        raise
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint in {ckpt_dir}: {exc}") from exc
    return DistillSession(
        head_labels=labels,
        students=students,
        opt_states=[AdamWState.init(p) for p in students],
        config=cfg,
        loss_history=history,
    )
