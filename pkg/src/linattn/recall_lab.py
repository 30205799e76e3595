"""Associative-recall laboratory: synthetic key-value recall data, a small
decoder-only transformer with a swappable attention similarity, full manual
backpropagation, and an early-stopping trainer.

The transformer is pre-norm (RMSNorm) with rotary embeddings, a 4x SiLU
feedforward, and an untied output head. Linear-attention kinds run through
the quadratic-materialized path so attention weights stay available for
entropy logging; gradients for every parameter (including the trainable
feature maps) are written by hand and certified against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .attention import (
    apply_rotary,
    causal_mask,
    linear_weights,
    linear_weights_vjp,
    softmax_weights,
    softmax_weights_vjp,
)
from .feature_maps import FeatureMapSpec, HedgehogParams, featurize, featurize_vjp
from .numerics import RngStream

NORM_EPS = 1e-6


# ---------------------------------------------------------------------------
# Dataset
# ---------------------------------------------------------------------------


@dataclass
class RecallConfig:
    vocab_size: int = 40
    seq_len: int = 128  # pairs + query + answer; model input is seq_len - 1
    n_train: int = 10000
    n_test: int = 2000
    n_keys: Optional[int] = None  # default: first half of the vocab

    def __post_init__(self):
        if self.n_keys is None:
            self.n_keys = self.vocab_size // 2

    @property
    def n_values(self) -> int:
        return self.vocab_size - self.n_keys

    @property
    def n_pairs(self) -> int:
        return (self.seq_len - 2) // 2

    def validate(self):
        if self.seq_len < 4 or self.seq_len % 2 != 0:
            raise ValueError(f"seq_len must be even and >= 4, got {self.seq_len}")
        if self.n_keys < 1 or self.n_values < 1:
            raise ValueError(
                f"infeasible vocab split: {self.n_keys} keys / {self.n_values} values"
            )
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("need at least one train and one test sample")


@dataclass
class RecallDataset:
    tokens: np.ndarray  # (N, seq_len - 1) int64: pairs then the query key
    labels: np.ndarray  # (N,) int64: the queried key's value
    n_keys: int
    n_values: int


def _gen_split(cfg: RecallConfig, rng: RngStream, n: int) -> RecallDataset:
    n_pairs = cfg.n_pairs
    keys = np.asarray(rng.integers(0, cfg.n_keys, size=(n, n_pairs)))
    # One value per key per sample: the association table is resampled fresh
    # for every sample, so test sequences carry unseen pairings.
    table = np.asarray(
        rng.integers(cfg.n_keys, cfg.vocab_size, size=(n, cfg.n_keys))
    )
    values = np.take_along_axis(table, keys, axis=1)
    tokens = np.empty((n, 2 * n_pairs + 1), dtype=np.int64)
    tokens[:, 0 : 2 * n_pairs : 2] = keys
    tokens[:, 1 : 2 * n_pairs + 1 : 2] = values
    # Query: uniform over the distinct keys present in the sample.
    for i in range(n):
        present = np.unique(keys[i])
        tokens[i, -1] = rng.choice(present)
    labels = np.take_along_axis(table, tokens[:, -1:], axis=1)[:, 0]
    return RecallDataset(
        tokens=tokens,
        labels=labels.astype(np.int64),
        n_keys=cfg.n_keys,
        n_values=cfg.n_values,
    )


def gen_recall_dataset(
    cfg: RecallConfig, rng: RngStream
) -> tuple[RecallDataset, RecallDataset]:
    """Generate (train, test) splits from disjoint RNG substreams."""
    cfg.validate()
    train = _gen_split(cfg, rng.split(0), cfg.n_train)
    test = _gen_split(cfg, rng.split(1), cfg.n_test)
    return train, test


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass
class ToyTransformerConfig:
    vocab_size: int = 40
    n_layers: int = 4
    n_heads: int = 4
    head_dim: int = 64
    mlp_expansion: int = 4
    rotary: bool = True
    rotary_base: float = 10000.0
    max_seq_len: int = 128
    attention_kind: str = "softmax_reference"
    exp_t_temperature: float = 2.0
    taylor_scaled: bool = False
    hedgehog_activation: str = "raw_exp"
    hedgehog_negation: bool = True
    performer_features: Optional[int] = None  # default: head_dim

    @property
    def width(self) -> int:
        return self.n_heads * self.head_dim

    @property
    def ff_dim(self) -> int:
        return self.mlp_expansion * self.width


class ToyTransformer:
    """Decoder-only transformer with hand-written forward and backward."""

    def __init__(self, cfg: ToyTransformerConfig, params: dict, specs):
        self.cfg = cfg
        self.params = params
        # specs[layer][head]: FeatureMapSpec, or None for softmax_reference.
        self.specs = specs

    def feature_spec(self, layer: int, head: int) -> Optional[FeatureMapSpec]:
        return self.specs[layer][head] if self.specs else None

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def load_params(self, params: dict):
        for k in self.params:
            self.params[k][...] = params[k]


def build_toy_transformer(cfg: ToyTransformerConfig, rng: RngStream) -> ToyTransformer:
    """Initialize all parameters from the given stream.

    Residual-writing projections are shrunk by 1/sqrt(2 n_layers); trainable
    feature maps start at the identity.
    """
    if cfg.head_dim % 2 != 0 and cfg.rotary:
        raise ValueError("rotary needs an even head dimension")
    w = cfg.width
    ff = cfg.ff_dim
    params: dict[str, np.ndarray] = {}
    r = rng.split(0)
    params["embed"] = r.split(0).gaussian(cfg.vocab_size, w) * 0.02
    resid_scale = 1.0 / np.sqrt(max(2 * cfg.n_layers, 1))
    for i in range(cfg.n_layers):
        lr = r.split(i + 1)
        params[f"l{i}.norm1"] = np.ones(w)
        params[f"l{i}.wq"] = lr.split(0).gaussian(w, w) / np.sqrt(w)
        params[f"l{i}.wk"] = lr.split(1).gaussian(w, w) / np.sqrt(w)
        params[f"l{i}.wv"] = lr.split(2).gaussian(w, w) / np.sqrt(w)
        params[f"l{i}.wo"] = lr.split(3).gaussian(w, w) / np.sqrt(w) * resid_scale
        params[f"l{i}.norm2"] = np.ones(w)
        params[f"l{i}.w1"] = lr.split(4).gaussian(w, ff) / np.sqrt(w)
        params[f"l{i}.w2"] = lr.split(5).gaussian(ff, w) / np.sqrt(ff) * resid_scale
    params["norm_f"] = np.ones(w)
    params["head"] = r.split(cfg.n_layers + 1).gaussian(w, cfg.vocab_size) * 0.02

    specs = None
    kind = cfg.attention_kind
    if kind != "softmax_reference":
        specs = []
        pr = rng.split(1)
        for i in range(cfg.n_layers):
            row = []
            for h in range(cfg.n_heads):
                if kind == "hedgehog":
                    params[f"l{i}.h{h}.fw"] = np.eye(cfg.head_dim)
                    params[f"l{i}.h{h}.fb"] = np.zeros(cfg.head_dim)
                    spec = FeatureMapSpec(
                        kind="hedgehog",
                        hedgehog=HedgehogParams(
                            params[f"l{i}.h{h}.fw"], params[f"l{i}.h{h}.fb"]
                        ),
                        activation=cfg.hedgehog_activation,
                        negation=cfg.hedgehog_negation,
                    )
                elif kind == "taylor2":
                    spec = FeatureMapSpec(kind="taylor2", scaled=cfg.taylor_scaled)
                elif kind == "exp_t":
                    spec = FeatureMapSpec(
                        kind="exp_t", temperature=cfg.exp_t_temperature
                    )
                elif kind in ("elu1", "relu"):
                    spec = FeatureMapSpec(kind=kind)
                elif kind == "performer":
                    m = cfg.performer_features or cfg.head_dim
                    proj = pr.split(i * cfg.n_heads + h).gaussian(m, cfg.head_dim)
                    spec = FeatureMapSpec(kind="performer", projection=proj)
                elif kind == "cosformer":
                    spec = FeatureMapSpec(kind="cosformer", max_len=cfg.max_seq_len)
                else:
                    raise ValueError(f"unknown attention kind {kind!r}")
                row.append(spec)
            specs.append(row)
    return ToyTransformer(cfg, params, specs)


def toy_param_count_formula(cfg: ToyTransformerConfig) -> int:
    """Closed-form parameter count for the architecture above."""
    w, ff, v = cfg.width, cfg.ff_dim, cfg.vocab_size
    per_layer = 2 * w + 4 * w * w + 2 * w * ff
    if cfg.attention_kind == "hedgehog":
        per_layer += cfg.n_heads * (cfg.head_dim * cfg.head_dim + cfg.head_dim)
    return v * w + cfg.n_layers * per_layer + w + w * v


# ---------------------------------------------------------------------------
# Forward / backward primitives
# ---------------------------------------------------------------------------


def _rmsnorm(x: np.ndarray, gain: np.ndarray):
    inv = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * inv * gain, inv


def _rmsnorm_vjp(x, inv, gain, dy):
    dgain = np.sum(dy * x * inv, axis=tuple(range(x.ndim - 1)))
    gdy = gain * dy
    inner = np.sum(gdy * x, axis=-1, keepdims=True)
    dx = gdy * inv - x * inner * inv**3 / x.shape[-1]
    return dx, dgain


def _silu(u: np.ndarray):
    sig = 0.5 * (1.0 + np.tanh(0.5 * u))
    return u * sig, sig


def _silu_vjp(u, sig, dy):
    return dy * (sig + u * sig * (1.0 - sig))


def _split_heads(x: np.ndarray, n_heads: int, head_dim: int) -> np.ndarray:
    b, t, _ = x.shape
    return x.reshape(b, t, n_heads, head_dim).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def _attention_forward(model: ToyTransformer, layer: int, q, k, v, override=None):
    """Per-layer attention on (B, H, T, d) tensors. Returns (ctx, cache)."""
    cfg = model.cfg
    t_len = q.shape[2]
    if cfg.rotary:
        qr = apply_rotary(q, cfg.rotary_base)
        kr = apply_rotary(k, cfg.rotary_base)
    else:
        qr, kr = q, k
    cache = {"qr": qr, "kr": kr, "v": v}
    if override is not None:
        a = override
        cache["mode"] = "override"
        cache["a"] = a
        return a @ v, cache
    if cfg.attention_kind == "softmax_reference":
        logits = qr @ np.swapaxes(kr, -1, -2) / np.sqrt(cfg.head_dim)
        a = softmax_weights(logits, causal=True)
        cache["mode"] = "softmax"
        cache["a"] = a
        return a @ v, cache
    positions = np.arange(t_len)
    qf = np.stack(
        [
            featurize(model.feature_spec(layer, h), qr[:, h], positions)
            for h in range(cfg.n_heads)
        ],
        axis=1,
    )
    kf = np.stack(
        [
            featurize(model.feature_spec(layer, h), kr[:, h], positions)
            for h in range(cfg.n_heads)
        ],
        axis=1,
    )
    a, s, denom = linear_weights(qf, kf, causal=True, strict=False)
    cache.update({"mode": "linear", "a": a, "s": s, "denom": denom,
                  "qf": qf, "kf": kf, "positions": positions})
    return a @ v, cache


def _attention_backward(model: ToyTransformer, layer: int, cache, d_ctx, grads):
    cfg = model.cfg
    a = cache["a"]
    d_a = d_ctx @ np.swapaxes(cache["v"], -1, -2)
    d_v = np.swapaxes(a, -1, -2) @ d_ctx
    if cache["mode"] == "override":
        # Similarity treated as fixed; only the value path carries gradient.
        d_qr = np.zeros_like(cache["qr"])
        d_kr = np.zeros_like(cache["kr"])
    elif cache["mode"] == "softmax":
        d_logits = softmax_weights_vjp(a, d_a)
        d_qr = d_logits @ cache["kr"] / np.sqrt(cfg.head_dim)
        d_kr = np.swapaxes(d_logits, -1, -2) @ cache["qr"] / np.sqrt(cfg.head_dim)
    else:
        d_s = linear_weights_vjp(cache["s"], cache["denom"], d_a, causal=True)
        d_qf = d_s @ cache["kf"]
        d_kf = np.swapaxes(d_s, -1, -2) @ cache["qf"]
        d_qr = np.empty_like(cache["qr"])
        d_kr = np.empty_like(cache["kr"])
        for h in range(cfg.n_heads):
            spec = model.feature_spec(layer, h)
            dq, dwq, dbq = featurize_vjp(
                spec, cache["qr"][:, h], d_qf[:, h], cache["positions"]
            )
            dk, dwk, dbk = featurize_vjp(
                spec, cache["kr"][:, h], d_kf[:, h], cache["positions"]
            )
            d_qr[:, h] = dq
            d_kr[:, h] = dk
            if dwq is not None:
                grads[f"l{layer}.h{h}.fw"] += dwq + dwk
                grads[f"l{layer}.h{h}.fb"] += dbq + dbk
    if cfg.rotary:
        d_q = apply_rotary(d_qr, cfg.rotary_base, inverse=True)
        d_k = apply_rotary(d_kr, cfg.rotary_base, inverse=True)
    else:
        d_q, d_k = d_qr, d_kr
    return d_q, d_k, d_v


def forward(
    model: ToyTransformer,
    tokens: np.ndarray,
    need_cache: bool = False,
    want_weights: bool = False,
    weights_override=None,
):
    """Run the model on (B, T) token ids; returns final-position logits.

    With `need_cache`, also returns the per-layer activations needed by
    `backward`. `weights_override` (one (B, H, T, T) array per layer) swaps
    in externally supplied attention weights, bypassing the similarity.
    """
    cfg = model.cfg
    p = model.params
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (batch, time), got {tokens.shape}")
    if tokens.shape[1] > cfg.max_seq_len:
        raise ValueError(
            f"sequence length {tokens.shape[1]} exceeds max {cfg.max_seq_len}"
        )
    x = p["embed"][tokens]
    caches = []
    layer_weights = []
    for i in range(cfg.n_layers):
        c: dict = {"x_in": x}
        h1, inv1 = _rmsnorm(x, p[f"l{i}.norm1"])
        q = _split_heads(h1 @ p[f"l{i}.wq"], cfg.n_heads, cfg.head_dim)
        k = _split_heads(h1 @ p[f"l{i}.wk"], cfg.n_heads, cfg.head_dim)
        v = _split_heads(h1 @ p[f"l{i}.wv"], cfg.n_heads, cfg.head_dim)
        override = weights_override[i] if weights_override is not None else None
        ctx, attn_cache = _attention_forward(model, i, q, k, v, override)
        merged = _merge_heads(ctx)
        x = x + merged @ p[f"l{i}.wo"]
        x_mid = x
        h2, inv2 = _rmsnorm(x, p[f"l{i}.norm2"])
        u = h2 @ p[f"l{i}.w1"]
        act, sig = _silu(u)
        x = x + act @ p[f"l{i}.w2"]
        if want_weights:
            layer_weights.append(attn_cache["a"])
        if need_cache:
            c.update(
                h1=h1, inv1=inv1, attn=attn_cache, merged=merged, x_mid=x_mid,
                h2=h2, inv2=inv2, u=u, act=act, sig=sig,
            )
            caches.append(c)
    hf, invf = _rmsnorm(x, p["norm_f"])
    logits = hf[:, -1] @ p["head"]
    state = {
        "tokens": tokens, "x_final": x, "hf": hf, "invf": invf,
        "caches": caches, "weights": layer_weights,
    }
    return logits, state


def cross_entropy(logits: np.ndarray, labels: np.ndarray, reduction: str = "mean"):
    """Stable softmax cross-entropy; returns (loss, dlogits)."""
    m = logits.max(axis=1, keepdims=True)
    shifted = logits - m
    logz = np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    logprobs = shifted - logz
    per_sample = -logprobs[np.arange(len(labels)), labels]
    probs = np.exp(logprobs)
    d = probs.copy()
    d[np.arange(len(labels)), labels] -= 1.0
    if reduction == "mean":
        return float(per_sample.mean()), d / len(labels)
    if reduction == "sum":
        return float(per_sample.sum()), d
    raise ValueError(f"unknown reduction {reduction!r}")


def backward(model: ToyTransformer, state: dict, d_logits: np.ndarray) -> dict:
    """Manual backward pass; returns gradients for every parameter."""
    cfg = model.cfg
    p = model.params
    grads = {k: np.zeros_like(v) for k, v in p.items()}
    hf = state["hf"]

    grads["head"] += hf[:, -1].T @ d_logits
    d_hf = np.zeros_like(hf)
    d_hf[:, -1] = d_logits @ p["head"].T
    d_x, dg = _rmsnorm_vjp(state["x_final"], state["invf"], p["norm_f"], d_hf)
    grads["norm_f"] += dg

    for i in reversed(range(cfg.n_layers)):
        c = state["caches"][i]
        # MLP block
        d_mlp_out = d_x
        b, t, _ = d_mlp_out.shape
        act_flat = c["act"].reshape(b * t, -1)
        grads[f"l{i}.w2"] += act_flat.T @ d_mlp_out.reshape(b * t, -1)
        d_act = d_mlp_out @ p[f"l{i}.w2"].T
        d_u = _silu_vjp(c["u"], c["sig"], d_act)
        h2_flat = c["h2"].reshape(b * t, -1)
        grads[f"l{i}.w1"] += h2_flat.T @ d_u.reshape(b * t, -1)
        d_h2 = d_u @ p[f"l{i}.w1"].T
        d_x_mid, dg2 = _rmsnorm_vjp(c["x_mid"], c["inv2"], p[f"l{i}.norm2"], d_h2)
        grads[f"l{i}.norm2"] += dg2
        d_x = d_x + d_x_mid  # residual join

        # Attention block
        merged_flat = c["merged"].reshape(b * t, -1)
        grads[f"l{i}.wo"] += merged_flat.T @ d_x.reshape(b * t, -1)
        d_merged = d_x @ p[f"l{i}.wo"].T
        d_ctx = _split_heads(d_merged, cfg.n_heads, cfg.head_dim)
        d_q, d_k, d_v = _attention_backward(model, i, c["attn"], d_ctx, grads)
        d_h1 = np.zeros_like(c["h1"])
        for name, dt in (("wq", d_q), ("wk", d_k), ("wv", d_v)):
            dt_m = _merge_heads(dt)
            grads[f"l{i}.{name}"] += c["h1"].reshape(b * t, -1).T @ dt_m.reshape(
                b * t, -1
            )
            d_h1 += dt_m @ p[f"l{i}.{name}"].T
        d_x_in, dg1 = _rmsnorm_vjp(c["x_in"], c["inv1"], p[f"l{i}.norm1"], d_h1)
        grads[f"l{i}.norm1"] += dg1
        d_x = d_x + d_x_in

    np.add.at(grads["embed"], state["tokens"], d_x)
    return grads


def forward_backward(
    model: ToyTransformer,
    tokens: np.ndarray,
    labels: np.ndarray,
    reduction: str = "mean",
) -> tuple[float, dict]:
    """Loss (next-token cross-entropy at the final position) and gradients
    for all parameters, trainable feature maps included."""
    logits, state = forward(model, tokens, need_cache=True)
    loss, d_logits = cross_entropy(logits, np.asarray(labels), reduction)
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")
    return loss, backward(model, state, d_logits)


# ---------------------------------------------------------------------------
# Evaluation and training
# ---------------------------------------------------------------------------


def eval_model(
    model: ToyTransformer, ds: RecallDataset, batch_size: int = 64
) -> tuple[float, float]:
    """(mean loss, final-position accuracy) over a dataset."""
    total_loss = 0.0
    correct = 0
    n = len(ds.tokens)
    for start in range(0, n, batch_size):
        tok = ds.tokens[start : start + batch_size]
        lab = ds.labels[start : start + batch_size]
        logits, _ = forward(model, tok)
        loss, _ = cross_entropy(logits, lab, reduction="sum")
        total_loss += loss
        correct += int(np.sum(np.argmax(logits, axis=1) == lab))
    return total_loss / n, correct / n


def mean_layer_entropies(
    model: ToyTransformer, ds: RecallDataset, n_samples: int = 64
) -> list[float]:
    """Mean attention-weight entropy per layer on a fixed evaluation batch.

    Rows zeroed out by the degenerate-normalization guard (possible for
    ReLU-style maps) carry no weighting and are left out of the mean."""
    tok = ds.tokens[:n_samples]
    _, state = forward(model, tok, want_weights=True)
    out = []
    for a in state["weights"]:
        with np.errstate(divide="ignore", invalid="ignore"):
            logs = np.where(a > 0, np.log(np.where(a > 0, a, 1.0)), 0.0)
        per_row = -np.sum(a * logs, axis=-1)
        valid = np.abs(a.sum(axis=-1) - 1.0) < 1e-6
        out.append(float(per_row[valid].mean()) if np.any(valid) else 0.0)
    return out


@dataclass
class TrainHParams:
    lr: float = 1e-2
    weight_decay: float = 0.0
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10  # stop after this many non-improving held-out epochs
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    entropy_samples: int = 64


@dataclass
class TrainRunResult:
    best_test_accuracy: float
    best_epoch: int
    epochs_run: int
    train_losses: list[float] = field(default_factory=list)
    test_losses: list[float] = field(default_factory=list)
    test_accuracies: list[float] = field(default_factory=list)
    entropy_per_layer: list[float] = field(default_factory=list)
    mean_entropy: float = 0.0


def train_recall(
    model: ToyTransformer,
    train_ds: RecallDataset,
    test_ds: RecallDataset,
    hparams: TrainHParams,
    rng: RngStream,
) -> TrainRunResult:
    """AdamW training with early stopping on held-out loss.

    The held-out loss and accuracy come from the test split; the best
    checkpoint (by held-out loss) supplies the reported accuracy and the
    per-layer attention entropies."""
    from .distill import AdamWState, adamw_step  # shared optimizer

    if model.cfg.vocab_size < int(train_ds.tokens.max()) + 1:
        raise ValueError("model vocab smaller than dataset vocab")
    opt = AdamWState.init(model.params)
    result = TrainRunResult(best_test_accuracy=0.0, best_epoch=-1, epochs_run=0)
    best_loss = np.inf
    best_params = model.copy_params()
    initial_train_loss = None
    diverged_streak = 0
    stale = 0

    test_loss, test_acc = eval_model(model, test_ds)
    if hparams.max_epochs == 0:
        result.best_test_accuracy = test_acc
        result.best_epoch = 0
        result.entropy_per_layer = mean_layer_entropies(
            model, test_ds, hparams.entropy_samples
        )
        result.mean_entropy = (
            float(np.mean(result.entropy_per_layer))
            if result.entropy_per_layer
            else 0.0
        )
        return result

    n = len(train_ds.tokens)
    for epoch in range(hparams.max_epochs):
        order = rng.split(epoch).permutation(n)
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, n, hparams.batch_size):
            idx = order[start : start + hparams.batch_size]
            loss, grads = forward_backward(
                model, train_ds.tokens[idx], train_ds.labels[idx]
            )
            adamw_step(
                model.params, grads, opt,
                lr=hparams.lr, weight_decay=hparams.weight_decay,
                beta1=hparams.beta1, beta2=hparams.beta2, eps=hparams.eps,
            )
            epoch_loss += loss
            n_batches += 1
        epoch_loss /= n_batches
        test_loss, test_acc = eval_model(model, test_ds)
        result.train_losses.append(epoch_loss)
        result.test_losses.append(test_loss)
        result.test_accuracies.append(test_acc)
        result.epochs_run = epoch + 1

        if initial_train_loss is None:
            initial_train_loss = epoch_loss
        diverged_streak = (
            diverged_streak + 1 if epoch_loss > 10.0 * initial_train_loss else 0
        )
        if diverged_streak >= 3:
            raise RuntimeError(
                f"training diverged: epoch loss {epoch_loss:.6g} exceeded 10x "
                f"initial {initial_train_loss:.6g} for 3 consecutive epochs"
            )

        if test_loss < best_loss:
            best_loss = test_loss
            best_params = model.copy_params()
            result.best_test_accuracy = test_acc
            result.best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= hparams.patience:
                break

    model.load_params(best_params)
    result.entropy_per_layer = mean_layer_entropies(
        model, test_ds, hparams.entropy_samples
    )
    result.mean_entropy = float(np.mean(result.entropy_per_layer))
    return result


def spearman(xs, ys) -> float:
    """Spearman rank correlation (average ranks over ties)."""

    def ranks(v):
        v = np.asarray(v, dtype=np.float64)
        order = np.argsort(v, kind="stable")
        r = np.empty(len(v))
        r[order] = np.arange(1, len(v) + 1)
        for val in np.unique(v):
            mask = v == val
            if mask.sum() > 1:
                r[mask] = r[mask].mean()
        return r

    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = np.sqrt(np.sum(rx * rx) * np.sum(ry * ry))
    return float(np.sum(rx * ry) / denom) if denom > 0 else 0.0


# ---------------------------------------------------------------------------
# Teacher capture for distillation against a frozen transformer
# ---------------------------------------------------------------------------


def capture_qk(model: ToyTransformer, tokens: np.ndarray) -> dict:
    """Per-(layer, head) rotated queries and keys from a frozen forward pass.

    Returns {"L{i}H{h}": (Q, K)} with Q, K of shape (B, T, head_dim); these
    are the exact similarity inputs a distillation student must match."""
    cfg = model.cfg
    _, state = forward(model, tokens, need_cache=True)
    out = {}
    for i in range(cfg.n_layers):
        attn = state["caches"][i]["attn"]
        for h in range(cfg.n_heads):
            out[f"L{i}H{h}"] = (attn["qr"][:, h].copy(), attn["kr"][:, h].copy())
    return out
