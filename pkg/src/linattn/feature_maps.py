"""Feature maps for linear attention.

Every map phi: R^d -> R^{d'} here is evaluated batched over leading axes,
so inputs of shape (..., d) give outputs of shape (..., d'). Trainable maps
also expose analytic vector-Jacobian products, certified against the
finite-difference oracle in `numerics`.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

KINDS = (
    "softmax_reference",
    "hedgehog",
    "taylor2",
    "exp_t",
    "elu1",
    "relu",
    "performer",
    "cosformer",
)

HEDGEHOG_ACTIVATIONS = ("raw_exp", "stabilized_softmax")

# Pre-activations fed to exp() are clamped to this band; exp(30) ~ 1e13
# keeps pairwise dot products comfortably inside float64 range.
EXP_CLIP = 30.0


class ClampCounter:
    """Counts how many pre-activations hit the exp clipping guard."""

    def __init__(self):
        self.count = 0

    def add(self, n: int):
        self.count += int(n)

    def reset(self):
        self.count = 0


CLAMP_EVENTS = ClampCounter()


def _clipped_exp(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """exp with the [-EXP_CLIP, EXP_CLIP] guard. Returns (exp, pass-through mask)."""
    if not np.all(np.isfinite(z)):
        raise FloatingPointError(
            f"non-finite pre-activation (max {np.nanmax(z)}) reached exp guard"
        )
    inside = np.abs(z) <= EXP_CLIP
    n_clamped = z.size - int(np.count_nonzero(inside))
    if n_clamped:
        CLAMP_EVENTS.add(n_clamped)
    return np.exp(np.clip(z, -EXP_CLIP, EXP_CLIP)), inside


@dataclass
class HedgehogParams:
    """Single affine layer of the trainable map: columns of `weight` are the
    per-feature directions, `bias` is one bias per output feature."""

    weight: np.ndarray  # (d, d_out)
    bias: np.ndarray  # (d_out,)

    @staticmethod
    def identity(d: int) -> "HedgehogParams":
        return HedgehogParams(weight=np.eye(d), bias=np.zeros(d))

    def copy(self) -> "HedgehogParams":
        return HedgehogParams(self.weight.copy(), self.bias.copy())

    def validate(self):
        w = np.asarray(self.weight, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[1] != b.shape[0]:
            raise ValueError(
                f"inconsistent hedgehog params: W {w.shape}, b {b.shape}"
            )
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite hedgehog params")


@dataclass
class FeatureMapSpec:
    """Tagged description of one feature map (kind plus its payload)."""

    kind: str
    hedgehog: Optional[HedgehogParams] = None
    activation: str = "raw_exp"  # hedgehog only
    negation: bool = True  # hedgehog only
    temperature: float = 1.0  # exp_t only
    scaled: bool = False  # taylor2 only
    projection: Optional[np.ndarray] = None  # performer only, (m, d)
    max_len: Optional[int] = None  # cosformer only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown feature map kind {self.kind!r}")
        if self.kind == "hedgehog":
            if self.hedgehog is None:
                raise ValueError("hedgehog spec needs params")
            if self.activation not in HEDGEHOG_ACTIVATIONS:
                raise ValueError(f"unknown hedgehog activation {self.activation!r}")
            self.hedgehog.validate()
        if self.kind == "exp_t" and self.temperature <= 0:
            raise ValueError("exp_t needs temperature > 0")
        if self.kind == "performer" and self.projection is None:
            raise ValueError("performer spec needs a projection matrix")
        if self.kind == "cosformer" and (self.max_len is None or self.max_len < 1):
            raise ValueError("cosformer spec needs max_len >= 1")


def hedgehog_spec(
    d: int,
    params: Optional[HedgehogParams] = None,
    activation: str = "raw_exp",
    negation: bool = True,
) -> FeatureMapSpec:
    """Default trainable map: identity-initialized affine layer, exp
    activation with the negation concatenation."""
    return FeatureMapSpec(
        kind="hedgehog",
        hedgehog=params if params is not None else HedgehogParams.identity(d),
        activation=activation,
        negation=negation,
    )


def feature_dim(spec: FeatureMapSpec, d: int) -> int:
    """Output feature dimension d' for a given head dimension d."""
    if spec.kind == "taylor2":
        return 1 + d + d * d
    if spec.kind == "hedgehog":
        d_out = spec.hedgehog.weight.shape[1]
        return 2 * d_out if spec.negation else d_out
    if spec.kind == "performer":
        return spec.projection.shape[0]
    if spec.kind == "cosformer":
        return 2 * d
    if spec.kind == "softmax_reference":
        raise ValueError("softmax_reference is not a feature map")
    return d  # exp_t, elu1, relu


# ---------------------------------------------------------------------------
# Hedgehog map (trainable)
# ---------------------------------------------------------------------------


def phi_hedgehog(
    x: np.ndarray,
    params: HedgehogParams,
    activation: str = "raw_exp",
    negation: bool = True,
) -> np.ndarray:
    """Trainable map phi(x) = Phi(W^T x + b).

    raw_exp uses the element-wise exponential; with `negation` the output is
    the 2d'-vector [exp(z), exp(-z)]. stabilized_softmax normalizes
    exp(W^T x) over the output dimension (bias unused) so entries sum to 1.
    """
    x = np.asarray(x, dtype=np.float64)
    params.validate()
    if activation == "raw_exp":
        z = x @ params.weight + params.bias
        pos, _ = _clipped_exp(z)
        if not negation:
            return pos
        neg, _ = _clipped_exp(-z)
        return np.concatenate([pos, neg], axis=-1)
    if activation == "stabilized_softmax":
        z = x @ params.weight  # bias dropped in the normalized variant
        logits = np.concatenate([z, -z], axis=-1) if negation else z
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        e = np.exp(shifted)
        return e / np.sum(e, axis=-1, keepdims=True)
    raise ValueError(f"unknown hedgehog activation {activation!r}")


def phi_hedgehog_grads(
    x: np.ndarray,
    params: HedgehogParams,
    upstream: np.ndarray,
    activation: str = "raw_exp",
    negation: bool = True,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(upstream * phi(x)) w.r.t. (W, b, x).

    Accepts batched x (..., d) with matching upstream (..., d'); parameter
    gradients sum over the batch.
    """
    x = np.asarray(x, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    d_out = params.weight.shape[1]

    if activation == "raw_exp":
        z = x @ params.weight + params.bias
        pos, inside = _clipped_exp(z)
        if negation:
            neg, _ = _clipped_exp(-z)
            u_pos = upstream[..., :d_out]
            u_neg = upstream[..., d_out:]
            dz = (u_pos * pos - u_neg * neg) * inside
        else:
            dz = upstream * pos * inside
    elif activation == "stabilized_softmax":
        z = x @ params.weight
        logits = np.concatenate([z, -z], axis=-1) if negation else z
        shifted = logits - np.max(logits, axis=-1, keepdims=True)
        e = np.exp(shifted)
        f = e / np.sum(e, axis=-1, keepdims=True)
        dlogits = f * (upstream - np.sum(upstream * f, axis=-1, keepdims=True))
        dz = dlogits[..., :d_out] - dlogits[..., d_out:] if negation else dlogits
    else:
        raise ValueError(f"unknown hedgehog activation {activation!r}")

    flat_x = x.reshape(-1, x.shape[-1])
    flat_dz = dz.reshape(-1, d_out)
    dw = flat_x.T @ flat_dz
    db = (
        np.zeros(d_out)
        if activation == "stabilized_softmax"
        else np.sum(flat_dz, axis=0)
    )
    dx = dz @ params.weight.T
    return dw, db, dx


# ---------------------------------------------------------------------------
# Taylor map (degree 2)
# ---------------------------------------------------------------------------


def phi_taylor(x: np.ndarray, scaled: bool = False) -> np.ndarray:
    """Degree-2 polynomial map [1] + [x_i] + [x_i x_j over ordered pairs].

    Unscaled, pairwise dot products equal 1 + q.k + (q.k)^2; with `scaled`
    the second-order block is multiplied by 2^{-1/2}, giving the true
    second-degree Taylor expansion 1 + q.k + (q.k)^2 / 2.
    """
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    lead = x.shape[:-1]
    ones = np.ones(lead + (1,))
    outer = x[..., :, None] * x[..., None, :]
    if scaled:
        outer = outer / np.sqrt(2.0)
    return np.concatenate([ones, x, outer.reshape(lead + (d * d,))], axis=-1)


def phi_taylor_input_grad(
    x: np.ndarray, upstream: np.ndarray, scaled: bool = False
) -> np.ndarray:
    """Gradient of sum(upstream * phi_taylor(x)) w.r.t. x."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    u_lin = upstream[..., 1 : 1 + d]
    u2 = upstream[..., 1 + d :].reshape(x.shape[:-1] + (d, d))
    scale = 1.0 / np.sqrt(2.0) if scaled else 1.0
    dx = u_lin + scale * (
        np.einsum("...ij,...j->...i", u2, x) + np.einsum("...ij,...i->...j", u2, x)
    )
    return dx


# ---------------------------------------------------------------------------
# Element-wise baselines
# ---------------------------------------------------------------------------


def phi_elementwise(x: np.ndarray, kind: str, t: float = 1.0) -> np.ndarray:
    """elu1: 1 + ELU(x); relu: max(x, 0); exp_t: exp(t * x) element-wise."""
    x = np.asarray(x, dtype=np.float64)
    if kind == "elu1":
        return np.where(x >= 0, x + 1.0, np.exp(np.minimum(x, 0.0)))
    if kind == "relu":
        return np.maximum(x, 0.0)
    if kind == "exp_t":
        if t <= 0:
            raise ValueError("exp_t needs t > 0")
        e, _ = _clipped_exp(t * x)
        return e
    raise ValueError(f"unknown elementwise kind {kind!r}")


def phi_elementwise_input_grad(
    x: np.ndarray, upstream: np.ndarray, kind: str, t: float = 1.0
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if kind == "elu1":
        deriv = np.where(x >= 0, 1.0, np.exp(np.minimum(x, 0.0)))
    elif kind == "relu":
        deriv = (x > 0).astype(np.float64)
    elif kind == "exp_t":
        e, inside = _clipped_exp(t * x)
        deriv = t * e * inside
    else:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return upstream * deriv


# ---------------------------------------------------------------------------
# Performer (positive random features)
# ---------------------------------------------------------------------------


def phi_performer(x: np.ndarray, proj: np.ndarray) -> np.ndarray:
    """Positive random features exp(w_r.x - |x|^2/2) / sqrt(m).

    With Gaussian rows w_r, E[phi(q).phi(k)] = exp(q.k).
    """
    x = np.asarray(x, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    m = proj.shape[0]
    expo = x @ proj.T - 0.5 * np.sum(x * x, axis=-1, keepdims=True)
    e, _ = _clipped_exp(expo)
    return e / np.sqrt(m)


def phi_performer_input_grad(
    x: np.ndarray, proj: np.ndarray, upstream: np.ndarray
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    m = proj.shape[0]
    expo = x @ proj.T - 0.5 * np.sum(x * x, axis=-1, keepdims=True)
    e, inside = _clipped_exp(expo)
    dexpo = upstream * (e / np.sqrt(m)) * inside
    return dexpo @ proj - np.sum(dexpo, axis=-1, keepdims=True) * x


# ---------------------------------------------------------------------------
# cosFormer (ReLU features with cos/sin positional reweighting)
# ---------------------------------------------------------------------------


def _cosformer_angles(positions: np.ndarray, max_len: int) -> np.ndarray:
    positions = np.asarray(positions)
    if np.any(positions < 0) or np.any(positions >= max_len):
        raise ValueError(
            f"cosformer positions must lie in [0, {max_len}), got "
            f"[{positions.min()}, {positions.max()}]"
        )
    return np.pi * positions.astype(np.float64) / (2.0 * max_len)


def phi_cosformer(x: np.ndarray, positions, max_len: int) -> np.ndarray:
    """[relu(x) cos(pi i / 2M), relu(x) sin(pi i / 2M)] for token position i.

    Pairwise dot products reduce to relu(q).relu(k) * cos(pi (i - j) / 2M).
    `positions` may be a scalar or an array matching x's second-to-last axis.
    """
    x = np.asarray(x, dtype=np.float64)
    ang = _cosformer_angles(np.atleast_1d(positions), max_len)
    if x.ndim == 1:
        ang = ang.reshape(())
    else:
        ang = ang.reshape((len(ang), 1)) if ang.size > 1 else ang.reshape((1, 1))
    r = np.maximum(x, 0.0)
    cos_part = r * np.cos(ang)
    sin_part = r * np.sin(ang)
    return np.concatenate([cos_part, sin_part], axis=-1)


def phi_cosformer_input_grad(
    x: np.ndarray, positions, max_len: int, upstream: np.ndarray
) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[-1]
    ang = _cosformer_angles(np.atleast_1d(positions), max_len)
    if x.ndim == 1:
        ang = ang.reshape(())
    else:
        ang = ang.reshape((len(ang), 1)) if ang.size > 1 else ang.reshape((1, 1))
    dr = upstream[..., :d] * np.cos(ang) + upstream[..., d:] * np.sin(ang)
    return dr * (x > 0)


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------


def featurize(
    spec: FeatureMapSpec, x: np.ndarray, positions=None
) -> np.ndarray:
    """Apply the map described by `spec` to x (..., d) -> (..., d').

    `positions` (token indices along the second-to-last axis) is required
    for cosformer and ignored by every other kind.
    """
    if spec.kind == "hedgehog":
        return phi_hedgehog(x, spec.hedgehog, spec.activation, spec.negation)
    if spec.kind == "taylor2":
        return phi_taylor(x, spec.scaled)
    if spec.kind in ("elu1", "relu", "exp_t"):
        return phi_elementwise(x, spec.kind, spec.temperature)
    if spec.kind == "performer":
        return phi_performer(x, spec.projection)
    if spec.kind == "cosformer":
        x = np.asarray(x, dtype=np.float64)
        if positions is None:
            positions = np.arange(x.shape[-2])
        return phi_cosformer(x, positions, spec.max_len)
    raise ValueError(f"{spec.kind!r} has no feature map form")


def featurize_vjp(
    spec: FeatureMapSpec, x: np.ndarray, upstream: np.ndarray, positions=None
) -> tuple[np.ndarray, Optional[np.ndarray], Optional[np.ndarray]]:
    """VJP of `featurize`: returns (dx, dW, db); dW/db are None unless the
    map is trainable (hedgehog)."""
    if spec.kind == "hedgehog":
        dw, db, dx = phi_hedgehog_grads(
            x, spec.hedgehog, upstream, spec.activation, spec.negation
        )
        return dx, dw, db
    if spec.kind == "taylor2":
        return phi_taylor_input_grad(x, upstream, spec.scaled), None, None
    if spec.kind in ("elu1", "relu", "exp_t"):
        return (
            phi_elementwise_input_grad(x, upstream, spec.kind, spec.temperature),
            None,
            None,
        )
    if spec.kind == "performer":
        return phi_performer_input_grad(x, spec.projection, upstream), None, None
    if spec.kind == "cosformer":
        x = np.asarray(x, dtype=np.float64)
        if positions is None:
            positions = np.arange(x.shape[-2])
        return (
            phi_cosformer_input_grad(x, positions, spec.max_len, upstream),
            None,
            None,
        )
    raise ValueError(f"{spec.kind!r} has no feature map form")


# ---------------------------------------------------------------------------
# Serialization: line-based key=value blocks, matrices as whitespace rows,
# 17 significant digits so reload is bit-exact.
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_matrix(out: io.StringIO, key: str, m: np.ndarray):
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    out.write(f"{key}.rows={m.shape[0]}\n")
    out.write(f"{key}.cols={m.shape[1]}\n")
    for row in m:
        out.write(f"{key}.row=" + " ".join(_fmt(v) for v in row) + "\n")


def spec_to_text(spec: FeatureMapSpec) -> str:
    out = io.StringIO()
    out.write(f"kind={spec.kind}\n")
    if spec.kind == "hedgehog":
        out.write(f"activation={spec.activation}\n")
        out.write(f"negation={int(spec.negation)}\n")
        _write_matrix(out, "weight", spec.hedgehog.weight)
        _write_matrix(out, "bias", spec.hedgehog.bias.reshape(1, -1))
    elif spec.kind == "taylor2":
        out.write(f"scaled={int(spec.scaled)}\n")
    elif spec.kind == "exp_t":
        out.write(f"temperature={_fmt(spec.temperature)}\n")
    elif spec.kind == "performer":
        _write_matrix(out, "projection", spec.projection)
    elif spec.kind == "cosformer":
        out.write(f"max_len={spec.max_len}\n")
    return out.getvalue()


def _parse_lines(text: str) -> list[tuple[str, str]]:
    pairs = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"malformed spec line {raw!r}")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def _read_matrix(pairs: list[tuple[str, str]], key: str) -> np.ndarray:
    fields = {k: v for k, v in pairs if k in (f"{key}.rows", f"{key}.cols")}
    if f"{key}.rows" not in fields or f"{key}.cols" not in fields:
        raise ValueError(f"missing matrix header for {key!r}")
    rows = int(fields[f"{key}.rows"])
    cols = int(fields[f"{key}.cols"])
    data = [v for k, v in pairs if k == f"{key}.row"]
    if len(data) != rows:
        raise ValueError(f"matrix {key!r}: expected {rows} rows, got {len(data)}")
    m = np.array([[float(tok) for tok in row.split()] for row in data])
    if m.shape != (rows, cols):
        raise ValueError(f"matrix {key!r}: shape {m.shape} != ({rows}, {cols})")
    return m


def spec_from_text(text: str) -> FeatureMapSpec:
    pairs = _parse_lines(text)
    fields = dict(pairs)
    if "kind" not in fields:
        raise ValueError("spec text missing kind")
    kind = fields["kind"]
    if kind == "hedgehog":
        weight = _read_matrix(pairs, "weight")
        bias = _read_matrix(pairs, "bias").reshape(-1)
        return FeatureMapSpec(
            kind="hedgehog",
            hedgehog=HedgehogParams(weight=weight, bias=bias),
            activation=fields.get("activation", "raw_exp"),
            negation=bool(int(fields.get("negation", "1"))),
        )
    if kind == "taylor2":
        return FeatureMapSpec(kind="taylor2", scaled=bool(int(fields.get("scaled", "0"))))
    if kind == "exp_t":
        return FeatureMapSpec(kind="exp_t", temperature=float(fields["temperature"]))
    if kind == "performer":
        return FeatureMapSpec(kind="performer", projection=_read_matrix(pairs, "projection"))
    if kind == "cosformer":
        return FeatureMapSpec(kind="cosformer", max_len=int(fields["max_len"]))
    if kind in KINDS:
        return FeatureMapSpec(kind=kind)
    raise ValueError(f"unknown feature map kind {kind!r}")
