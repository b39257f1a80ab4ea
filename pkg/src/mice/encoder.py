"""Small tanh perceptron encoders.

One shared trunk feeds K expert heads plus one gating head; every head output is
l2-normalized onto the unit sphere. The teacher is a momentum (EMA) copy of the
trunk + expert heads only — gating has no teacher. Gradients are computed by an
explicit reverse pass over the forward tape; the normalization backward uses the
exact Jacobian (I - u u^T / ||u||^2) / ||u||.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DimensionMismatchError,
    InvalidInputError,
    InvalidMomentumError,
    TapeMismatchError,
    ZeroNormError,
)
from .numcore import ZERO_NORM_EPS, row_norms


@dataclass
class AffineLayer:
    """Dense layer y = W x + b; also reused as the (dW, db) holder in gradient bundles."""

    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)


@dataclass
class EncoderParams:
    trunk: list[AffineLayer]
    expert_heads: list[AffineLayer]
    gating_head: AffineLayer

    @property
    def num_experts(self) -> int:
        return len(self.expert_heads)

    @property
    def input_dim(self) -> int:
        first = self.trunk[0] if self.trunk else self.expert_heads[0]
        return first.weight.shape[1]

    @property
    def embed_dim(self) -> int:
        return self.expert_heads[0].weight.shape[0]


@dataclass
class TeacherParams:
    """EMA copy of the student's trunk + expert heads (no gating head)."""

    trunk: list[AffineLayer]
    expert_heads: list[AffineLayer]


@dataclass
class GradientBundle:
    """Gradients in the same tree shape as EncoderParams."""

    trunk: list[AffineLayer]
    expert_heads: list[AffineLayer]
    gating_head: AffineLayer


@dataclass
class Tape:
    """Forward intermediates needed by backward. `kind` is 'student' or 'gating'."""

    kind: str
    x: np.ndarray  # (B, d_in)
    trunk_outputs: list[np.ndarray]  # post-tanh activations, one per trunk layer
    raw: np.ndarray  # head outputs before normalization
    norms: np.ndarray  # raw-output norms
    normalized: np.ndarray
    squeezed: bool  # input arrived as a single vector


@dataclass(frozen=True)
class AugmentConfig:
    """Additive Gaussian noise (sigma) followed by coordinate dropout (rho)."""

    sigma: float = 0.1
    rho: float = 0.1

    def __post_init__(self):
        if self.sigma < 0.0:
            raise InvalidInputError(f"sigma {self.sigma!r} must be >= 0")
        if not 0.0 <= self.rho < 1.0:
            raise InvalidInputError(f"rho {self.rho!r} must lie in [0, 1)")


def _init_affine(out_dim: int, in_dim: int, rng: np.random.Generator) -> AffineLayer:
    # Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) for weight and bias.
    bound = 1.0 / np.sqrt(in_dim)
    w = rng.uniform(-bound, bound, size=(out_dim, in_dim))
    b = rng.uniform(-bound, bound, size=out_dim)
    return AffineLayer(w, b)


def init_params(
    input_dim: int,
    hidden_widths: list[int],
    embed_dim: int,
    num_experts: int,
    rng: np.random.Generator,
) -> EncoderParams:
    """Seeded init. Draw order is fixed: trunk layers, expert heads 0..K-1, gating head."""
    if input_dim < 1 or embed_dim < 1 or num_experts < 1:
        raise InvalidInputError("input_dim, embed_dim and num_experts must be >= 1")
    if any(w < 1 for w in hidden_widths):
        raise InvalidInputError("hidden widths must be >= 1")
    trunk = []
    d = input_dim
    for width in hidden_widths:
        trunk.append(_init_affine(width, d, rng))
        d = width
    heads = [_init_affine(embed_dim, d, rng) for _ in range(num_experts)]
    gating = _init_affine(embed_dim, d, rng)
    return EncoderParams(trunk, heads, gating)


def copy_teacher(params: EncoderParams) -> TeacherParams:
    """Deep copy of trunk + expert heads, used as the teacher's starting point."""
    trunk = [AffineLayer(l.weight.copy(), l.bias.copy()) for l in params.trunk]
    heads = [AffineLayer(l.weight.copy(), l.bias.copy()) for l in params.expert_heads]
    return TeacherParams(trunk, heads)


def _as_batch(x, input_dim: int) -> tuple[np.ndarray, bool]:
    a = np.asarray(x, dtype=np.float64)
    squeezed = a.ndim == 1
    if squeezed:
        a = a[np.newaxis, :]
    if a.ndim != 2 or a.shape[1] != input_dim:
        raise DimensionMismatchError(
            f"input shape {np.shape(x)} incompatible with input_dim {input_dim}"
        )
    if not np.all(np.isfinite(a)):
        raise InvalidInputError("encoder input must be finite")
    return a, squeezed


def _trunk_forward(x: np.ndarray, trunk: list[AffineLayer]) -> list[np.ndarray]:
    outputs = []
    h = x
    for layer in trunk:
        h = np.tanh(h @ layer.weight.T + layer.bias)
        outputs.append(h)
    return outputs


def _head_forward(h: np.ndarray, head: AffineLayer) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    raw = h @ head.weight.T + head.bias
    norms = row_norms(raw)
    if np.any(norms <= ZERO_NORM_EPS):
        raise ZeroNormError("head output collapsed to the zero vector")
    return raw, norms, raw / norms[..., np.newaxis]


def forward_student(x, params: EncoderParams) -> tuple[np.ndarray, Tape]:
    """All K unit-norm expert embeddings: (B, K, d), or (K, d) for a single vector."""
    xb, squeezed = _as_batch(x, params.input_dim)
    trunk_outputs = _trunk_forward(xb, params.trunk)
    h = trunk_outputs[-1] if trunk_outputs else xb
    raw = np.stack([h @ head.weight.T + head.bias for head in params.expert_heads], axis=1)
    norms = row_norms(raw)  # (B, K)
    if np.any(norms <= ZERO_NORM_EPS):
        raise ZeroNormError("expert head output collapsed to the zero vector")
    f = raw / norms[..., np.newaxis]
    tape = Tape("student", xb, trunk_outputs, raw, norms, f, squeezed)
    return (f[0] if squeezed else f), tape


def forward_teacher(x, teacher: TeacherParams) -> np.ndarray:
    """Teacher expert embeddings; no tape — teacher outputs are always treated as constants."""
    first = teacher.trunk[0] if teacher.trunk else teacher.expert_heads[0]
    xb, squeezed = _as_batch(x, first.weight.shape[1])
    trunk_outputs = _trunk_forward(xb, teacher.trunk)
    h = trunk_outputs[-1] if trunk_outputs else xb
    raw = np.stack([h @ head.weight.T + head.bias for head in teacher.expert_heads], axis=1)
    norms = row_norms(raw)
    if np.any(norms <= ZERO_NORM_EPS):
        raise ZeroNormError("teacher head output collapsed to the zero vector")
    v = raw / norms[..., np.newaxis]
    return v[0] if squeezed else v


def forward_gating(x, params: EncoderParams) -> tuple[np.ndarray, Tape]:
    """Unit-norm gating embedding: (B, d), or (d,) for a single vector."""
    xb, squeezed = _as_batch(x, params.input_dim)
    trunk_outputs = _trunk_forward(xb, params.trunk)
    h = trunk_outputs[-1] if trunk_outputs else xb
    raw, norms, g = _head_forward(h, params.gating_head)
    tape = Tape("gating", xb, trunk_outputs, raw, norms, g, squeezed)
    return (g[0] if squeezed else g), tape


def _normalization_backward(raw: np.ndarray, norms: np.ndarray, f: np.ndarray, gf: np.ndarray) -> np.ndarray:
    # Jacobian of u -> u/||u||: (g - f (f.g)) / ||u||.
    inner = np.sum(gf * f, axis=-1, keepdims=True)
    return (gf - f * inner) / norms[..., np.newaxis]


def _zero_bundle(params: EncoderParams) -> GradientBundle:
    trunk = [AffineLayer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.trunk]
    heads = [
        AffineLayer(np.zeros_like(l.weight), np.zeros_like(l.bias)) for l in params.expert_heads
    ]
    gating = AffineLayer(
        np.zeros_like(params.gating_head.weight), np.zeros_like(params.gating_head.bias)
    )
    return GradientBundle(trunk, heads, gating)


def backward(tape: Tape, upstream, params: EncoderParams) -> GradientBundle:
    """Propagate upstream gradients on the normalized embeddings back to all parameters.

    Args:
        tape: produced by forward_student (upstream shape (B, K, d)) or
            forward_gating (upstream shape (B, d)); single-vector calls may pass
            the squeezed shape.
        upstream: dLoss/dEmbedding for the embeddings the tape produced.
        params: the parameters used in the forward call.

    Returns:
        GradientBundle covering trunk, expert heads and gating head; the head
        family not on this tape gets zero gradients.
    """
    g = np.asarray(upstream, dtype=np.float64)
    if tape.squeezed and g.ndim == tape.normalized.ndim - 1:
        g = g[np.newaxis, ...]
    if g.shape != tape.normalized.shape:
        raise TapeMismatchError(
            f"upstream shape {g.shape} does not match tape embeddings {tape.normalized.shape}"
        )
    bundle = _zero_bundle(params)
    h_last = tape.trunk_outputs[-1] if tape.trunk_outputs else tape.x
    d_h = np.zeros_like(h_last)

    if tape.kind == "student":
        if len(params.expert_heads) != tape.raw.shape[1]:
            raise TapeMismatchError("tape was built for a different number of expert heads")
        d_raw = _normalization_backward(tape.raw, tape.norms, tape.normalized, g)
        for k, head in enumerate(params.expert_heads):
            du = d_raw[:, k, :]
            bundle.expert_heads[k].weight += du.T @ h_last
            bundle.expert_heads[k].bias += du.sum(axis=0)
            d_h += du @ head.weight
    elif tape.kind == "gating":
        du = _normalization_backward(tape.raw, tape.norms, tape.normalized, g)
        bundle.gating_head.weight += du.T @ h_last
        bundle.gating_head.bias += du.sum(axis=0)
        d_h += du @ params.gating_head.weight
    else:  # pragma: no cover - tapes are only built by this module
        raise TapeMismatchError(f"unknown tape kind {tape.kind!r}")

    # Trunk: walk layers in reverse; tanh' = 1 - tanh^2 recovered from saved outputs.
    for i in range(len(params.trunk) - 1, -1, -1):
        h_out = tape.trunk_outputs[i]
        h_in = tape.trunk_outputs[i - 1] if i > 0 else tape.x
        dz = d_h * (1.0 - h_out * h_out)
        bundle.trunk[i].weight += dz.T @ h_in
        bundle.trunk[i].bias += dz.sum(axis=0)
        d_h = dz @ params.trunk[i].weight
    return bundle


def add_bundles(a: GradientBundle, b: GradientBundle) -> GradientBundle:
    """Elementwise a += b in place (used to merge student-path and gating-path gradients)."""
    for la, lb in zip(a.trunk, b.trunk):
        la.weight += lb.weight
        la.bias += lb.bias
    for la, lb in zip(a.expert_heads, b.expert_heads):
        la.weight += lb.weight
        la.bias += lb.bias
    a.gating_head.weight += b.gating_head.weight
    a.gating_head.bias += b.gating_head.bias
    return a


def param_arrays(params: EncoderParams) -> list[np.ndarray]:
    """Live parameter arrays in a fixed order (trunk, expert heads, gating head)."""
    out: list[np.ndarray] = []
    for layer in params.trunk:
        out.extend((layer.weight, layer.bias))
    for layer in params.expert_heads:
        out.extend((layer.weight, layer.bias))
    out.extend((params.gating_head.weight, params.gating_head.bias))
    return out


def bundle_arrays(bundle: GradientBundle) -> list[np.ndarray]:
    """Gradient arrays in the same order as param_arrays."""
    out: list[np.ndarray] = []
    for layer in bundle.trunk:
        out.extend((layer.weight, layer.bias))
    for layer in bundle.expert_heads:
        out.extend((layer.weight, layer.bias))
    out.extend((bundle.gating_head.weight, bundle.gating_head.bias))
    return out


def ema_update(teacher: TeacherParams, student: EncoderParams, momentum: float) -> TeacherParams:
    """Exponential moving average t <- m t + (1-m) s over trunk + expert heads."""
    if not 0.0 <= momentum < 1.0:
        raise InvalidMomentumError(f"momentum {momentum!r} must lie in [0, 1)")
    trunk = [
        AffineLayer(
            momentum * t.weight + (1.0 - momentum) * s.weight,
            momentum * t.bias + (1.0 - momentum) * s.bias,
        )
        for t, s in zip(teacher.trunk, student.trunk)
    ]
    heads = [
        AffineLayer(
            momentum * t.weight + (1.0 - momentum) * s.weight,
            momentum * t.bias + (1.0 - momentum) * s.bias,
        )
        for t, s in zip(teacher.expert_heads, student.expert_heads)
    ]
    return TeacherParams(trunk, heads)


def augment(x, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Additive Gaussian noise then coordinate dropout. sigma=0, rho=0 is the identity.

    Both random draws happen unconditionally so the consumed stream length does
    not depend on the config values.
    """
    a = np.asarray(x, dtype=np.float64)
    noise = rng.standard_normal(a.shape)
    keep = rng.random(a.shape) >= cfg.rho
    return (a + cfg.sigma * noise) * keep
