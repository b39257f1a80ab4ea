"""Latent-mixture contrastive model: gating, expert scores, posterior, ELBO.

Shapes follow one convention: expert embedding blocks are (..., K, d) with one
row per expert, gating embeddings are (..., d), per-point cluster quantities
are (..., K). Teacher embeddings and queue contents are always constants —
gradients flow only through student embeddings, gating embeddings and mu.

On the posterior and gradients: with q computed fresh from the current scores,
the evidence-style identity sum_k q_k (s_k - log q_k) = logsumexp(s) makes the
ELBO value and its first-order gradients identical whether or not q is treated
as a constant, so one gradient formula (weights = q) covers both conventions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    DegenerateDistributionError,
    DimensionMismatchError,
    EmptyQueueError,
    InvalidInputError,
    NonPositiveTemperatureError,
)
from .numcore import logsumexp_rows, softmax_rows
from .prototypes import normalized_prototypes


@dataclass(frozen=True)
class ModelFlags:
    """Ablation switches; each one enables a documented special case.

    a3_uniform_gating: gating distribution pinned to 1/K (no gradient to gating).
    a4_single_head: expert row 0 of student/teacher/queue blocks serves every expert.
    a5_no_class_term: drop mu from the scores (instance term only).
    """

    a3_uniform_gating: bool = False
    a4_single_head: bool = False
    a5_no_class_term: bool = False


@dataclass(frozen=True)
class Temperatures:
    tau: float = 1.0
    kappa: float = 1.0

    def __post_init__(self):
        if not self.tau > 0.0:
            raise NonPositiveTemperatureError(f"tau {self.tau!r} must be > 0")
        if not self.kappa > 0.0:
            raise NonPositiveTemperatureError(f"kappa {self.kappa!r} must be > 0")


class EmbeddingQueue:
    """Fixed-capacity FIFO ring of (K, d) teacher blocks; pushing when full evicts the oldest."""

    def __init__(self, capacity: int, num_experts: int, dim: int):
        if capacity < 1:
            raise InvalidInputError(f"capacity {capacity} must be >= 1")
        self.buffer = np.zeros((capacity, num_experts, dim))
        self.head = 0  # next write slot
        self.fill = 0

    @property
    def capacity(self) -> int:
        return self.buffer.shape[0]

    def push(self, block: np.ndarray) -> None:
        b = np.asarray(block, dtype=np.float64)
        if b.shape != self.buffer.shape[1:]:
            raise DimensionMismatchError(
                f"block shape {b.shape} does not match queue blocks {self.buffer.shape[1:]}"
            )
        self.buffer[self.head] = b
        self.head = (self.head + 1) % self.capacity
        self.fill = min(self.fill + 1, self.capacity)

    def snapshot(self) -> np.ndarray:
        """Copy of the stored blocks, oldest first: (fill, K, d)."""
        if self.fill < self.capacity:
            return self.buffer[: self.fill].copy()
        return np.concatenate((self.buffer[self.head :], self.buffer[: self.head]), axis=0)

    @classmethod
    def from_state(cls, buffer: np.ndarray, head: int, fill: int) -> "EmbeddingQueue":
        q = cls(buffer.shape[0], buffer.shape[1], buffer.shape[2])
        q.buffer = np.array(buffer, dtype=np.float64)
        q.head = int(head)
        q.fill = int(fill)
        return q


def _as_blocks(a, name: str) -> np.ndarray:
    x = np.asarray(a, dtype=np.float64)
    if x.ndim == 2:
        x = x[np.newaxis, ...]
    if x.ndim != 3:
        raise DimensionMismatchError(f"{name} must be (B, K, d) or (K, d), got {np.shape(a)}")
    return x


def _route_heads(block: np.ndarray, flags: ModelFlags) -> np.ndarray:
    # Under a4 the first expert row is shared by every expert.
    if flags.a4_single_head:
        return np.broadcast_to(block[..., :1, :], block.shape)
    return block


def _pair_scores(blocks: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Per-expert dots of every w row against every block: (F,K,d), (B,K,d) -> (B,K,F).

    Batched matmul over the expert axis; equivalent to
    einsum("fkd,bkd->bkf") but BLAS-backed.
    """
    return (w.transpose(1, 0, 2) @ blocks.transpose(1, 2, 0)).transpose(1, 0, 2)


def _mix_blocks(weights: np.ndarray, blocks: np.ndarray) -> np.ndarray:
    """Weighted sums of blocks per item and expert: (B,K,F), (F,K,d) -> (B,K,d).

    Equivalent to einsum("bkf,fkd->bkd") but BLAS-backed.
    """
    return (weights.transpose(1, 0, 2) @ blocks.transpose(1, 0, 2)).transpose(1, 0, 2)


def _combined(f: np.ndarray, mu: np.ndarray | None, flags: ModelFlags) -> np.ndarray:
    if flags.a5_no_class_term:
        return f
    if mu is None:
        raise InvalidInputError("mu is required unless a5_no_class_term is set")
    return f + normalized_prototypes(mu)


def gating_distribution(g, omega: np.ndarray, kappa: float, flags: ModelFlags) -> np.ndarray:
    """p(z | x) over K clusters from the gating embedding; uniform under a3."""
    if not kappa > 0.0:
        raise NonPositiveTemperatureError(f"kappa {kappa!r} must be > 0")
    gb = np.asarray(g, dtype=np.float64)
    squeezed = gb.ndim == 1
    if squeezed:
        gb = gb[np.newaxis, :]
    if gb.shape[-1] != omega.shape[1]:
        raise DimensionMismatchError(
            f"gating embedding dim {gb.shape[-1]} does not match omega dim {omega.shape[1]}"
        )
    k = omega.shape[0]
    if flags.a3_uniform_gating:
        probs = np.full(gb.shape[:-1] + (k,), 1.0 / k)
    else:
        probs = softmax_rows((gb @ omega.T) / kappa)
    return probs[0] if squeezed else probs


def expert_log_scores(v, f, mu: np.ndarray | None, tau: float, flags: ModelFlags) -> np.ndarray:
    """Unnormalized per-expert log score: v_k . (f_k + mu_k) / tau, one per cluster."""
    if not tau > 0.0:
        raise NonPositiveTemperatureError(f"tau {tau!r} must be > 0")
    vb = _as_blocks(v, "v")
    fb = _as_blocks(f, "f")
    if vb.shape != fb.shape:
        raise DimensionMismatchError(f"v shape {vb.shape} and f shape {fb.shape} differ")
    w = _combined(_route_heads(fb, flags), mu, flags)
    scores = np.sum(_route_heads(vb, flags) * w, axis=-1) / tau
    return scores[0] if np.asarray(v).ndim == 2 else scores


def log_partition_estimates(
    f,
    v,
    queue_blocks: np.ndarray,
    mu: np.ndarray | None,
    tau: float,
    flags: ModelFlags,
    include_positive: bool = True,
) -> np.ndarray:
    """Queue estimate of the per-expert log partition function.

    The estimator sums the positive score plus one score per queued block; the
    queue-only variant (include_positive=False) exists for bound experiments.
    """
    if not tau > 0.0:
        raise NonPositiveTemperatureError(f"tau {tau!r} must be > 0")
    squeeze = np.asarray(f).ndim == 2
    fb = _as_blocks(f, "f")
    vb = _as_blocks(v, "v")
    qb = np.asarray(queue_blocks, dtype=np.float64)
    if qb.ndim != 3 or qb.shape[1:] != fb.shape[1:]:
        raise DimensionMismatchError(
            f"queue blocks shape {qb.shape} incompatible with embeddings {fb.shape}"
        )
    if qb.shape[0] == 0:
        raise EmptyQueueError("partition estimate needs at least one queued block")
    w = _combined(_route_heads(fb, flags), mu, flags)
    l_neg = _pair_scores(_route_heads(qb, flags), w) / tau
    if include_positive:
        l_pos = np.sum(_route_heads(vb, flags) * w, axis=-1, keepdims=True) / tau
        logits = np.concatenate((l_pos, l_neg), axis=-1)
    else:
        logits = l_neg
    out = logsumexp_rows(logits)
    return out[0] if squeeze else out


def posterior(gating_probs, log_scores, log_partitions) -> np.ndarray:
    """Variational posterior rows: softmax_k of log p(k|x) + log score - log partition."""
    p = np.asarray(gating_probs, dtype=np.float64)
    s = np.asarray(log_scores, dtype=np.float64)
    z = np.asarray(log_partitions, dtype=np.float64)
    if p.shape != s.shape or s.shape != z.shape:
        raise DimensionMismatchError(
            f"shapes differ: gating {p.shape}, scores {s.shape}, partitions {z.shape}"
        )
    with np.errstate(divide="ignore", invalid="ignore"):
        logits = np.log(p) + s - z
    if np.any(np.isnan(logits)):
        raise DegenerateDistributionError("posterior logits contain NaN")
    if np.any(np.all(np.isneginf(logits), axis=-1)):
        raise DegenerateDistributionError("all unnormalized posterior terms are zero")
    return softmax_rows(logits)


def hard_assign(posterior_rows) -> np.ndarray | int:
    """Argmax cluster per row, 1-indexed; ties resolve to the lowest index."""
    q = np.asarray(posterior_rows, dtype=np.float64)
    labels = np.argmax(q, axis=-1) + 1
    return int(labels) if q.ndim == 1 else labels


@dataclass
class ElboResult:
    """Batch objective plus everything the optimizer and the metric log need.

    Gradients are of the loss (= -mean ELBO): grad_f pairs with the student
    block, grad_g with the gating embedding, grad_mu with the raw (unnormalized)
    prototypes.
    """

    loss: float
    elbo: float
    posterior: np.ndarray
    grad_f: np.ndarray
    grad_g: np.ndarray
    grad_mu: np.ndarray
    expert_term: float
    kl_term: float
    entropy: float


def _entropy_mean(q: np.ndarray) -> float:
    terms = np.where(q > 0.0, q * np.log(np.where(q > 0.0, q, 1.0)), 0.0)
    return float(np.mean(-np.sum(terms, axis=-1)))


def _grad_mu_raw(grad_mu_normalized: np.ndarray, mu: np.ndarray) -> np.ndarray:
    # Chain through row normalization: (I - m m^T)/||u|| applied per row.
    norms = np.sqrt(np.sum(np.square(mu), axis=-1, keepdims=True))
    m_hat = mu / norms
    inner = np.sum(grad_mu_normalized * m_hat, axis=-1, keepdims=True)
    return (grad_mu_normalized - m_hat * inner) / norms


def elbo_batch(
    f,
    v,
    g,
    queue_blocks: np.ndarray,
    mu: np.ndarray | None,
    omega: np.ndarray,
    temps: Temperatures,
    flags: ModelFlags,
) -> ElboResult:
    """Batch-mean evidence lower bound with queue-estimated partitions, plus gradients.

    Args:
        f: student blocks (B, K, d), unit rows.
        v: teacher blocks (B, K, d), constants.
        g: gating embeddings (B, d).
        queue_blocks: (F, K, d) snapshot taken before the current batch is enqueued.
        mu: raw expert prototypes (K, d); normalized on use. May be None under a5.
        omega: gating prototypes (K, d).

    Returns:
        ElboResult; loss = -mean ELBO, gradients already carry the -1/B scaling.
    """
    fb = _as_blocks(f, "f")
    vb = _as_blocks(v, "v")
    gb = np.asarray(g, dtype=np.float64)
    if gb.ndim == 1:
        gb = gb[np.newaxis, :]
    batch, num_k, dim = fb.shape
    if vb.shape != fb.shape:
        raise DimensionMismatchError(f"v shape {vb.shape} and f shape {fb.shape} differ")
    if gb.shape != (batch, omega.shape[1]):
        raise DimensionMismatchError(f"g shape {gb.shape} incompatible with batch {batch}")
    if omega.shape[0] != num_k:
        raise DimensionMismatchError("omega rows must match the number of experts")
    qb = np.asarray(queue_blocks, dtype=np.float64)
    if qb.ndim != 3 or qb.shape[1:] != (num_k, dim):
        raise DimensionMismatchError(f"queue blocks shape {qb.shape} incompatible")
    if qb.shape[0] == 0:
        raise EmptyQueueError("elbo_batch needs at least one queued block")

    f_eff = _route_heads(fb, flags)
    v_eff = _route_heads(vb, flags)
    q_eff = _route_heads(qb, flags)
    w = _combined(f_eff, mu, flags)

    gate = gating_distribution(gb, omega, temps.kappa, flags)
    with np.errstate(divide="ignore"):
        log_gate = np.log(gate)
    l_pos = np.sum(v_eff * w, axis=-1) / temps.tau  # (B, K)
    l_neg = _pair_scores(q_eff, w) / temps.tau  # (B, K, F)
    log_z = logsumexp_rows(np.concatenate((l_pos[..., np.newaxis], l_neg), axis=-1))

    s = log_gate + l_pos - log_z
    if np.any(np.isnan(s)):
        raise DegenerateDistributionError("posterior logits contain NaN")
    if np.any(np.all(np.isneginf(s), axis=-1)):
        raise DegenerateDistributionError("all unnormalized posterior terms are zero")
    elbo_items = logsumexp_rows(s)  # == sum_k q_k (s_k - log q_k), evidence identity
    post = softmax_rows(s)
    loss = -float(np.mean(elbo_items))

    # dELBO/dw per item and expert, weights = posterior.
    sig0 = np.exp(l_pos - log_z)
    sig_neg = np.exp(l_neg - log_z[..., np.newaxis])
    grad_w = (
        post[..., np.newaxis]
        * ((1.0 - sig0)[..., np.newaxis] * v_eff - _mix_blocks(sig_neg, q_eff))
        / temps.tau
    )
    scale = -1.0 / batch  # dLoss = -(1/B) dSumELBO
    if flags.a4_single_head:
        grad_f = np.zeros_like(fb)
        grad_f[:, 0, :] = scale * np.sum(grad_w, axis=1)
    else:
        grad_f = scale * grad_w
    if flags.a5_no_class_term:
        grad_mu = np.zeros((num_k, dim))
    else:
        grad_mu = _grad_mu_raw(scale * np.sum(grad_w, axis=0), np.asarray(mu, dtype=np.float64))
    if flags.a3_uniform_gating:
        grad_g = np.zeros_like(gb)
    else:
        grad_g = scale * ((post - gate) @ omega) / temps.kappa

    expert_term = float(np.mean(np.sum(post * (l_pos - log_z), axis=-1)))
    kl_term = float(np.mean(np.sum(post * (np.log(np.maximum(post, 1e-300)) - log_gate), axis=-1)))
    return ElboResult(
        loss=loss,
        elbo=float(np.mean(elbo_items)),
        posterior=post,
        grad_f=grad_f,
        grad_g=grad_g,
        grad_mu=grad_mu,
        expert_term=expert_term,
        kl_term=kl_term,
        entropy=_entropy_mean(post),
    )


def _full_scores(
    f_all: np.ndarray,
    v_all: np.ndarray,
    g_all: np.ndarray,
    mu: np.ndarray | None,
    omega: np.ndarray,
    temps: Temperatures,
    flags: ModelFlags,
):
    """Scores with the exact partition: logsumexp over every dataset teacher block."""
    fb = _as_blocks(f_all, "f_all")
    vb = _as_blocks(v_all, "v_all")
    v_eff = _route_heads(vb, flags)
    w = _combined(_route_heads(fb, flags), mu, flags)
    gate = gating_distribution(g_all, omega, temps.kappa, flags)
    logits = _pair_scores(v_eff, w) / temps.tau  # (N, K, N), last axis indexes blocks
    log_z = logsumexp_rows(logits)
    n = fb.shape[0]
    l_pos = logits[np.arange(n), :, np.arange(n)]  # own block: the positive score
    return fb, v_eff, w, gate, logits, log_z, l_pos


def exact_elbo(
    f_all,
    v_all,
    g_all,
    q: np.ndarray,
    mu: np.ndarray | None,
    omega: np.ndarray,
    temps: Temperatures,
    flags: ModelFlags,
) -> float:
    """Dataset-mean ELBO with the exact partition (sum over all N teacher blocks).

    `q` is an explicit (N, K) responsibility matrix; terms with q = 0 contribute 0.
    """
    _, _, _, gate, _, log_z, l_pos = _full_scores(f_all, v_all, g_all, mu, omega, temps, flags)
    qm = np.asarray(q, dtype=np.float64)
    if qm.shape != l_pos.shape:
        raise DimensionMismatchError(f"q shape {qm.shape} does not match {l_pos.shape}")
    with np.errstate(divide="ignore"):
        s = np.log(gate) + l_pos - log_z
    log_q = np.log(np.where(qm > 0.0, qm, 1.0))
    items = np.sum(np.where(qm > 0.0, qm * (s - log_q), 0.0), axis=-1)
    return float(np.mean(items))


def full_batch_elbo_grads(
    f_all,
    v_all,
    g_all,
    mu: np.ndarray | None,
    omega: np.ndarray,
    temps: Temperatures,
    flags: ModelFlags,
    q_override: np.ndarray | None = None,
) -> ElboResult:
    """Full-dataset ELBO (exact partition) with gradients; the classical-EM workhorse.

    With q_override the responsibilities are held fixed (detached posterior,
    M-step of EM); otherwise q is the fresh posterior and the evidence identity
    applies. Gradient weights equal the supplied or fresh q either way.
    """
    fb, v_eff, w, gate, logits, log_z, l_pos = _full_scores(
        f_all, v_all, g_all, mu, omega, temps, flags
    )
    n, num_k, dim = fb.shape
    with np.errstate(divide="ignore"):
        s = np.log(gate) + l_pos - log_z
    if np.any(np.isnan(s)):
        raise DegenerateDistributionError("posterior logits contain NaN")
    if np.any(np.all(np.isneginf(s), axis=-1)):
        raise DegenerateDistributionError("all unnormalized posterior terms are zero")
    fresh = softmax_rows(s)
    if q_override is None:
        post = fresh
        elbo_items = logsumexp_rows(s)
    else:
        post = np.asarray(q_override, dtype=np.float64)
        if post.shape != s.shape:
            raise DimensionMismatchError("q_override shape mismatch")
        log_q = np.log(np.where(post > 0.0, post, 1.0))
        elbo_items = np.sum(np.where(post > 0.0, post * (s - log_q), 0.0), axis=-1)

    soft_z = np.exp(logits - log_z[..., np.newaxis])  # (N, K, N) weights over blocks
    # d(l_pos - log_z)/dw = (v_own - sum_i soft_z_i v_i) / tau
    mixture = _mix_blocks(soft_z, v_eff)
    grad_w = post[..., np.newaxis] * (v_eff - mixture) / temps.tau
    scale = -1.0 / n
    if flags.a4_single_head:
        grad_f = np.zeros_like(fb)
        grad_f[:, 0, :] = scale * np.sum(grad_w, axis=1)
    else:
        grad_f = scale * grad_w
    if flags.a5_no_class_term:
        grad_mu = np.zeros((num_k, dim))
    else:
        grad_mu = _grad_mu_raw(scale * np.sum(grad_w, axis=0), np.asarray(mu, dtype=np.float64))
    if flags.a3_uniform_gating:
        grad_g = np.zeros((n, omega.shape[1]))
    else:
        grad_g = scale * ((post - gate) @ omega) / temps.kappa

    expert_term = float(np.mean(np.sum(post * (l_pos - log_z), axis=-1)))
    with np.errstate(divide="ignore"):
        kl_term = float(
            np.mean(np.sum(post * (np.log(np.maximum(post, 1e-300)) - np.log(gate)), axis=-1))
        )
    return ElboResult(
        loss=-float(np.mean(elbo_items)),
        elbo=float(np.mean(elbo_items)),
        posterior=fresh,
        grad_f=grad_f,
        grad_g=grad_g,
        grad_mu=grad_mu,
        expert_term=expert_term,
        kl_term=kl_term,
        entropy=_entropy_mean(post),
    )
