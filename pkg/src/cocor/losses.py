"""Training losses and the negative-embedding queue.

The contrastive loss scores each query against its positive key and every
queue entry with temperature-scaled cosine logits; queue entries are
constants (no gradient flows into them). Two consistency variants exist:
a per-sample mean absolute gap, and a per-length softplus of the batch-mean
gap, which backs off smoothly when measured deviations already sit below the
predicted ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .numcore import sigmoid, softplus

UNIT_NORM_TOL = 1e-6


class NegativeQueue:
    """Fixed-capacity FIFO of unit-norm embeddings backed by a ring buffer."""

    def __init__(self, capacity: int, dim: int):
        if capacity < 1 or dim < 1:
            raise ValueError("capacity and dim must be >= 1")
        self.capacity = capacity
        self.dim = dim
        self._buf = np.zeros((capacity, dim))
        self._ptr = 0
        self.fill = 0

    def push(self, embeddings: np.ndarray) -> None:
        """Append rows, evicting the oldest entries past capacity."""
        embeddings = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
        if embeddings.shape[1] != self.dim:
            raise ValueError(f"embedding dim {embeddings.shape[1]} != {self.dim}")
        norms = np.linalg.norm(embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOL):
            worst = float(np.max(np.abs(norms - 1.0)))
            raise ValueError(f"queue admits unit-norm embeddings only (off by {worst:.2e})")
        for row in embeddings:
            self._buf[self._ptr] = row
            self._ptr = (self._ptr + 1) % self.capacity
            self.fill = min(self.fill + 1, self.capacity)

    def as_matrix(self) -> np.ndarray:
        """Current contents, oldest first, shape (fill, dim)."""
        if self.fill < self.capacity:
            return self._buf[:self.fill].copy()
        return np.roll(self._buf, -self._ptr, axis=0).copy()


def contrastive_loss(z: np.ndarray, z_pos: np.ndarray, queue: NegativeQueue,
                     tau: float) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean InfoNCE over the batch; returns (loss, d_z, d_z_pos).

    Per sample: -log( e^{z.z+ / tau} / (e^{z.z+ / tau} + sum_j e^{z.q_j / tau}) ).
    Queue rows are treated as constants.
    """
    if tau <= 0:
        raise ValueError("temperature must be positive")
    if queue.fill < 1:
        raise RuntimeError("contrastive loss requires a non-empty queue")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    z_pos = np.atleast_2d(np.asarray(z_pos, dtype=np.float64))
    if z.shape != z_pos.shape:
        raise ValueError("query and positive batches must have equal shapes")
    negs = queue.as_matrix()

    b = z.shape[0]
    pos_logits = np.sum(z * z_pos, axis=1) / tau            # (B,)
    neg_logits = (z @ negs.T) / tau                          # (B, N)
    logits = np.concatenate([pos_logits[:, None], neg_logits], axis=1)

    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = (logits - shift) - np.log(denom)
    loss = float(np.mean(-log_probs[:, 0]))

    probs = exp / denom
    d_logits = probs.copy()
    d_logits[:, 0] -= 1.0
    d_logits /= b

    d_z = (d_logits[:, :1] * z_pos + d_logits[:, 1:] @ negs) / tau
    d_z_pos = d_logits[:, :1] * z / tau
    return loss, d_z, d_z_pos


def consistency_loss_abs(omega: np.ndarray,
                         g: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean |omega - g|; subgradient 0 at exact ties."""
    omega = np.asarray(omega, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    if omega.shape != g.shape or omega.ndim != 1:
        raise ValueError("omega and g must be equal-length vectors")
    if omega.size == 0:
        raise ValueError("empty batch")
    diff = omega - g
    loss = float(np.mean(np.abs(diff)))
    s = np.sign(diff) / omega.size
    return loss, s, -s


def consistency_loss_softplus(
    groups: dict[int, tuple[np.ndarray, np.ndarray]],
) -> tuple[float, dict[int, np.ndarray], dict[int, np.ndarray], dict[int, float]]:
    """Per-length softplus of the group-mean gap.

    For each configured length l with samples (omega_i, g_i):
    k_l = mean(omega - g); loss = mean over lengths of softplus(k_l).
    Returns (loss, d_omega per group, d_g per group, k_l per group); gradients
    flow to both sides of the gap through the group mean.
    """
    if not groups:
        raise ValueError("no length groups")
    n_lengths = len(groups)
    loss = 0.0
    d_omega: dict[int, np.ndarray] = {}
    d_g: dict[int, np.ndarray] = {}
    k_by_length: dict[int, float] = {}
    for length, (omega, g) in groups.items():
        omega = np.asarray(omega, dtype=np.float64)
        g = np.asarray(g, dtype=np.float64)
        if omega.size == 0 or omega.shape != g.shape:
            raise ValueError(f"length-{length} group is empty or mismatched")
        k = float(np.mean(omega - g))
        k_by_length[length] = k
        loss += float(softplus(k)) / n_lengths
        coeff = float(sigmoid(k)) / (n_lengths * omega.size)
        d_omega[length] = np.full(omega.size, coeff)
        d_g[length] = np.full(omega.size, -coeff)
    return loss, d_omega, d_g, k_by_length


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-softmax of the true class; grad = (softmax - onehot)/B."""
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ValueError(f"labels shape {labels.shape} != ({b},)")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    labels = labels.astype(np.int64)

    shift = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - shift)
    denom = exp.sum(axis=1, keepdims=True)
    log_probs = (logits - shift) - np.log(denom)
    loss = float(np.mean(-log_probs[np.arange(b), labels]))

    d_logits = exp / denom
    d_logits[np.arange(b), labels] -= 1.0
    d_logits /= b
    return loss, d_logits


@dataclass
class LossBreakdown:
    """Per-batch loss terms; total is their (optionally weighted) sum."""

    contrastive: float
    consistency: float
    total: float
    k_by_length: dict[int, float] = field(default_factory=dict)
    simi: float = 0.0


def total_unsup_loss(contrastive: float, consistency: float,
                     k_by_length: dict[int, float] | None = None,
                     simi: float = 0.0,
                     consistency_weight: float = 1.0) -> LossBreakdown:
    """Unweighted sum by default; the weight knob exists for experiments and
    stays at 1 everywhere that matters."""
    total = contrastive + consistency_weight * consistency
    return LossBreakdown(contrastive=contrastive, consistency=consistency,
                         total=total, k_by_length=dict(k_by_length or {}), simi=simi)
