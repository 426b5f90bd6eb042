"""Dense numerical core: named parameter sets, layer primitives, momentum SGD
with cosine decay, and a central-difference gradient checker.

Matrices are plain 2-D float64 numpy arrays; everything here is pure except
optimizer state, which is single-owner. All randomness flows through
counter-based generators derived from integer seed paths (see ``make_rng``),
so runs are bit-reproducible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


# ---------------------------------------------------------------------------
# RNG


def make_rng(*entropy: int) -> np.random.Generator:
    """Derive an independent generator from a path of integers.

    ``make_rng(master, stream, epoch, ...)`` gives a Philox (counter-based)
    generator that depends only on the path, never on call order.
    """
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape: tuple[int, ...]) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


# ---------------------------------------------------------------------------
# Parameter sets


class ParamSet:
    """Ordered mapping of unique segment names to float64 arrays.

    The flattened view concatenates segments in insertion order, each in
    row-major (C) order; that ordering is the contract for gradient checking
    and checkpoints.
    """

    def __init__(self, segments: dict[str, np.ndarray]):
        self._segments: dict[str, np.ndarray] = {}
        for name, arr in segments.items():
            if name in self._segments:
                raise ValueError(f"duplicate segment name {name!r}")
            self._segments[name] = np.asarray(arr, dtype=np.float64)

    def names(self) -> list[str]:
        return list(self._segments)

    def items(self):
        return self._segments.items()

    def __getitem__(self, name: str) -> np.ndarray:
        return self._segments[name]

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._segments and value.shape != self._segments[name].shape:
            raise ValueError(
                f"segment {name!r}: shape {value.shape} != {self._segments[name].shape}")
        self._segments[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self._segments

    def __len__(self) -> int:
        return len(self._segments)

    @property
    def size(self) -> int:
        return sum(a.size for a in self._segments.values())

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._segments.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self._segments.items()})

    def to_flat(self) -> np.ndarray:
        if not self._segments:
            return np.zeros(0)
        return np.concatenate([a.ravel() for a in self._segments.values()])

    def with_flat(self, flat: np.ndarray) -> "ParamSet":
        """Rebuild a ParamSet with the same names/shapes from a flat vector."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ValueError(f"flat vector has {flat.size} entries, need {self.size}")
        out, pos = {}, 0
        for name, arr in self._segments.items():
            out[name] = flat[pos:pos + arr.size].reshape(arr.shape).copy()
            pos += arr.size
        return ParamSet(out)

    def _check_compatible(self, other: "ParamSet") -> None:
        if self.names() != other.names():
            raise ValueError("parameter sets have different segments")
        for name, arr in self._segments.items():
            if arr.shape != other[name].shape:
                raise ValueError(f"segment {name!r}: shape mismatch")

    def add_scaled(self, other: "ParamSet", alpha: float) -> "ParamSet":
        """self + alpha * other, elementwise per segment."""
        self._check_compatible(other)
        return ParamSet({k: v + alpha * other[k] for k, v in self._segments.items()})

    def scale(self, alpha: float) -> "ParamSet":
        return ParamSet({k: alpha * v for k, v in self._segments.items()})

    def check_finite(self, context: str = "") -> None:
        for name, arr in self._segments.items():
            if not np.all(np.isfinite(arr)):
                raise FloatingPointError(f"non-finite values in segment {name!r} {context}")


# ---------------------------------------------------------------------------
# Layer primitives


def affine_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x @ weights + bias, bias broadcast across rows."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2:
        raise ValueError("affine_forward expects 2-D input and weights")
    if x.shape[1] != weights.shape[0]:
        raise ValueError(f"input cols {x.shape[1]} != weight rows {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def affine_backward(d_out: np.ndarray, x: np.ndarray,
                    weights: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (d_x, d_weights, d_bias) for affine_forward."""
    d_x = d_out @ weights.T
    d_w = x.T @ d_out
    d_b = d_out.sum(axis=0)
    return d_x, d_w, d_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_grad(x: np.ndarray) -> np.ndarray:
    # Subgradient 0 at the kink.
    return (x > 0.0).astype(np.float64)


def tanh(x: np.ndarray) -> np.ndarray:
    return np.tanh(x)


def tanh_grad(x: np.ndarray) -> np.ndarray:
    t = np.tanh(x)
    return 1.0 - t * t


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def sigmoid_grad(x):
    s = sigmoid(x)
    return s * (1.0 - s)


def softplus(x):
    """ln(1 + e^x); switches to x + ln(1 + e^-x) above 30 to avoid overflow."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    big = x > 30.0
    out[big] = x[big] + np.log1p(np.exp(-x[big]))
    out[~big] = np.log1p(np.exp(x[~big]))
    return out if out.ndim else float(out)


def softplus_grad(x):
    return sigmoid(x)


# ---------------------------------------------------------------------------
# Optimizer


def cosine_lr(base_lr: float, step: int, total_steps: int) -> float:
    """Cosine-decayed learning rate; equals base_lr at step 0, non-increasing."""
    if total_steps <= 0:
        return base_lr
    t = min(step, total_steps)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * t / total_steps))


@dataclass
class SgdState:
    """Momentum-SGD state: per-segment velocity buffers plus schedule phase."""

    base_lr: float
    momentum: float
    weight_decay: float
    step: int
    total_steps: int
    buffers: ParamSet

    @classmethod
    def init(cls, params: ParamSet, base_lr: float, momentum: float = 0.0,
             weight_decay: float = 0.0, total_steps: int = 0) -> "SgdState":
        if base_lr <= 0:
            raise ValueError("base_lr must be positive")
        return cls(base_lr=base_lr, momentum=momentum, weight_decay=weight_decay,
                   step=0, total_steps=total_steps, buffers=params.zeros_like())

    def current_lr(self) -> float:
        return cosine_lr(self.base_lr, self.step, self.total_steps)


def sgd_step(params: ParamSet, grads: ParamSet, state: SgdState) -> ParamSet:
    """One momentum-SGD step with weight decay and cosine-scheduled lr.

    v <- momentum * v + (grad + wd * p);  p <- p - lr_t * v.
    Advances ``state`` (buffers and step counter) in place.
    """
    params._check_compatible(grads)
    lr = state.current_lr()
    new = {}
    for name, p in params.items():
        g = grads[name] + state.weight_decay * p
        v = state.momentum * state.buffers[name] + g
        state.buffers[name] = v
        new[name] = p - lr * v
    state.step += 1
    out = ParamSet(new)
    out.check_finite("after sgd_step")
    return out


# ---------------------------------------------------------------------------
# Gradient checking


def grad_check(loss_fn, params: ParamSet, analytic: ParamSet, h: float = 1e-4) -> float:
    """Max relative error between ``analytic`` and central differences.

    Per coordinate: numeric = (f(p+h) - f(p-h)) / 2h, error =
    |analytic - numeric| / max(1e-8, |numeric|). ``loss_fn`` must be a
    deterministic scalar function of the ParamSet. The default step balances
    truncation against roundoff for losses of order one.
    """
    flat = params.to_flat()
    analytic_flat = analytic.to_flat()
    if analytic_flat.size != flat.size:
        raise ValueError("analytic gradient size mismatch")
    worst = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = float(loss_fn(params.with_flat(flat)))
        flat[i] = orig - h
        f_minus = float(loss_fn(params.with_flat(flat)))
        flat[i] = orig
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise RuntimeError(f"non-finite loss while checking coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic_flat[i] - numeric) / max(1e-8, abs(numeric))
        worst = max(worst, err)
    return worst
