"""Alternating training loop: encoder descent on the unsupervised loss with
the deviation predictor frozen, then a predictor update driven by labeled
cross-entropy through the encoder's dependence on the prediction.

The predictor update uses a collapsed scalar form built from measured
differences across the encoder step:

    grad = -[e^k / (1+e^k)^2] * (CE' - CE) * (simi' - simi) / (L_u' - L_u)
           * d/d(theta_d) E[g(V)]

where primed quantities are measured after the encoder step on the same
batch, views, and queue. The overall sign makes the collapse consistent with
the exact first-order chain rule: since theta_e' depends on theta_d only
through the sigmoid(k)-weighted similarity gradient, expanding the
differences recovers +eta_e * sigma'(k) * (grad CE . grad simi) * dE[g] up to
the directional-projection approximation. ``hypergradient_oracle`` computes
that exact chain-rule value independently (two backprops and a dot product)
and is used to validate direction and sign. A guard skips the update when
|L_u' - L_u| falls below 1e-8 rather than dividing by it.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import pmnn
from .augment import CompositeAugmentation, apply_composite, composition_vector, sample_composite
from .config import RunConfig
from .data import Dataset, weak_augment
from .encoder import (EncoderConfig, encode_backward, encode_batch, init_encoder_params,
                      momentum_update)
from .losses import (NegativeQueue, consistency_loss_abs, consistency_loss_softplus,
                     contrastive_loss, cross_entropy)
from .numcore import ParamSet, SgdState, make_rng, sgd_step

DENOM_GUARD = 1e-8

# Seed-path stream tags: every generator derives from (master, stream, ...).
STREAM_INIT_ENCODER = 1
STREAM_INIT_PMNN = 2
STREAM_WARMUP = 3
STREAM_EPOCH_PERM = 4
STREAM_VIEWS = 5
STREAM_LABELED = 6
STREAM_DACL = 7

ROLE_QUERY, ROLE_KEY, ROLE_COMPOSITE = 0, 1, 2


def deviation_gap_coefficient(k: float) -> float:
    """e^k / (1 + e^k)^2, evaluated overflow-safe; lies in (0, 0.25]."""
    a = math.exp(-abs(k))  # e^k/(1+e^k)^2 is symmetric in k
    return a / (1.0 + a) ** 2


@dataclass
class TrainState:
    enc_cfg: EncoderConfig
    theta_e: ParamSet
    theta_k: ParamSet
    theta_d: ParamSet | None
    probe: ParamSet
    queue: NegativeQueue
    opt_e: SgdState
    opt_d: SgdState | None
    opt_probe: SgdState
    epoch: int = 0
    step: int = 0
    master_seed: int = 0
    guard_count: int = 0
    zero_norm_count: int = 0
    use_pmnn: bool = True
    const_deviation: float = 0.5

    def predictor(self):
        if self.use_pmnn:
            return pmnn.PmnnPredictor(self.theta_d)
        return pmnn.ConstantPredictor(self.const_deviation)


@dataclass
class StepBatch:
    """All views of one minibatch, flattened for the encoder."""

    x_query: np.ndarray
    z_keys: np.ndarray          # momentum-encoder embeddings, constants
    x_raw: np.ndarray
    x_aug: np.ndarray
    v: np.ndarray               # (B, 14) composition vectors
    lengths: np.ndarray


@dataclass
class UnsupEval:
    lu: float
    lc: float
    lcons: float
    simi: float
    k_pooled: float
    k_by_length: dict[int, float]
    grads: ParamSet | None
    zero_norms: int


@dataclass
class StepInfo:
    """Everything pmnn_step and the oracle need about one encoder update."""

    theta_before: ParamSet
    batch: StepBatch
    lr_used: float
    lc: float
    lcons: float
    lu_before: float
    lu_after: float
    simi_before: float
    simi_after: float
    k_pooled: float
    k_by_length: dict[int, float]


@dataclass
class BilevelScalars:
    k_pooled: float
    k_by_length: dict[int, float]
    simi_before: float
    simi_after: float
    ce_before: float
    ce_after: float
    lu_before: float
    lu_after: float
    coefficient: float
    scalar: float
    guard_triggered: bool


@dataclass
class MetricsRecord:
    record_type: str            # "iteration" or "epoch"
    epoch: int
    step: int
    l_contrast: float
    l_consist: float
    l_u: float
    ce: float
    k_by_length: dict[str, float]
    coefficient: float | None
    guard_count: int
    probe_acc: float | None
    dacl: float | None
    wall_clock: float = 0.0     # excluded from the serialized stream


# ---------------------------------------------------------------------------
# Batch construction and loss evaluation


def _flatten(imgs: np.ndarray) -> np.ndarray:
    return np.asarray(imgs, dtype=np.float64).reshape(imgs.shape[0], -1)


def build_step_batch(state: TrainState, cfg: RunConfig, imgs: np.ndarray,
                     stream: int, step_tag: int) -> StepBatch:
    """Weak query/key views plus raw and composite-augmented views, with
    per-sample seed paths so worker fan-out cannot change results."""
    n = imgs.shape[0]
    queries, keys, augmented = [], [], []
    vs = np.zeros((n, 14), dtype=np.int64)
    lengths = np.zeros(n, dtype=np.int64)
    for i in range(n):
        queries.append(weak_augment(imgs[i], make_rng(state.master_seed, stream,
                                                      step_tag, i, ROLE_QUERY)))
        keys.append(weak_augment(imgs[i], make_rng(state.master_seed, stream,
                                                   step_tag, i, ROLE_KEY)))
        comp_rng = make_rng(state.master_seed, stream, step_tag, i, ROLE_COMPOSITE)
        length = int(comp_rng.choice(np.asarray(cfg.lengths)))
        comp = sample_composite(length, cfg.magnitude, comp_rng)
        augmented.append(apply_composite(comp, imgs[i], comp_rng))
        vs[i] = composition_vector(comp)
        lengths[i] = length

    _, z_keys, _ = encode_batch(state.enc_cfg, state.theta_k, _flatten(np.stack(keys)))
    return StepBatch(x_query=_flatten(np.stack(queries)), z_keys=z_keys,
                     x_raw=_flatten(imgs), x_aug=_flatten(np.stack(augmented)),
                     v=vs, lengths=lengths)


def _consistency(omega: np.ndarray, g_vals: np.ndarray, lengths: np.ndarray,
                 variant: str):
    """Returns (loss, d_omega over the full batch, k per length)."""
    if variant == "abs":
        loss, d_omega, _ = consistency_loss_abs(omega, g_vals)
        k_by_length = {int(l): float(np.mean(omega[lengths == l] - g_vals[lengths == l]))
                       for l in np.unique(lengths)}
        return loss, d_omega, k_by_length
    groups = {int(l): (omega[lengths == l], g_vals[lengths == l])
              for l in np.unique(lengths)}
    loss, d_by_len, _, k_by_length = consistency_loss_softplus(groups)
    d_omega = np.zeros_like(omega)
    for l, d in d_by_len.items():
        d_omega[lengths == l] = d
    return loss, d_omega, k_by_length


def unsup_eval(enc_cfg: EncoderConfig, theta: ParamSet, batch: StepBatch,
               g_vals: np.ndarray, queue: NegativeQueue, cfg: RunConfig,
               want_grad: bool) -> UnsupEval:
    """Full unsupervised loss (and optionally its encoder gradient) at theta,
    holding views, keys, queue, and predictor outputs fixed."""
    _, z_q, cache_q = encode_batch(enc_cfg, theta, batch.x_query)
    lc, d_zq, _ = contrastive_loss(z_q, batch.z_keys, queue, cfg.tau)
    _, z_raw, cache_r = encode_batch(enc_cfg, theta, batch.x_raw)
    _, z_aug, cache_a = encode_batch(enc_cfg, theta, batch.x_aug)
    omega = np.sum(z_raw * z_aug, axis=1)
    simi = float(np.mean(omega))
    lcons, d_omega, k_by_length = _consistency(omega, g_vals, batch.lengths, cfg.variant)
    lu = lc + cfg.consistency_weight * lcons
    k_pooled = float(np.mean(omega - g_vals))
    zero_norms = cache_q.zero_norm_count + cache_r.zero_norm_count + cache_a.zero_norm_count

    grads = None
    if want_grad:
        w_d_omega = cfg.consistency_weight * d_omega
        d_zr = w_d_omega[:, None] * z_aug
        d_za = w_d_omega[:, None] * z_raw
        grads = encode_backward(enc_cfg, theta, cache_q, d_z=d_zq)
        grads = grads.add_scaled(encode_backward(enc_cfg, theta, cache_r, d_z=d_zr), 1.0)
        grads = grads.add_scaled(encode_backward(enc_cfg, theta, cache_a, d_z=d_za), 1.0)
    return UnsupEval(lu=lu, lc=lc, lcons=lcons, simi=simi, k_pooled=k_pooled,
                     k_by_length=k_by_length, grads=grads, zero_norms=zero_norms)


def simi_and_grad(enc_cfg: EncoderConfig, theta: ParamSet, x_raw: np.ndarray,
                  x_aug: np.ndarray) -> tuple[float, ParamSet]:
    """Batch-mean raw/augmented cosine similarity and its encoder gradient."""
    _, z_raw, cache_r = encode_batch(enc_cfg, theta, x_raw)
    _, z_aug, cache_a = encode_batch(enc_cfg, theta, x_aug)
    omega = np.sum(z_raw * z_aug, axis=1)
    n = omega.size
    grads = encode_backward(enc_cfg, theta, cache_r, d_z=z_aug / n)
    grads = grads.add_scaled(encode_backward(enc_cfg, theta, cache_a, d_z=z_raw / n), 1.0)
    return float(np.mean(omega)), grads


def probe_logits(enc_cfg: EncoderConfig, theta_e: ParamSet, probe: ParamSet,
                 x: np.ndarray):
    features, _, cache = encode_batch(enc_cfg, theta_e, x)
    return features @ probe["w"] + probe["b"], features, cache


def probe_ce(enc_cfg: EncoderConfig, theta_e: ParamSet, probe: ParamSet,
             x: np.ndarray, labels: np.ndarray,
             want_encoder_grad: bool = False) -> tuple[float, ParamSet | None]:
    """Labeled cross-entropy through backbone features with the probe fixed.

    Never mutates theta_e; the optional gradient is a measurement used by the
    hypergradient oracle, not an update path.
    """
    logits, _, cache = probe_logits(enc_cfg, theta_e, probe, x)
    ce, d_logits = cross_entropy(logits, labels)
    if not want_encoder_grad:
        return ce, None
    d_feat = d_logits @ probe["w"].T
    return ce, encode_backward(enc_cfg, theta_e, cache, d_features=d_feat)


# ---------------------------------------------------------------------------
# The three alternation steps


def encoder_step(state: TrainState, cfg: RunConfig, imgs: np.ndarray,
                 step_tag: int, stream: int = STREAM_VIEWS) -> StepInfo:
    """One descent step on the unsupervised loss with the predictor frozen.

    Builds the views, measures (L_u, simi, k) before and after the update on
    identical inputs and queue contents, updates the momentum encoder, and
    only then enqueues the new keys.
    """
    if state.queue.fill < 1:
        raise RuntimeError("encoder_step requires a non-empty queue (run warm-up first)")
    batch = build_step_batch(state, cfg, imgs, stream, step_tag)
    g_vals = state.predictor().predict_batch(batch.v)

    before = unsup_eval(state.enc_cfg, state.theta_e, batch, g_vals, state.queue,
                        cfg, want_grad=True)
    theta_before = state.theta_e.copy()
    lr_used = state.opt_e.current_lr()
    state.theta_e = sgd_step(state.theta_e, before.grads, state.opt_e)
    state.theta_k = momentum_update(state.theta_k, state.theta_e, cfg.momentum_coef)

    after = unsup_eval(state.enc_cfg, state.theta_e, batch, g_vals, state.queue,
                       cfg, want_grad=False)
    state.queue.push(batch.z_keys)
    state.zero_norm_count += before.zero_norms + after.zero_norms
    state.step += 1

    return StepInfo(theta_before=theta_before, batch=batch, lr_used=lr_used,
                    lc=before.lc, lcons=before.lcons, lu_before=before.lu,
                    lu_after=after.lu, simi_before=before.simi, simi_after=after.simi,
                    k_pooled=before.k_pooled, k_by_length=before.k_by_length)


def probe_step(state: TrainState, x: np.ndarray, labels: np.ndarray) -> float:
    """One SGD step on the probe over frozen backbone features."""
    logits, features, _ = probe_logits(state.enc_cfg, state.theta_e, state.probe, x)
    ce, d_logits = cross_entropy(logits, labels)
    grads = ParamSet({"w": features.T @ d_logits, "b": d_logits.sum(axis=0)})
    state.probe = sgd_step(state.probe, grads, state.opt_probe)
    return ce


def pmnn_step(state: TrainState, cfg: RunConfig, x_labeled: np.ndarray,
              labels: np.ndarray, info: StepInfo | None) -> BilevelScalars:
    """Predictor update from the collapsed scalar formula (see module doc).

    Requires the StepInfo produced by this iteration's encoder_step; CE is
    measured at the cached pre-update and current encoder parameters with the
    probe frozen.
    """
    if info is None:
        raise RuntimeError("pmnn_step requires the StepInfo from encoder_step")
    if not state.use_pmnn:
        raise RuntimeError("pmnn_step called with a constant deviation predictor")
    ce_before, _ = probe_ce(state.enc_cfg, info.theta_before, state.probe, x_labeled, labels)
    ce_after, _ = probe_ce(state.enc_cfg, state.theta_e, state.probe, x_labeled, labels)

    d_lu = info.lu_after - info.lu_before
    coefficient = deviation_gap_coefficient(info.k_pooled)
    guard = abs(d_lu) < DENOM_GUARD
    scalar = 0.0
    if guard:
        state.guard_count += 1
    else:
        # Minus sign: see module docstring; aligns the collapse with the
        # exact chain-rule hypergradient.
        scalar = -(coefficient * (ce_after - ce_before)
                   * (info.simi_after - info.simi_before) / d_lu)
        grad_g = pmnn.grad_wrt_params(state.theta_d, info.batch.v)
        state.theta_d = sgd_step(state.theta_d, grad_g.scale(scalar), state.opt_d)

    return BilevelScalars(k_pooled=info.k_pooled, k_by_length=info.k_by_length,
                          simi_before=info.simi_before, simi_after=info.simi_after,
                          ce_before=ce_before, ce_after=ce_after,
                          lu_before=info.lu_before, lu_after=info.lu_after,
                          coefficient=coefficient, scalar=scalar, guard_triggered=guard)


def hypergradient_oracle(state: TrainState, cfg: RunConfig, info: StepInfo,
                         x_labeled: np.ndarray,
                         labels: np.ndarray) -> tuple[ParamSet, float, ParamSet]:
    """Exact first-order chain-rule hypergradient, independent of the scalar
    formula: eta_e * sigma'(k) * (grad CE(theta') . grad simi(theta)) * dE[g]/d(theta_d).

    Returns (oracle gradient, its scalar multiplier, dE[g]/d(theta_d)).
    """
    _, grad_ce = probe_ce(state.enc_cfg, state.theta_e, state.probe, x_labeled,
                          labels, want_encoder_grad=True)
    _, grad_simi = simi_and_grad(state.enc_cfg, info.theta_before,
                                 info.batch.x_raw, info.batch.x_aug)
    inner = float(grad_ce.to_flat() @ grad_simi.to_flat())
    scalar = info.lr_used * deviation_gap_coefficient(info.k_pooled) * inner
    grad_g = pmnn.grad_wrt_params(state.theta_d, info.batch.v)
    return grad_g.scale(scalar), scalar, grad_g


def dacl(enc_cfg: EncoderConfig, theta_e: ParamSet, predictor,
         probe_set: list[tuple[np.ndarray, CompositeAugmentation]]) -> float:
    """Mean absolute gap between measured deviations and the reference
    predictor's values over a set of (image, composite) pairs."""
    if not probe_set:
        raise ValueError("empty probe set")
    gaps = []
    for img, comp in probe_set:
        flat = _flatten(img[None])
        aug_flat = _flatten(apply_composite(comp, img)[None])
        _, z_raw, _ = encode_batch(enc_cfg, theta_e, flat)
        _, z_aug, _ = encode_batch(enc_cfg, theta_e, aug_flat)
        omega = float(np.sum(z_raw * z_aug))
        g = float(predictor.predict_batch(composition_vector(comp)[None])[0])
        gaps.append(abs(omega - g))
    return float(np.mean(gaps))


# ---------------------------------------------------------------------------
# Training driver


def init_train_state(cfg: RunConfig, enc_cfg: EncoderConfig,
                     total_steps: int) -> TrainState:
    theta_e = init_encoder_params(enc_cfg, make_rng(cfg.seed, STREAM_INIT_ENCODER))
    theta_k = theta_e.copy()
    theta_d = None
    opt_d = None
    if cfg.use_pmnn:
        theta_d = pmnn.init_pmnn_params(make_rng(cfg.seed, STREAM_INIT_PMNN),
                                        cfg.pmnn_hidden)
        opt_d = SgdState.init(theta_d, cfg.eta_d)
    probe = ParamSet({"w": np.zeros((enc_cfg.feature_dim, cfg.classes)),
                      "b": np.zeros(cfg.classes)})
    return TrainState(
        enc_cfg=enc_cfg, theta_e=theta_e, theta_k=theta_k, theta_d=theta_d,
        probe=probe, queue=NegativeQueue(cfg.queue_capacity, enc_cfg.embed_dim),
        opt_e=SgdState.init(theta_e, cfg.eta_e, cfg.sgd_momentum, cfg.weight_decay,
                            total_steps=total_steps),
        opt_d=opt_d,
        opt_probe=SgdState.init(probe, cfg.probe_lr, momentum=0.9),
        master_seed=cfg.seed, use_pmnn=cfg.use_pmnn, const_deviation=cfg.const_deviation)


def warm_up_queue(state: TrainState, cfg: RunConfig, images: np.ndarray) -> None:
    """Fill the queue with momentum-encoder keys; no losses, no updates."""
    n_batches = math.ceil(cfg.queue_capacity / cfg.batch_size)
    n = images.shape[0]
    for w in range(n_batches):
        rng = make_rng(state.master_seed, STREAM_WARMUP, w)
        idx = rng.integers(0, n, size=cfg.batch_size)
        keys = np.stack([
            weak_augment(images[i], make_rng(state.master_seed, STREAM_WARMUP, w, j, ROLE_KEY))
            for j, i in enumerate(idx)])
        _, z_keys, _ = encode_batch(state.enc_cfg, state.theta_k, _flatten(keys))
        state.queue.push(z_keys)


def _check_monotonic(theta_d: ParamSet, rng: np.random.Generator, trials: int = 100) -> None:
    vs = rng.integers(0, 9, size=(trials, 14))
    coords = rng.integers(0, 14, size=trials)
    base = pmnn.predict_batch(theta_d, vs)
    bumped = vs.copy()
    bumped[np.arange(trials), coords] += 1
    if np.any(pmnn.predict_batch(theta_d, bumped) > base + 1e-12):
        raise AssertionError("deviation predictor lost monotonicity")


def _dacl_probe_set(cfg: RunConfig, images: np.ndarray, epoch: int,
                    master_seed: int, size: int = 32):
    rng = make_rng(master_seed, STREAM_DACL, epoch)
    idx = rng.integers(0, images.shape[0], size=size)
    out = []
    for i in idx:
        length = int(rng.choice(np.asarray(cfg.lengths)))
        out.append((images[i], sample_composite(length, cfg.magnitude, rng)))
    return out


def probe_accuracy(enc_cfg: EncoderConfig, theta_e: ParamSet, probe: ParamSet,
                   x: np.ndarray, labels: np.ndarray) -> float:
    logits, _, _ = probe_logits(enc_cfg, theta_e, probe, x)
    return float(np.mean(np.argmax(logits, axis=1) == labels))


def train(cfg: RunConfig, dataset: Dataset) -> tuple[TrainState, list[MetricsRecord]]:
    """Run the full alternation; returns the final state and metrics stream.

    Per iteration (default alternation): encoder_step, probe_step, pmnn_step,
    where the predictor update consumes exactly the encoder pair produced by
    this iteration's step. The epoch alternation flag instead snapshots the
    encoder at epoch boundaries and applies one predictor update per epoch.
    """
    cfg.validate()
    if dataset.image_shape != (cfg.height, cfg.width, cfg.channels):
        raise ValueError(f"dataset shape {dataset.image_shape} does not match config "
                         f"({cfg.height}, {cfg.width}, {cfg.channels})")
    unlabeled = dataset.split_images("unlabeled_train")
    labeled_x_all = _flatten(dataset.split_images("labeled_train"))
    labeled_y_all = dataset.split_labels("labeled_train")
    if unlabeled.shape[0] < cfg.batch_size:
        raise ValueError("unlabeled split smaller than one batch")

    enc_cfg = EncoderConfig(input_dim=cfg.input_dim, hidden=cfg.hidden,
                            proj_hidden=cfg.proj_hidden, embed_dim=cfg.embed_dim)
    steps_per_epoch = unlabeled.shape[0] // cfg.batch_size
    state = init_train_state(cfg, enc_cfg, total_steps=cfg.epochs * steps_per_epoch)
    metrics: list[MetricsRecord] = []
    if cfg.epochs == 0:
        return state, metrics

    warm_up_queue(state, cfg, unlabeled)

    t0 = time.monotonic()
    n_labeled = labeled_x_all.shape[0]
    labeled_bs = min(cfg.batch_size, n_labeled)

    for epoch in range(cfg.epochs):
        state.epoch = epoch
        perm = make_rng(cfg.seed, STREAM_EPOCH_PERM, epoch).permutation(unlabeled.shape[0])
        epoch_start_theta = state.theta_e.copy() if cfg.alternation == "epoch" else None
        last_info: StepInfo | None = None
        epoch_rows = []

        for it in range(steps_per_epoch):
            idx = perm[it * cfg.batch_size:(it + 1) * cfg.batch_size]
            info = encoder_step(state, cfg, unlabeled[idx], step_tag=state.step)
            last_info = info

            lab_rng = make_rng(cfg.seed, STREAM_LABELED, state.step)
            lab_idx = lab_rng.choice(n_labeled, size=labeled_bs, replace=False)
            ce = probe_step(state, labeled_x_all[lab_idx], labeled_y_all[lab_idx])

            coefficient = None
            if state.use_pmnn and cfg.alternation == "iteration":
                scalars = pmnn_step(state, cfg, labeled_x_all[lab_idx],
                                    labeled_y_all[lab_idx], info)
                coefficient = scalars.coefficient

            record = MetricsRecord(
                record_type="iteration", epoch=epoch, step=state.step,
                l_contrast=info.lc, l_consist=info.lcons, l_u=info.lu_before, ce=ce,
                k_by_length={str(k): v for k, v in info.k_by_length.items()},
                coefficient=coefficient, guard_count=state.guard_count,
                probe_acc=None, dacl=None, wall_clock=time.monotonic() - t0)
            metrics.append(record)
            epoch_rows.append(record)

        if state.use_pmnn and cfg.alternation == "epoch" and last_info is not None:
            info = _epoch_pair_info(state, cfg, epoch_start_theta, last_info)
            lab_rng = make_rng(cfg.seed, STREAM_LABELED, cfg.epochs * steps_per_epoch + epoch)
            lab_idx = lab_rng.choice(n_labeled, size=labeled_bs, replace=False)
            pmnn_step(state, cfg, labeled_x_all[lab_idx], labeled_y_all[lab_idx], info)

        if state.use_pmnn:
            _check_monotonic(state.theta_d, make_rng(cfg.seed, STREAM_DACL, epoch, 1))

        acc = probe_accuracy(enc_cfg, state.theta_e, state.probe, labeled_x_all,
                             labeled_y_all)
        dacl_val = dacl(enc_cfg, state.theta_e, state.predictor(),
                        _dacl_probe_set(cfg, unlabeled, epoch, cfg.seed))
        metrics.append(MetricsRecord(
            record_type="epoch", epoch=epoch, step=state.step,
            l_contrast=float(np.mean([r.l_contrast for r in epoch_rows])),
            l_consist=float(np.mean([r.l_consist for r in epoch_rows])),
            l_u=float(np.mean([r.l_u for r in epoch_rows])),
            ce=float(np.mean([r.ce for r in epoch_rows])),
            k_by_length=_mean_k(epoch_rows),
            coefficient=None, guard_count=state.guard_count,
            probe_acc=acc, dacl=dacl_val, wall_clock=time.monotonic() - t0))
    return state, metrics


def _epoch_pair_info(state: TrainState, cfg: RunConfig, theta_start: ParamSet,
                     last_info: StepInfo) -> StepInfo:
    """Coarse epoch-level (theta, theta') pair measured on the last batch."""
    batch = last_info.batch
    g_vals = state.predictor().predict_batch(batch.v)
    before = unsup_eval(state.enc_cfg, theta_start, batch, g_vals, state.queue,
                        cfg, want_grad=False)
    after = unsup_eval(state.enc_cfg, state.theta_e, batch, g_vals, state.queue,
                       cfg, want_grad=False)
    return StepInfo(theta_before=theta_start, batch=batch, lr_used=last_info.lr_used,
                    lc=before.lc, lcons=before.lcons, lu_before=before.lu,
                    lu_after=after.lu, simi_before=before.simi, simi_after=after.simi,
                    k_pooled=before.k_pooled, k_by_length=before.k_by_length)


def _mean_k(rows: list[MetricsRecord]) -> dict[str, float]:
    keys = sorted({k for r in rows for k in r.k_by_length})
    out = {}
    for k in keys:
        vals = [r.k_by_length[k] for r in rows if k in r.k_by_length]
        out[k] = float(np.mean(vals))
    return out
