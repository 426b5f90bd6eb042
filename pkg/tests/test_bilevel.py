import dataclasses
import math

import numpy as np
import pytest

from cocor import pmnn
from cocor.bilevel import (StepInfo, dacl,
                           deviation_gap_coefficient, encoder_step,
                           hypergradient_oracle, init_train_state, pmnn_step,
                           probe_ce, probe_step, train)
from cocor.config import RunConfig
from cocor.data import synth_dataset
from cocor.encoder import EncoderConfig
from cocor.numcore import ParamSet, SgdState, make_rng, sigmoid

TINY = dict(classes=3, per_class=8, height=6, width=6, channels=1, noise=0.1,
            hidden=(10, 8), proj_hidden=8, embed_dim=4, pmnn_hidden=8,
            queue_capacity=16, batch_size=4, lengths=(1,), epochs=1)


def tiny_instance(seed, **overrides):
    cfg = RunConfig(**{**TINY, **overrides, "seed": seed})
    enc_cfg = EncoderConfig(input_dim=cfg.input_dim, hidden=cfg.hidden,
                            proj_hidden=cfg.proj_hidden, embed_dim=cfg.embed_dim)
    state = init_train_state(cfg, enc_cfg, total_steps=10)
    rng = make_rng(seed, 999)
    state.probe = ParamSet({"w": rng.standard_normal((8, cfg.classes)) * 0.5,
                            "b": rng.standard_normal(cfg.classes) * 0.1})
    state.opt_probe = SgdState.init(state.probe, cfg.probe_lr, momentum=0.9)
    keys = rng.standard_normal((8, cfg.embed_dim))
    state.queue.push(keys / np.linalg.norm(keys, axis=1, keepdims=True))
    ds = synth_dataset(cfg.classes, cfg.per_class, cfg.height, cfg.width,
                       cfg.noise, make_rng(seed, 55), channels=1)
    rng2 = make_rng(seed, 998)
    imgs = ds.images[rng2.choice(ds.images.shape[0], cfg.batch_size, replace=False)]
    lab_idx = rng2.choice(ds.images.shape[0], cfg.batch_size, replace=False)
    return cfg, state, imgs, ds.images[lab_idx].reshape(cfg.batch_size, -1), ds.labels[lab_idx]


class TestCoefficient:
    def test_quarter_at_zero(self):
        assert deviation_gap_coefficient(0.0) == 0.25

    def test_equals_sigmoid_derivative(self):
        ks = make_rng(80).uniform(-20, 20, size=1000)
        for k in ks:
            s = float(sigmoid(k))
            assert abs(deviation_gap_coefficient(float(k)) - s * (1 - s)) < 1e-12

    def test_range(self):
        for k in (-500.0, -5.0, 0.0, 5.0, 500.0):
            c = deviation_gap_coefficient(k)
            assert 0.0 < c <= 0.25 or (abs(k) > 400 and c == 0.0)
        # extreme k underflows to 0 but stays finite
        assert math.isfinite(deviation_gap_coefficient(1000.0))


class TestEncoderStep:
    def test_zero_lr_leaves_encoder_but_advances_queue(self):
        cfg, state, imgs, _, _ = tiny_instance(1)
        state.opt_e = SgdState(base_lr=0.0, momentum=0.9, weight_decay=0.0,
                               step=0, total_steps=0, buffers=state.theta_e.zeros_like())
        before = state.theta_e.copy()
        fill0 = state.queue.fill
        encoder_step(state, cfg, imgs, step_tag=0)
        for name in before.names():
            np.testing.assert_array_equal(state.theta_e[name], before[name])
        assert state.queue.fill == fill0 + cfg.batch_size

    def test_requires_nonempty_queue(self):
        cfg, state, imgs, _, _ = tiny_instance(2)
        state.queue.fill = 0
        with pytest.raises(RuntimeError):
            encoder_step(state, cfg, imgs, step_tag=0)

    def test_descent_at_small_lr(self):
        for lr in (1e-3, 1e-4):
            cfg, state, imgs, _, _ = tiny_instance(3, eta_e=lr)
            info = encoder_step(state, cfg, imgs, step_tag=0)
            assert info.lu_after < info.lu_before, lr

    def test_momentum_encoder_tracks_query(self):
        cfg, state, imgs, _, _ = tiny_instance(4)
        theta_k_before = state.theta_k.copy()
        encoder_step(state, cfg, imgs, step_tag=0)
        expected = theta_k_before.scale(cfg.momentum_coef).add_scaled(
            state.theta_e, 1.0 - cfg.momentum_coef)
        for name in expected.names():
            np.testing.assert_allclose(state.theta_k[name], expected[name], atol=1e-12)


class TestPmnnStep:
    def test_missing_info_is_sequencing_error(self):
        cfg, state, _, x_lab, y_lab = tiny_instance(5)
        with pytest.raises(RuntimeError):
            pmnn_step(state, cfg, x_lab, y_lab, None)

    def test_equal_ce_means_zero_update(self):
        cfg, state, imgs, x_lab, y_lab = tiny_instance(6)
        # theta_before == current params -> CE' == CE exactly; fake a loss drop
        # so the denominator guard does not trigger.
        batch_info = encoder_step(state, cfg, imgs, step_tag=0)
        info = StepInfo(theta_before=state.theta_e.copy(), batch=batch_info.batch,
                        lr_used=0.03, lc=1.0, lcons=0.5, lu_before=1.5, lu_after=1.4,
                        simi_before=0.3, simi_after=0.2, k_pooled=0.1,
                        k_by_length={1: 0.1})
        theta_d_before = state.theta_d.copy()
        scalars = pmnn_step(state, cfg, x_lab, y_lab, info)
        assert not scalars.guard_triggered
        assert scalars.scalar == 0.0
        assert scalars.ce_after == scalars.ce_before
        for name in theta_d_before.names():
            np.testing.assert_array_equal(state.theta_d[name], theta_d_before[name])

    def test_guard_skips_update_and_counts(self):
        cfg, state, imgs, x_lab, y_lab = tiny_instance(7)
        batch_info = encoder_step(state, cfg, imgs, step_tag=0)
        info = dataclasses.replace(batch_info, lu_after=batch_info.lu_before + 1e-12)
        theta_d_before = state.theta_d.copy()
        scalars = pmnn_step(state, cfg, x_lab, y_lab, info)
        assert scalars.guard_triggered
        assert state.guard_count == 1
        for name in theta_d_before.names():
            np.testing.assert_array_equal(state.theta_d[name], theta_d_before[name])

    def test_update_parallel_to_mean_prediction_gradient(self):
        cfg, state, imgs, x_lab, y_lab = tiny_instance(8)
        info = encoder_step(state, cfg, imgs, step_tag=0)
        theta_d_before = state.theta_d.copy()
        grad_g = pmnn.grad_wrt_params(state.theta_d, info.batch.v).to_flat()
        scalars = pmnn_step(state, cfg, x_lab, y_lab, info)
        assert not scalars.guard_triggered and scalars.scalar != 0.0
        delta = state.theta_d.to_flat() - theta_d_before.to_flat()
        cos = delta @ grad_g / (np.linalg.norm(delta) * np.linalg.norm(grad_g))
        assert abs(abs(cos) - 1.0) < 1e-9

    def test_monotonicity_survives_updates(self):
        cfg, state, imgs, x_lab, y_lab = tiny_instance(9)
        rng = make_rng(81)
        for step in range(5):
            info = encoder_step(state, cfg, imgs, step_tag=step)
            pmnn_step(state, cfg, x_lab, y_lab, info)
        for _ in range(100):
            v = rng.integers(0, 9, size=14)
            i = int(rng.integers(0, 14))
            bumped = v.copy()
            bumped[i] += 1
            assert pmnn.predict(state.theta_d, bumped) <= pmnn.predict(state.theta_d, v) + 1e-12


class TestProbeStep:
    def test_encoder_bitwise_unchanged(self):
        cfg, state, _, x_lab, y_lab = tiny_instance(10)
        before = state.theta_e.copy()
        probe_step(state, x_lab, y_lab)
        for name in before.names():
            np.testing.assert_array_equal(state.theta_e[name], before[name])

    def test_ce_measurement_never_mutates_encoder(self):
        cfg, state, _, x_lab, y_lab = tiny_instance(11)
        before = state.theta_e.copy()
        probe_ce(state.enc_cfg, state.theta_e, state.probe, x_lab, y_lab,
                 want_encoder_grad=True)
        for name in before.names():
            np.testing.assert_array_equal(state.theta_e[name], before[name])

    def test_converges_on_separable_features(self):
        # noise-free templates: one distinct feature point per class
        cfg, state, _, _, _ = tiny_instance(12)
        ds = synth_dataset(3, 4, 6, 6, 0.0, make_rng(12, 56), channels=1)
        x = ds.images.reshape(ds.images.shape[0], -1)
        y = ds.labels
        state.probe = ParamSet({"w": np.zeros((8, 3)), "b": np.zeros(3)})
        state.opt_probe = SgdState.init(state.probe, 0.5, momentum=0.9)
        acc = 0.0
        for step in range(200):
            probe_step(state, x, y)
            from cocor.bilevel import probe_accuracy
            acc = probe_accuracy(state.enc_cfg, state.theta_e, state.probe, x, y)
            if acc == 1.0:
                break
        assert acc == 1.0

    def test_label_out_of_range(self):
        cfg, state, _, x_lab, _ = tiny_instance(13)
        with pytest.raises(ValueError):
            probe_step(state, x_lab, np.full(x_lab.shape[0], 99))


class TestOracle:
    def test_oracle_vector_is_scalar_times_mean_grad(self):
        cfg, state, imgs, x_lab, y_lab = tiny_instance(14)
        info = encoder_step(state, cfg, imgs, step_tag=0)
        oracle_grad, oracle_scalar, grad_g = hypergradient_oracle(
            state, cfg, info, x_lab, y_lab)
        np.testing.assert_allclose(oracle_grad.to_flat(),
                                   oracle_scalar * grad_g.to_flat(), atol=1e-15)


class TestDacl:
    def _setup(self, seed):
        cfg, state, imgs, _, _ = tiny_instance(seed)
        rng = make_rng(seed, 83)
        from cocor.augment import sample_composite
        probe_set = [(imgs[i % imgs.shape[0]], sample_composite(1, 0.5, rng))
                     for i in range(6)]
        return state, probe_set

    def test_zero_when_reference_matches(self):
        state, probe_set = self._setup(15)

        class Echo:
            def __init__(self, enc_cfg, theta):
                self.enc_cfg, self.theta = enc_cfg, theta

            def predict_batch(self, v_batch):
                return self._vals

        # evaluate measured deviations first, then echo them back
        from cocor.augment import apply_composite
        from cocor.encoder import encode_batch
        echo = Echo(state.enc_cfg, state.theta_e)
        vals = []
        for img, comp in probe_set:
            flat = img.reshape(1, -1)
            aug = apply_composite(comp, img).reshape(1, -1)
            _, zr, _ = encode_batch(state.enc_cfg, state.theta_e, flat)
            _, za, _ = encode_batch(state.enc_cfg, state.theta_e, aug)
            vals.append(float(np.sum(zr * za)))
        it = iter(vals)

        class Seq:
            def predict_batch(self, v_batch):
                return np.array([next(it)])

        assert dacl(state.enc_cfg, state.theta_e, Seq(), probe_set) < 1e-12

    def test_constant_offset_gives_offset(self):
        state, probe_set = self._setup(17)
        from cocor.augment import apply_composite
        from cocor.encoder import encode_batch

        omegas = []
        for img, comp in probe_set:
            flat = img.reshape(1, -1)
            aug = apply_composite(comp, img).reshape(1, -1)
            _, zr, _ = encode_batch(state.enc_cfg, state.theta_e, flat)
            _, za, _ = encode_batch(state.enc_cfg, state.theta_e, aug)
            omegas.append(float(np.sum(zr * za)))
        it = iter(omegas)

        class OffsetRef:
            def predict_batch(self, v_batch):
                return np.array([next(it) - 0.1])

        val = dacl(state.enc_cfg, state.theta_e, OffsetRef(), probe_set)
        assert abs(val - 0.1) < 1e-12

    def test_matches_scalar_oracle(self):
        state, probe_set = self._setup(18)
        from cocor.augment import apply_composite
        from cocor.encoder import encode_batch
        from cocor.pmnn import ConstantPredictor

        predictor = ConstantPredictor(0.3)
        gaps = []
        for img, comp in probe_set:
            flat = img.reshape(1, -1)
            aug = apply_composite(comp, img).reshape(1, -1)
            _, zr, _ = encode_batch(state.enc_cfg, state.theta_e, flat)
            _, za, _ = encode_batch(state.enc_cfg, state.theta_e, aug)
            gaps.append(abs(float(np.sum(zr * za)) - 0.3))
        val = dacl(state.enc_cfg, state.theta_e, predictor, probe_set)
        assert abs(val - np.mean(gaps)) < 1e-12

    def test_empty_set_rejected(self):
        state, _ = self._setup(19)
        with pytest.raises(ValueError):
            dacl(state.enc_cfg, state.theta_e, None, [])


class TestTrain:
    def _cfg(self, **overrides):
        base = dict(TINY, per_class=16, queue_capacity=8, epochs=2, seed=3)
        return RunConfig(**{**base, **overrides})

    def _dataset(self, cfg):
        return synth_dataset(cfg.classes, cfg.per_class, cfg.height, cfg.width,
                             cfg.noise, make_rng(cfg.seed, 100), channels=cfg.channels,
                             labeled_frac=cfg.labeled_frac)

    def test_zero_epochs_returns_initial_state(self):
        cfg = self._cfg(epochs=0)
        state, metrics = train(cfg, self._dataset(cfg))
        assert metrics == []
        assert state.step == 0
        assert state.queue.fill == 0

    def test_deterministic_across_runs(self):
        cfg = self._cfg()
        s1, m1 = train(cfg, self._dataset(cfg))
        s2, m2 = train(cfg, self._dataset(cfg))
        np.testing.assert_array_equal(s1.theta_e.to_flat(), s2.theta_e.to_flat())
        np.testing.assert_array_equal(s1.theta_d.to_flat(), s2.theta_d.to_flat())
        assert len(m1) == len(m2)
        for a, b in zip(m1, m2):
            assert a.l_u == b.l_u and a.ce == b.ce and a.k_by_length == b.k_by_length

    def test_emits_iteration_and_epoch_records(self):
        cfg = self._cfg()
        _, metrics = train(cfg, self._dataset(cfg))
        kinds = [m.record_type for m in metrics]
        steps_per_epoch = (3 * 16 * 3 // 4 - 5 * 3) // 4  # unlabeled // batch
        assert kinds.count("epoch") == 2
        assert kinds.count("iteration") == metrics[-1].step

    def test_without_pmnn_skips_predictor_updates(self):
        cfg = self._cfg(use_pmnn=False, const_deviation=0.5)
        state, metrics = train(cfg, self._dataset(cfg))
        assert state.theta_d is None
        assert all(m.coefficient is None for m in metrics)

    def test_epoch_alternation_mode_runs(self):
        cfg = self._cfg(alternation="epoch")
        state, _ = train(cfg, self._dataset(cfg))
        assert state.step > 0

    def test_dataset_shape_mismatch_rejected(self):
        cfg = self._cfg(height=8)
        ds = synth_dataset(3, 16, 6, 6, 0.1, make_rng(3, 100))
        with pytest.raises(ValueError):
            train(cfg, ds)

    @pytest.mark.parametrize("overrides", [
        {"variant": "abs"},
        {"variant": "abs", "alternation": "epoch"},
        {"channels": 3},
        {"lengths": (1, 3)},
        {"lengths": (2,), "use_pmnn": False, "const_deviation": 0.7},
        {"consistency_weight": 0.5},
    ], ids=["abs", "abs-epoch", "rgb", "multi-length", "constant-arm", "weighted"])
    def test_configuration_matrix_smoke(self, overrides):
        cfg = self._cfg(epochs=1, **overrides)
        ds = synth_dataset(cfg.classes, cfg.per_class, cfg.height, cfg.width,
                           cfg.noise, make_rng(cfg.seed, 100),
                           channels=cfg.channels, labeled_frac=cfg.labeled_frac)
        state, metrics = train(cfg, ds)
        iters = [m for m in metrics if m.record_type == "iteration"]
        assert iters and all(np.isfinite(m.l_u) for m in iters)
        if len(cfg.lengths) > 1:
            seen = set()
            for m in iters:
                seen.update(m.k_by_length)
            assert seen == {str(l) for l in cfg.lengths}
        epochs = [m for m in metrics if m.record_type == "epoch"]
        assert len(epochs) == 1 and np.isfinite(epochs[0].dacl)
