"""Losses, reverse-mode gradients, Adam, and the plateau training loop."""

import numpy as np
import pytest

from prunebp import codes, training
from prunebp.msgpass import M_CLIP, IterationPlan, WeightSet
from prunebp.training import (AdamState, GradientSet, TrainConfig, adam_step,
                              backward, multiloss, sample_batch,
                              soft_ber_loss, train_until_plateau)


class TestSoftBerLoss:
    def test_uninformative(self):
        assert soft_ber_loss(np.full(10, 0.5), np.zeros(10)) == 0.5

    def test_perfect(self):
        assert soft_ber_loss(np.zeros(10), np.zeros(10)) == 0.0

    def test_direct(self):
        assert soft_ber_loss(np.array([0.1, 0.9]),
                             np.array([0, 1])) == pytest.approx(0.1)

    def test_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            o = rng.uniform(0, 1, 16)
            b = rng.integers(0, 2, 16)
            assert 0.0 <= soft_ber_loss(o, b) <= 1.0


class TestMultiloss:
    def _layers_with_losses(self, losses):
        # soft BER of a constant vector o equals o when b = 0
        return np.array([[v] * 4 for v in losses])

    def test_equal_weighting(self):
        o = self._layers_with_losses([0.5, 0.25])
        assert multiloss(o, np.zeros(4), eta=1.0) == pytest.approx(0.375)

    def test_geometric_weighting(self):
        o = self._layers_with_losses([0.5, 0.25])
        assert multiloss(o, np.zeros(4), eta=0.5) == pytest.approx(1 / 3)

    def test_single_layer_degenerate(self):
        o = self._layers_with_losses([0.37])
        for eta in (0.2, 0.7, 1.0):
            assert multiloss(o, np.zeros(4), eta) == pytest.approx(0.37)

    def test_convex_combination(self):
        rng = np.random.default_rng(1)
        o = rng.uniform(0, 1, (4, 8))
        b = rng.integers(0, 2, 8)
        per = [soft_ber_loss(o[l], b) for l in range(4)]
        got = multiloss(o, b, eta=0.6)
        assert min(per) - 1e-12 <= got <= max(per) + 1e-12

    def test_eta_range_enforced(self):
        with pytest.raises(ValueError):
            multiloss(np.zeros((2, 4)), np.zeros(4), eta=0.0)


@pytest.fixture(scope="module")
def small_setup(rm13, rm13_hoc):
    plan = IterationPlan.full(rm13_hoc, 2).with_pruned([(1, 3)])
    return rm13, plan


class TestBackward:
    def test_saturated_correct_decisions(self, small_setup):
        """Noiseless all-zero input: loss and gradients vanish."""
        code, plan = small_setup
        w = WeightSet.nbp_tied(plan)
        mu = np.full((8, 4), M_CLIP)
        loss, grads = backward(plan, w, "exact", mu, eta=1.0)
        assert loss <= 1e-9
        for _, arr in grads.items():
            assert np.max(np.abs(arr)) <= 1e-6

    @pytest.mark.parametrize("variant,maker", [
        ("exact", WeightSet.nbp_tied),
        ("exact", WeightSet.nbp_untied),
        ("noms", WeightSet.noms),
        ("oms", WeightSet.oms),
    ])
    def test_finite_difference_agreement(self, small_setup, variant, maker):
        """Analytic gradients match central differences, the module's
        load-bearing test."""
        code, plan = small_setup
        rng = np.random.default_rng(21)
        w = maker(plan)
        if w.w_ch is not None:
            w.w_ch += rng.normal(0, 0.2, w.w_ch.shape)
        for group in (w.w_vc, w.w_cn):
            if group is not None:
                for a in group:
                    a += rng.normal(0, 0.2, a.shape)
        if w.offsets is not None:
            for a in w.offsets:
                a[:] = np.abs(rng.normal(0.2, 0.15, a.shape))
        mu = rng.normal(2.0, 2.2, (8, 6))
        eta = 0.8
        loss, grads = backward(plan, w, variant, mu, eta)
        gmap = dict(grads.items())
        params = [(k, a, i) for k, a in w.param_items()
                  for i in range(a.size)]
        sel = np.random.default_rng(5).choice(len(params),
                                               min(30, len(params)),
                                               replace=False)
        h = 1e-4
        for s in sel:
            key, arr, i = params[s]
            flat = arr.reshape(-1)
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = backward(plan, w, variant, mu, eta)
            flat[i] = orig - h
            lm, _ = backward(plan, w, variant, mu, eta)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = gmap[key].reshape(-1)[i]
            assert abs(an - fd) <= 1e-3 * max(abs(fd), 1e-8), (key, i)

    def test_zero_cn_weight_gradient_finite(self, small_setup):
        code, plan = small_setup
        rng = np.random.default_rng(3)
        w = WeightSet.nbp_tied(plan)
        w.w_cn[0][2] = 0.0
        mu = rng.normal(2, 2, (8, 4))
        _, grads = backward(plan, w, "exact", mu, eta=1.0)
        assert np.isfinite(grads.w_cn[0][2])

    def test_general_bits_supported(self, small_setup):
        code, plan = small_setup
        rng = np.random.default_rng(4)
        w = WeightSet.nbp_tied(plan)
        mu = rng.normal(0, 3, (8, 4))
        bits = rng.integers(0, 2, (8, 4))
        loss, _ = backward(plan, w, "exact", mu, eta=1.0, bits=bits)
        assert 0.0 <= loss <= 1.0

    def test_non_finite_gradient_reported(self, small_setup):
        code, plan = small_setup
        w = WeightSet.nbp_tied(plan)
        w.w_vc[0][1] = np.nan
        mu = np.ones((8, 2))
        with pytest.raises(training.NonFiniteGradientError) as exc:
            backward(plan, w, "exact", mu, eta=1.0)
        assert "w_" in str(exc.value)

    def test_float32_close_to_float64(self, small_setup):
        code, plan = small_setup
        rng = np.random.default_rng(6)
        w = WeightSet.nbp_tied(plan)
        mu = rng.normal(1, 2, (8, 16))
        l64, g64 = backward(plan, w, "exact", mu, eta=0.9)
        l32, g32 = backward(plan, w, "exact", mu, eta=0.9, dtype="float32")
        assert l32 == pytest.approx(l64, rel=1e-4)
        a64 = dict(g64.items())[("w_vc", 0)]
        a32 = dict(g32.items())[("w_vc", 0)]
        assert np.allclose(a32, a64, rtol=1e-3, atol=1e-7)


class TestAdam:
    def test_first_step_magnitude(self):
        cfg = TrainConfig()
        w = WeightSet(cn_mode="unit", offsets=[np.array([1.0])],
                      offset_mode="cn")
        grads = GradientSet(offsets=[np.array([1.0])])
        adam_step(w, grads, AdamState(), cfg)
        assert w.offsets[0][0] == pytest.approx(1.0 - 0.001, abs=1e-6)

    def test_zero_gradient_no_motion(self):
        cfg = TrainConfig()
        w = WeightSet(cn_mode="unit", offsets=[np.array([0.7, -0.2])],
                      offset_mode="cn")
        state = AdamState()
        for _ in range(5):
            adam_step(w, GradientSet(offsets=[np.zeros(2)]), state, cfg)
        assert np.array_equal(w.offsets[0], [0.7, -0.2])

    def test_equal_gradients_equal_updates(self):
        cfg = TrainConfig()
        w = WeightSet(cn_mode="unit", offsets=[np.array([0.5, 0.5])],
                      offset_mode="cn")
        state = AdamState()
        rng = np.random.default_rng(0)
        for _ in range(10):
            g = float(rng.normal())
            adam_step(w, GradientSet(offsets=[np.array([g, g])]), state, cfg)
        assert w.offsets[0][0] == w.offsets[0][1]


class TestSampleBatch:
    def test_deterministic(self, rm13):
        cfg = TrainConfig(batch_size=16, seed=3)
        a = sample_batch(rm13, cfg, np.random.default_rng(9))
        b = sample_batch(rm13, cfg, np.random.default_rng(9))
        assert np.array_equal(a, b)

    def test_high_snr_saturates(self, rm13):
        cfg = TrainConfig(batch_size=8, train_ebn0_db=60.0)
        mu = sample_batch(rm13, cfg, np.random.default_rng(0))
        assert np.all(mu == M_CLIP)

    def test_mean_matches_channel(self, rm25):
        """All-zero transmission: E[mu] = 2 / sigma^2."""
        cfg = TrainConfig(batch_size=20000, train_ebn0_db=2.0)
        mu = sample_batch(rm25, cfg, np.random.default_rng(1))
        sigma2 = 1.0 / (2 * rm25.rate * 10 ** 0.2)
        mean, se = mu.mean(), mu.std() / np.sqrt(mu.size)
        assert abs(mean - 2 / sigma2) < 3 * se


class TestTrainUntilPlateau:
    def test_zero_budget_returns_unchanged(self, rm13, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        cfg = TrainConfig(max_batches=0, batch_size=4)
        out, hist = train_until_plateau(rm13, plan, w, "exact", cfg)
        assert hist == []
        assert np.array_equal(out.w_ch, w.w_ch)

    def test_constant_loss_stops_after_two_windows(self, rm13, rm13_hoc):
        """A constant loss landscape (saturated identical batches, zero
        effective gradients) must stop exactly one window past the first
        full window."""
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        cfg = TrainConfig(max_batches=500, batch_size=4, plateau_window=15,
                          train_ebn0_db=60.0, seed=1)
        _, hist = train_until_plateau(rm13, plan, w, "exact", cfg)
        assert len(hist) == 30

    def test_loss_decreases_rm25(self, rm25, rm25_hoc):
        """Training strictly improves on the all-ones starting point,
        measured on one held-out batch."""
        plan = IterationPlan.full(rm25_hoc, 6)
        w0 = WeightSet.nbp_tied(plan)
        cfg = TrainConfig(max_batches=60, batch_size=32, plateau_window=60,
                          train_ebn0_db=2.0, seed=2, dtype="float32")
        trained, hist = train_until_plateau(rm25, plan, w0, "exact", cfg)
        probe = sample_batch(rm25, TrainConfig(batch_size=512, seed=123,
                                               train_ebn0_db=2.0),
                             np.random.default_rng(123))
        before, _ = backward(plan, w0, "exact", probe, eta=1.0)
        after, _ = backward(plan, trained, "exact", probe, eta=1.0)
        assert after < before

    def test_eta_schedule_and_monotonicity(self, rm13, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        cfg = TrainConfig(max_batches=50, batch_size=4, plateau_window=100,
                          eta_period=10, eta_decay=0.8, seed=0)
        _, hist = train_until_plateau(rm13, plan, w, "exact", cfg)
        etas = [h[2] for h in hist]
        assert all(b <= a + 1e-15 for a, b in zip(etas, etas[1:]))
        assert etas[0] == 1.0
        assert etas[10] == pytest.approx(0.8)
        assert etas[20] == pytest.approx(0.64)

    def test_deterministic_trajectories(self, rm13, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        cfg = TrainConfig(max_batches=30, batch_size=8, plateau_window=30,
                          seed=7)
        w1, h1 = train_until_plateau(rm13, plan, WeightSet.nbp_tied(plan),
                                     "exact", cfg)
        w2, h2 = train_until_plateau(rm13, plan, WeightSet.nbp_tied(plan),
                                     "exact", cfg)
        assert h1 == h2
        assert np.array_equal(w1.w_ch, w2.w_ch)
        assert all(np.array_equal(a, b) for a, b in zip(w1.w_vc, w2.w_vc))

    def test_returned_weights_beat_start(self, rm13, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        cfg = TrainConfig(max_batches=120, batch_size=16, plateau_window=20,
                          train_ebn0_db=2.0, seed=11)
        w0 = WeightSet.nbp_tied(plan)
        w, hist = train_until_plateau(rm13, plan, w0, "exact", cfg)
        probe = sample_batch(rm13, TrainConfig(batch_size=2048, seed=5,
                                               train_ebn0_db=2.0),
                             np.random.default_rng(5))
        before, _ = backward(plan, w0, "exact", probe, eta=1.0)
        after, _ = backward(plan, w, "exact", probe, eta=1.0)
        assert after <= before


class TestAllZeroSufficiency:
    def test_loss_mean_invariant_under_codeword(self, rm13, rm13_hoc):
        """Channel/decoder symmetry: training on any fixed codeword gives
        the same expected loss as the all-zero assumption."""
        from prunebp.simulation import ChannelConfig, awgn_llr

        plan = IterationPlan.full(rm13_hoc, 2)
        rng = np.random.default_rng(17)
        w = WeightSet.nbp_tied(plan)
        w.w_ch += rng.normal(0, 0.1, w.w_ch.shape)
        for a in w.w_vc:
            a += rng.normal(0, 0.1, a.shape)
        cw = rm13.encode(rng.integers(0, 2, rm13.k))
        ch = ChannelConfig(ebn0_db=2.0, rate=rm13.rate)
        n_batches, bs = 2000, 16
        losses = {"zero": [], "cw": []}
        for mode in ("zero", "cw"):
            r = np.random.default_rng(99)
            bits = (np.zeros((8, bs), dtype=np.uint8) if mode == "zero"
                    else np.tile(cw[:, None], (1, bs)).astype(np.uint8))
            for _ in range(n_batches):
                mu = awgn_llr(bits, ch, r)
                loss, _ = backward(plan, w, "exact", mu, eta=1.0, bits=bits)
                losses[mode].append(loss)
        za = np.array(losses["zero"])
        ca = np.array(losses["cw"])
        se = np.sqrt(za.var() / za.size + ca.var() / ca.size)
        assert abs(za.mean() - ca.mean()) < 3 * se


class TestLossHistoryCsv:
    def test_columns(self, tmp_path):
        path = tmp_path / "loss.csv"
        training.write_loss_history_csv([(1, 0.5, 1.0), (2, 0.4, 0.8)], path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "batch_index,loss,eta"
        assert lines[1].startswith("1,0.5,")
