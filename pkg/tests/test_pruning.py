"""Candidate selection, the prune/retrain loop, and decoder finalization."""

import numpy as np
import pytest

from prunebp import pruning, training
from prunebp.msgpass import Decoder, IterationPlan, WeightSet, decode
from prunebp.pruning import (PruneConfig, apply_prune, complexity,
                             count_parameters, finalize_decoder, prune_loop,
                             select_candidates)
from prunebp.training import TrainConfig, backward, sample_batch
from reference_bp import reference_decode


def tiny_tcfg(**kw):
    base = dict(batch_size=16, max_batches=60, plateau_window=15,
                train_ebn0_db=3.0, seed=5)
    base.update(kw)
    return TrainConfig(**base)


class TestSelectCandidates:
    def _plan_weights(self, rm13_hoc, values_by_layer):
        plan = IterationPlan.full(rm13_hoc, len(values_by_layer))
        w = WeightSet.nbp_tied(plan)
        for l, vals in enumerate(values_by_layer):
            w.w_cn[l][: len(vals)] = vals
        return plan, w

    def test_min_magnitude_selected(self, rm13_hoc):
        plan, w = self._plan_weights(rm13_hoc, [[0.9, 0.05], [-0.2]])
        assert select_candidates(plan, w, 1) == [(0, 1)]

    def test_magnitude_ordering(self, rm13_hoc):
        plan, w = self._plan_weights(rm13_hoc, [[0.9, 0.05], [-0.2]])
        assert select_candidates(plan, w, 2) == [(0, 1), (1, 0)]

    def test_tie_break_lowest_index(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)  # all equal
        assert select_candidates(plan, w, 1) == [(0, 0)]

    def test_never_empties_first_iteration(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        w.w_cn[0][:] = 0.0   # layer 0 weights are all the smallest
        w.w_cn[1][:] = 1.0
        picked = select_candidates(plan, w, 14)
        assert sum(1 for l, _ in picked if l == 0) == 13
        assert (1, 0) in picked

    def test_dominance_property(self, rm13_hoc):
        """No pruned CN may out-weigh a surviving one (up to the
        iteration-1 floor)."""
        rng = np.random.default_rng(4)
        plan = IterationPlan.full(rm13_hoc, 3)
        w = WeightSet.nbp_tied(plan)
        for a in w.w_cn:
            a[:] = rng.normal(0, 1, a.shape)
        picked = select_candidates(plan, w, 10)
        mags = {(l, c): abs(w.w_cn[l][list(np.nonzero(plan.active[l])[0]).index(c)])
                for l in range(3) for c in np.nonzero(plan.active[l])[0]}
        pruned_m = [mags[v] for v in picked if v[0] != 0]
        surviving = [m for k, m in mags.items() if k not in picked]
        if pruned_m and surviving:
            assert max(pruned_m) <= min(surviving) + 1e-12

    def test_max_weight_is_reversed(self, rm13_hoc):
        rng = np.random.default_rng(5)
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        for a in w.w_cn:
            a[:] = rng.normal(0, 1, a.shape)
        low = select_candidates(plan, w, 1)[0]
        high = select_candidates(plan, w, 1, largest=True)[0]
        def mag(v):
            l, c = v
            return abs(w.w_cn[l][list(np.nonzero(plan.active[l])[0]).index(c)])
        assert mag(high) >= mag(low)

    def test_requires_tied_mode(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        with pytest.raises(ValueError):
            select_candidates(plan, WeightSet.nbp_untied(plan), 1)


class TestApplyPrune:
    def test_cn_evals_counting(self, rm25_hoc):
        plan = IterationPlan.full(rm25_hoc, 6)
        w = WeightSet.nbp_tied(plan)
        assert plan.cn_evals == 3720
        plan2, w2 = apply_prune(plan, w, [(3, 100)])
        assert plan2.cn_evals == 3719
        w2.validate(plan2)

    def test_empty_layer_marginalization_passthrough(self, rm13, rm13_hoc):
        """With the whole final iteration pruned, the last soft output is
        the weighted channel term plus the previous layer's messages."""
        rng = np.random.default_rng(2)
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        plan2, w2 = apply_prune(plan, w, [(1, c) for c in range(14)])
        mu = rng.normal(0, 3, 8)
        tr = decode(plan2, w2, "exact", mu)
        # no layer-2 CN messages: marginalization reduces to w_ch * mu
        assert np.allclose(tr.mu_post[1], w2.w_ch[2] * mu)

    def test_already_pruned_rejected(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        plan2, w2 = apply_prune(plan, w, [(1, 3)])
        with pytest.raises(ValueError):
            apply_prune(plan2, w2, [(1, 3)])

    def test_weight_values_survive(self, rm13_hoc):
        rng = np.random.default_rng(3)
        plan = IterationPlan.full(rm13_hoc, 2)
        w = WeightSet.nbp_tied(plan)
        for a in w.w_cn:
            a[:] = rng.normal(1, 0.1, a.shape)
        plan2, w2 = apply_prune(plan, w, [(0, 5)])
        act = list(np.nonzero(plan.active[0])[0])
        keep = [i for i, c in enumerate(act) if c != 5]
        assert np.array_equal(w2.w_cn[0], w.w_cn[0][keep])


class TestComplexity:
    def test_ldpc_bp_iterations(self, ldpc128):
        plan25 = IterationPlan.full(ldpc128.h_std, 25)
        assert complexity(plan25) == 12800.0
        plan100 = IterationPlan.full(ldpc128.h_std, 100)
        assert complexity(plan100) == 51200.0

    def test_rm25_degree_normalized(self, rm25_hoc, rm25):
        plan = IterationPlan.full(rm25_hoc, 6)
        assert complexity(plan, degree_normalized=True) == 3720
        plan_std = IterationPlan.full(rm25.h_std, 6)
        assert complexity(plan_std, degree_normalized=True) == 96

    def test_empty_layer_contributes_zero(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        plan2 = plan.with_pruned([(1, c) for c in range(14)])
        assert complexity(plan2) == complexity(
            IterationPlan.full(rm13_hoc, 1))

    def test_monotone_under_pruning(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 3)
        w = WeightSet.nbp_tied(plan)
        prev = complexity(plan)
        for victim in [(0, 1), (1, 2), (2, 3)]:
            plan, w = apply_prune(plan, w, [victim])
            cur = complexity(plan)
            assert cur < prev
            prev = cur


class TestCountParameters:
    def test_d2_and_unit_store_nothing(self):
        assert count_parameters(WeightSet.unit()) == 0

    def test_documented_convention(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        # (l_max + 1) * n channel + per-edge vn + per-cn tied
        assert count_parameters(WeightSet.nbp_tied(plan)) == 3 * 8 + 2 * 56 + 2 * 14

    def test_untied_exceeds_tied(self, rm13_hoc):
        plan = IterationPlan.full(rm13_hoc, 2)
        assert (count_parameters(WeightSet.nbp_untied(plan))
                > count_parameters(WeightSet.nbp_tied(plan)))


class TestPruneLoop:
    def test_target_rule_reaches_target(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, stop_rule="target_cn_count",
                          target_cn_count=18, group_schedule=((0.0, 3),))
        plan, w, hist = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        assert plan.cn_evals == 18
        remaining = [r.remaining_cn for r in hist]
        assert remaining == sorted(remaining, reverse=True)
        assert all(a > b for a, b in zip(remaining, remaining[1:]))

    def test_deterministic(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, stop_rule="target_cn_count",
                          target_cn_count=22, group_schedule=((0.0, 3),))
        out1 = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        out2 = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        assert np.array_equal(out1[0].active, out2[0].active)
        assert np.array_equal(out1[1].w_ch, out2[1].w_ch)

    def test_random_strategy_reproducible_same_count(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, strategy="random", random_seed=7,
                          stop_rule="target_cn_count", target_cn_count=20,
                          group_schedule=((0.0, 4),))
        p1, _, _ = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        p2, _, _ = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        assert np.array_equal(p1.active, p2.active)
        assert p1.cn_evals == 20

    def test_one_shot_full_count_is_plain_training(self, rm13, rm13_hoc):
        """one_shot keeping every CN degenerates to training the unpruned
        decoder."""
        tcfg = tiny_tcfg()
        cfg = PruneConfig(l_max=2, strategy="one_shot", one_shot_count=28)
        plan, w, hist = prune_loop(rm13, rm13_hoc, cfg, tcfg)
        assert plan.cn_evals == 28
        assert len(hist) == 1
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=tcfg.seed, spawn_key=(0,)))
        ref_plan = IterationPlan.full(rm13_hoc, 2)
        ref_w, _ = training.train_until_plateau(
            rm13, ref_plan, WeightSet.nbp_tied(ref_plan), "exact", tcfg,
            rng=rng)
        assert np.array_equal(w.w_ch, ref_w.w_ch)
        assert all(np.array_equal(a, b) for a, b in zip(w.w_cn, ref_w.w_cn))

    def test_one_shot_prunes_to_count(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, strategy="one_shot", one_shot_count=16)
        plan, w, hist = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        assert plan.cn_evals == 16
        assert len(hist) == 2

    def test_loss_increase_returns_best_snapshot(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, stop_rule="loss_increase", loss_slack=0.0,
                          group_schedule=((0.0, 3),))
        plan, w, hist = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        losses = [r.loss_after_retrain for r in hist]
        best = hist[int(np.argmin(losses))]
        assert plan.cn_evals == best.remaining_cn

    def test_divergence_aborts_with_last_good(self, rm13, rm13_hoc,
                                              monkeypatch):
        calls = {"n": 0}
        real = pruning.train_until_plateau

        def flaky(*args, **kw):
            calls["n"] += 1
            if calls["n"] >= 3:
                w, hist = real(*args, **kw)
                return w, [(1, np.nan, 1.0)]
            return real(*args, **kw)

        monkeypatch.setattr(pruning, "train_until_plateau", flaky)
        cfg = PruneConfig(l_max=2, stop_rule="target_cn_count",
                          target_cn_count=14, group_schedule=((0.0, 2),))
        plan, w, hist = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        # aborted at the third retrain: snapshot is from the second
        assert plan.cn_evals == hist[-2].remaining_cn
        assert not np.isfinite(hist[-1].loss_after_retrain)
        w.validate(plan)

    def test_probe_records_bler(self, rm13, rm13_hoc):
        cfg = PruneConfig(l_max=2, strategy="one_shot", one_shot_count=26,
                          probe=True, probe_blocks=256)
        _, _, hist = prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())
        assert all(r.bler_probe is not None for r in hist)


@pytest.fixture(scope="module")
def pruned(rm13, rm13_hoc):
    cfg = PruneConfig(l_max=2, stop_rule="target_cn_count",
                      target_cn_count=18, group_schedule=((0.0, 3),))
    return prune_loop(rm13, rm13_hoc, cfg, tiny_tcfg())


class TestFinalize:
    def test_d2_is_plain_bp_bit_exact(self, rm13, pruned):
        plan, w, _ = pruned
        d2 = finalize_decoder(rm13, plan, w, "D2", tiny_tcfg())
        rng = np.random.default_rng(0)
        mu = rng.normal(0, 4, (8, 50))
        tr = d2.decode(mu)
        ref = reference_decode(plan, WeightSet.unit(), "exact", mu)
        assert np.array_equal(tr.mu_post, ref)

    def test_d1_passthrough(self, rm13, pruned):
        plan, w, _ = pruned
        d1 = finalize_decoder(rm13, plan, w, "D1", tiny_tcfg())
        assert np.array_equal(d1.weights.w_ch, w.w_ch)
        assert d1.plan is plan

    def test_d3_has_more_parameters(self, rm13, pruned):
        plan, w, _ = pruned
        tcfg = tiny_tcfg(max_batches=30)
        d1 = finalize_decoder(rm13, plan, w, "D1", tcfg)
        d3 = finalize_decoder(rm13, plan, w, "D3", tcfg)
        assert count_parameters(d3.weights) > count_parameters(d1.weights)

    def test_d3_loss_not_worse_than_d1(self, rm13, pruned):
        """D3 starts from D1's optimum (tied point), so its retrained loss
        cannot end up meaningfully above D1's."""
        plan, w, _ = pruned
        tcfg = tiny_tcfg(max_batches=120)
        d1 = finalize_decoder(rm13, plan, w, "D1", tcfg)
        d3 = finalize_decoder(rm13, plan, w, "D3", tcfg)
        probe = sample_batch(rm13, TrainConfig(batch_size=4096, seed=42,
                                               train_ebn0_db=3.0),
                             np.random.default_rng(42))
        l1, _ = backward(plan, d1.weights, "exact", probe, eta=1.0)
        l3, _ = backward(plan, d3.weights, "exact", probe, eta=1.0)
        assert l3 <= l1 * 1.10 + 1e-6

    def test_unknown_kind_rejected(self, rm13, pruned):
        plan, w, _ = pruned
        with pytest.raises(ValueError):
            finalize_decoder(rm13, plan, w, "D4", tiny_tcfg())


class TestHistoryCsv:
    def test_columns(self, tmp_path):
        recs = [pruning.PruneRecord(0, [], 0.5, 28, None),
                pruning.PruneRecord(1, [(0, 3)], 0.4, 27, 0.01)]
        path = tmp_path / "h.csv"
        pruning.write_history_csv(recs, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "step,remaining_cn,loss,bler_probe"
        assert lines[1] == "0,28,0.5,"
        assert lines[2] == "1,27,0.4,0.01"


class TestPruneConfigValidation:
    def test_bad_values(self):
        with pytest.raises(ValueError):
            PruneConfig(strategy="bogus")
        with pytest.raises(ValueError):
            PruneConfig(stop_rule="target_cn_count")
        with pytest.raises(ValueError):
            PruneConfig(l_max=6, stop_rule="target_cn_count",
                        target_cn_count=3)
        with pytest.raises(ValueError):
            PruneConfig(strategy="one_shot")
        with pytest.raises(ValueError):
            PruneConfig(group_schedule=((0.5, 0),))
