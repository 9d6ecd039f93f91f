"""Iterative check-node pruning of trained unrolled decoders.

Alternates training to a loss plateau with removal of the check nodes
whose tied weights have the smallest magnitude, tracks the per-step loss,
and finalizes the pruned plan into decoders of three complexity classes:
D1 keeps the trained weights, D2 drops all weights (plain BP over the
pruned per-iteration matrices), D3 unties the CN weights per edge and
retrains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .codes import ParityCheckMatrix
from .msgpass import Decoder, IterationPlan, WeightSet
from .training import (TrainConfig, best_window_loss, train_until_plateau)

# prune this many CNs per step while more than the given count remains
DEFAULT_GROUP_STEPS = ((10_000, 25), (2_000, 5), (0, 1))


@dataclass
class PruneConfig:
    l_max: int = 6
    strategy: str = "min_weight"  # min_weight | random | max_weight | one_shot
    stop_rule: str = "loss_increase"  # loss_increase | target_cn_count
    loss_slack: float = 0.05
    target_cn_count: int | None = None
    one_shot_count: int | None = None  # CNs remaining after the single step
    group_schedule: tuple | None = None  # ((remaining_fraction, per_step), ...)
    random_seed: int = 0
    probe: bool = False
    probe_ebn0_db: float = 4.0
    probe_blocks: int = 10_000
    probe_seed: int = 1234

    def __post_init__(self):
        if self.strategy not in ("min_weight", "random", "max_weight",
                                 "one_shot"):
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.stop_rule not in ("loss_increase", "target_cn_count"):
            raise ValueError(f"unknown stop rule {self.stop_rule!r}")
        if self.stop_rule == "target_cn_count":
            if self.target_cn_count is None:
                raise ValueError("target_cn_count stop rule needs a target")
            if self.target_cn_count < self.l_max:
                raise ValueError("target must be >= one CN per iteration")
        if self.strategy == "one_shot" and self.one_shot_count is None:
            raise ValueError("one_shot strategy needs one_shot_count")
        if self.group_schedule is not None:
            for frac, size in self.group_schedule:
                if size < 1:
                    raise ValueError("group sizes must be >= 1")


@dataclass
class PruneRecord:
    step: int
    pruned: list  # [(iteration, cn index), ...]
    loss_after_retrain: float
    remaining_cn: int
    bler_probe: float | None = None
    train_batches: int = 0


# ---------------------------------------------------------------------------
# Candidate selection and removal
# ---------------------------------------------------------------------------

def select_candidates(plan: IterationPlan, weights: WeightSet,
                      count: int, largest: bool = False) -> list[tuple[int, int]]:
    """The ``count`` active CNs with the smallest |tied weight|.

    Ties break by (iteration, cn) ascending. Never selects the last
    active CN of iteration 1. ``largest=True`` reverses the magnitude
    ordering (the maximum-pruning baseline).
    """
    if weights.cn_mode != "tied":
        raise ValueError("candidate selection needs tied CN weights")
    entries = []
    for l in range(plan.l_max):
        act = np.nonzero(plan.active[l])[0]
        mag = np.abs(weights.w_cn[l])
        for i, c in enumerate(act):
            entries.append((float(mag[i]), l, int(c)))
    entries.sort(key=lambda e: (-e[0], e[1], e[2]) if largest else e)
    layer0_left = int(plan.active[0].sum())
    picked = []
    for _, l, c in entries:
        if len(picked) == count:
            break
        if l == 0:
            if layer0_left <= 1:
                continue
            layer0_left -= 1
        picked.append((l, c))
    if len(picked) < count:
        raise ValueError(f"only {len(picked)} prunable CNs available")
    return picked


def _layer_keep_masks(plan: IterationPlan, victims) -> list[np.ndarray]:
    """Per layer: keep flag per currently active CN (in active order)."""
    victims_by_layer = {}
    for l, c in victims:
        victims_by_layer.setdefault(l, set()).add(c)
    masks = []
    for l in range(plan.l_max):
        act = np.nonzero(plan.active[l])[0]
        bad = victims_by_layer.get(l, set())
        masks.append(np.array([c not in bad for c in act]))
    return masks


def apply_prune(plan: IterationPlan, weights: WeightSet, victims):
    """Mask the victim CNs and drop their parameters from the weight set.

    Victim parameters are removed outright (not zero-frozen), so they can
    never receive optimizer updates afterwards.
    """
    keep = _layer_keep_masks(plan, victims)
    new_plan = plan.with_pruned(victims)
    row_w = np.asarray(plan.base.row_weights)

    def shrink(group, per_edge):
        if group is None:
            return None
        out = []
        for l in range(plan.l_max):
            k = keep[l]
            if per_edge:
                act = np.nonzero(plan.active[l])[0]
                ek = np.repeat(k, row_w[act])
                out.append(group[l][ek].copy())
            else:
                out.append(group[l][k].copy())
        return out

    new_weights = WeightSet(
        cn_mode=weights.cn_mode,
        w_ch=None if weights.w_ch is None else weights.w_ch.copy(),
        w_vc=shrink(weights.w_vc, per_edge=True),
        w_cn=shrink(weights.w_cn, per_edge=(weights.cn_mode == "untied")),
        offsets=shrink(weights.offsets,
                       per_edge=(weights.offset_mode == "edge")),
        offset_mode=weights.offset_mode,
    )
    new_weights.validate(new_plan)
    return new_plan, new_weights


# ---------------------------------------------------------------------------
# Complexity accounting
# ---------------------------------------------------------------------------

def complexity(plan: IterationPlan, degree_normalized: bool = False) -> float:
    """Per-iteration CN-evaluation cost: sum of mean degree times count.

    With ``degree_normalized`` the degree factor is dropped (the usual
    report for regular-degree matrices), leaving the active CN count.
    """
    if degree_normalized:
        return float(plan.cn_evals)
    w = np.asarray(plan.base.row_weights, dtype=np.float64)
    total = 0.0
    for l in range(plan.l_max):
        act = plan.active[l]
        cnt = int(act.sum())
        if cnt:
            total += w[act].mean() * cnt
    return float(total)


def count_parameters(weights: WeightSet) -> int:
    """Stored trainable scalars.

    Convention: channel weights count one per VN per VN layer plus one
    extra set for the final marginalization ((l_max + 1) * n in total);
    VN-to-CN weights one per active edge per iteration; CN weights one
    per active CN (tied) or per active edge (untied); offsets likewise.
    Unit parts store nothing and count zero. Quantizer levels are not
    weights and are not counted.
    """
    return weights.n_parameters()


# ---------------------------------------------------------------------------
# The prune / retrain loop
# ---------------------------------------------------------------------------

def _group_size(cfg: PruneConfig, remaining: int, total: int) -> int:
    if cfg.group_schedule is not None:
        for frac, size in sorted(cfg.group_schedule, key=lambda e: -e[0]):
            if remaining / total > frac:
                return size
        return sorted(cfg.group_schedule, key=lambda e: e[0])[0][1]
    for above, size in DEFAULT_GROUP_STEPS:
        if remaining > above:
            return size
    return 1


def _bler_probe(code, plan, weights, cfg: PruneConfig):
    from .simulation import monte_carlo

    dec = Decoder(plan, weights, "exact")
    res = monte_carlo(dec, code, [cfg.probe_ebn0_db],
                      min_block_errors=10 ** 9, max_blocks=cfg.probe_blocks,
                      seed=cfg.probe_seed)
    return res[0].bler


def prune_loop(code, h_oc: ParityCheckMatrix, cfg: PruneConfig,
               tcfg: TrainConfig, initial=None):
    """Iterate training and CN pruning per Algorithm-style schedule.

    Starts from the full overcomplete plan with all-ones tied NBP weights
    (or a warm-start ``initial`` = (plan, weights)), retrains to a plateau
    after every pruning step, and stops per ``cfg.stop_rule``: on a loss
    increase beyond the slack it returns the best-loss snapshot, on a CN
    target it returns the final retrained state. Returns
    (plan, weights, history).
    """
    if initial is None:
        plan = IterationPlan.full(h_oc, cfg.l_max)
        weights = WeightSet.nbp_tied(plan)
    else:
        plan, weights = initial
        weights = weights.copy()
    total = plan.cn_evals
    strat_rng = np.random.default_rng(cfg.random_seed)
    history: list[PruneRecord] = []
    best = None  # (loss, plan, weights)
    last_good = None

    def retrain(step, plan, weights, pruned):
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=tcfg.seed, spawn_key=(step,)))
        weights, hist = train_until_plateau(code, plan, weights, "exact",
                                            tcfg, rng=rng)
        loss = best_window_loss(hist, tcfg.plateau_window)
        probe = _bler_probe(code, plan, weights, cfg) if cfg.probe else None
        history.append(PruneRecord(step=step, pruned=list(pruned),
                                   loss_after_retrain=loss,
                                   remaining_cn=plan.cn_evals,
                                   bler_probe=probe,
                                   train_batches=len(hist)))
        return weights, loss

    weights, loss = retrain(0, plan, weights, [])
    if not np.isfinite(loss):
        raise RuntimeError("initial training diverged")
    best = (loss, plan, weights)
    last_good = (plan, weights)
    step = 0
    while True:
        remaining = plan.cn_evals
        if cfg.strategy == "one_shot":
            if step >= 1 or cfg.one_shot_count >= remaining:
                break
            n_prune = remaining - cfg.one_shot_count
        else:
            if cfg.stop_rule == "target_cn_count":
                if remaining <= cfg.target_cn_count:
                    break
                n_prune = min(_group_size(cfg, remaining, total),
                              remaining - cfg.target_cn_count)
            else:
                n_prune = _group_size(cfg, remaining, total)
            n_prune = min(n_prune, remaining - 1)
            if n_prune < 1:
                break
        step += 1
        if cfg.strategy == "random":
            actives = [(l, int(c)) for l in range(plan.l_max)
                       for c in np.nonzero(plan.active[l])[0]]
            n_layer0 = sum(1 for e in actives if e[0] == 0)
            pick = strat_rng.choice(len(actives), size=n_prune, replace=False)
            victims = [actives[i] for i in pick]
            if sum(1 for v in victims if v[0] == 0) >= n_layer0:
                drop = max(i for i, v in enumerate(victims) if v[0] == 0)
                victims.pop(drop)  # keep iteration 1 nonempty
        elif cfg.strategy == "max_weight":
            victims = select_candidates(plan, weights, n_prune, largest=True)
        else:  # min_weight, one_shot
            victims = select_candidates(plan, weights, n_prune)
        plan, weights = apply_prune(plan, weights, victims)
        weights, loss = retrain(step, plan, weights, victims)
        if not np.isfinite(loss):
            plan, weights = last_good
            break
        last_good = (plan, weights)
        if loss < best[0]:
            best = (loss, plan, weights)
        if (cfg.strategy != "one_shot" and cfg.stop_rule == "loss_increase"
                and loss > (1.0 + cfg.loss_slack) * best[0]):
            _, plan, weights = best
            break
    return plan, weights, history


def untie_cn_weights(plan: IterationPlan, weights: WeightSet) -> WeightSet:
    """Per-edge CN weights initialized from the tied per-CN values."""
    if weights.cn_mode != "tied":
        raise ValueError("can only untie tied CN weights")
    row_w = np.asarray(plan.base.row_weights)
    w_cn = []
    for l in range(plan.l_max):
        act = np.nonzero(plan.active[l])[0]
        w_cn.append(np.repeat(weights.w_cn[l], row_w[act]))
    return WeightSet(cn_mode="untied", w_ch=weights.w_ch.copy(),
                     w_vc=[a.copy() for a in weights.w_vc], w_cn=w_cn)


def finalize_decoder(code, plan: IterationPlan, weights: WeightSet,
                     kind: str, tcfg: TrainConfig) -> Decoder:
    """Materialize one of the three decoder variants over the pruned plan.

    D1 returns the optimization result as-is, D2 replaces all weights by
    one, D3 unties the CN weights per edge (initialized from the tied
    values) and runs one extra training pass.
    """
    if kind == "D1":
        return Decoder(plan, weights.copy(), "exact")
    if kind == "D2":
        return Decoder(plan, WeightSet.unit(), "exact")
    if kind == "D3":
        untied = untie_cn_weights(plan, weights)
        rng = np.random.default_rng(
            np.random.SeedSequence(entropy=tcfg.seed, spawn_key=(99991,)))
        untied, _ = train_until_plateau(code, plan, untied, "exact", tcfg,
                                        rng=rng)
        return Decoder(plan, untied, "exact")
    raise ValueError(f"unknown decoder kind {kind!r}")


def write_history_csv(history, path) -> None:
    import csv

    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "remaining_cn", "loss", "bler_probe"])
        for rec in history:
            w.writerow([rec.step, rec.remaining_cn,
                        f"{rec.loss_after_retrain:.10g}",
                        "" if rec.bler_probe is None else f"{rec.bler_probe:.10g}"])
