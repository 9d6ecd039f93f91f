"""Command-line pipeline: checks, train, prune, quantize, eval.

One binary with subcommands. Run configs are declarative JSON documents,
schema-validated before any work starts (unknown keys are rejected).
Every command resolves its defaults and writes the effective config next
to its outputs. Exit codes: 0 success, 2 usage or config error,
3 numerical failure (partial artifacts keep a .partial suffix).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import codes, model_io, pruning, quant, simulation, training
from .msgpass import Decoder, IterationPlan, WeightSet

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["code"],
    "properties": {
        "code": {"type": "string"},
        "l_max": {"type": "integer", "minimum": 1},
        "variant": {"enum": ["nbp-tied", "nbp-untied", "noms", "oms"]},
        "checks": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["std", "min_weight", "sample",
                                  "subsample", "alist"]},
                "max_weight": {"type": "integer", "minimum": 1},
                "count": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
                "path": {"type": "string"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                f.name: {} for f in dataclasses.fields(training.TrainConfig)
            },
        },
        "prune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                f.name: {} for f in dataclasses.fields(pruning.PruneConfig)
                if f.name != "l_max"
            },
        },
        "finalize": {"type": "array",
                     "items": {"enum": ["D1", "D2", "D3"]}},
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "ebn0_db": {"type": "array", "items": {"type": "number"}},
                "min_block_errors": {"type": "integer", "minimum": 1},
                "max_blocks": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "quant": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "q_ch": {"type": "integer", "minimum": 2},
                "q_m": {"type": "integer", "minimum": 2},
                "q_w": {"type": "integer", "minimum": 2},
                "mode": {"enum": ["joint", "qat", "post-uniform",
                                  "post-lloyd"]},
                "msg_clip": {"type": "number"},
                "calib_blocks": {"type": "integer", "minimum": 1},
                "calib_seed": {"type": "integer"},
            },
        },
        "out_dir": {"type": "string"},
    },
}


class UsageError(ValueError):
    pass


def parse_code(spec: str) -> codes.LinearCode:
    """Code specs: rm(r,m), ldpc128, or json:path/to/descriptor.json."""
    s = spec.strip().lower()
    if s.startswith("rm(") and s.endswith(")"):
        try:
            r, m = (int(t) for t in s[3:-1].split(","))
        except ValueError:
            raise UsageError(f"bad rm spec {spec!r}, expected rm(r,m)")
        return codes.rm_code(r, m)
    if s == "ldpc128":
        return codes.ldpc_128_64()
    if s.startswith("json:"):
        return codes.load_code_json(spec[5:])
    raise UsageError(f"unknown code spec {spec!r} "
                     "(use rm(r,m), ldpc128 or json:path)")


def build_checks(code: codes.LinearCode, spec: dict) -> codes.ParityCheckMatrix:
    kind = spec.get("kind", "min_weight")
    if kind == "std":
        return code.h_std
    if kind == "min_weight":
        return codes.min_weight_dual_checks(code)
    if kind == "sample":
        return codes.sample_overcomplete(code, spec["max_weight"],
                                         spec["count"], spec.get("seed", 0))
    if kind == "subsample":
        full = codes.min_weight_dual_checks(code)
        return codes.subsample_checks(full, spec["count"], spec.get("seed", 0))
    if kind == "alist":
        return codes.read_alist(spec["path"], overcomplete=True)
    raise UsageError(f"unknown checks kind {kind!r}")


def load_run_config(path: str) -> dict:
    import jsonschema

    with open(path) as f:
        cfg = json.load(f)
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        raise UsageError(f"config {path}: {e.message}") from None
    return cfg


def effective_config(cfg: dict, extra: dict | None = None) -> dict:
    out = {
        "code": cfg["code"],
        "l_max": cfg.get("l_max", 6),
        "variant": cfg.get("variant", "nbp-tied"),
        "checks": {"kind": "min_weight", **cfg.get("checks", {})},
        "train": dataclasses.asdict(make_train_config(cfg)),
        "prune": dataclasses.asdict(make_prune_config(cfg)),
        "finalize": cfg.get("finalize", ["D1"]),
        "eval": {"ebn0_db": [4.0], "min_block_errors": 100,
                 "max_blocks": 10_000_000, "seed": 0, **cfg.get("eval", {})},
        "quant": {"q_ch": 3, "q_m": 3, "q_w": 3, "mode": "joint",
                  "msg_clip": 8.0, "calib_blocks": 512, "calib_seed": 77,
                  **cfg.get("quant", {})},
        "out_dir": cfg.get("out_dir", "."),
    }
    if extra:
        out.update(extra)
    return out


def make_train_config(cfg: dict) -> training.TrainConfig:
    return training.TrainConfig(**cfg.get("train", {}))


def make_prune_config(cfg: dict) -> pruning.PruneConfig:
    d = dict(cfg.get("prune", {}))
    d["l_max"] = cfg.get("l_max", 6)
    if "group_schedule" in d and d["group_schedule"] is not None:
        d["group_schedule"] = tuple(tuple(e) for e in d["group_schedule"])
    return pruning.PruneConfig(**d)


def _emit_config(out_dir: str, name: str, doc: dict) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, name), "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def _fresh_weights(variant: str, plan: IterationPlan) -> WeightSet:
    if variant == "nbp-tied":
        return WeightSet.nbp_tied(plan)
    if variant == "nbp-untied":
        return WeightSet.nbp_untied(plan)
    if variant == "noms":
        return WeightSet.noms(plan)
    if variant == "oms":
        return WeightSet.oms(plan)
    raise UsageError(f"unknown variant {variant!r}")


def _decode_variant(variant: str) -> str:
    return {"nbp-tied": "exact", "nbp-untied": "exact",
            "noms": "noms", "oms": "oms"}[variant]


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_checks(args) -> int:
    code = _code_from_tokens(args.codespec)
    if args.all_min_weight:
        h = codes.min_weight_dual_checks(code)
    elif args.sample:
        w, count, seed = args.sample
        h = codes.sample_overcomplete(code, int(w), int(count), int(seed))
    elif args.subsample:
        count, seed = args.subsample
        base = (codes.read_alist(args.from_file, overcomplete=True)
                if args.from_file else codes.min_weight_dual_checks(code))
        h = codes.subsample_checks(base, int(count), int(seed))
    else:
        h = code.h_std
    codes.write_alist(h, args.output)
    _emit_config(os.path.dirname(args.output) or ".",
                 os.path.basename(args.output) + ".config.json",
                 {"code": code.name, "rows": h.m, "n": h.n_cols})
    print(f"wrote {h.m} x {h.n_cols} parity-check matrix to {args.output}")
    return 0


def _code_from_tokens(tokens) -> codes.LinearCode:
    if not tokens:
        raise UsageError("missing code spec")
    if tokens[0] == "rm":
        if len(tokens) != 3:
            raise UsageError("usage: checks rm R M")
        return codes.rm_code(int(tokens[1]), int(tokens[2]))
    if tokens[0] in ("ldpc128", "ldpc_128_64"):
        return codes.ldpc_128_64()
    if tokens[0] == "json":
        return codes.load_code_json(tokens[1])
    return parse_code(tokens[0])


def cmd_prune(args) -> int:
    cfg = load_run_config(args.config)
    eff = effective_config(cfg)
    out_dir = args.out_dir or eff["out_dir"]
    code = parse_code(eff["code"])
    h_oc = build_checks(code, eff["checks"])
    tcfg = make_train_config(cfg)
    pcfg = make_prune_config(cfg)
    eff["provenance_hash"] = model_io.config_hash(eff)
    _emit_config(out_dir, "prune.config.json", eff)

    try:
        plan, weights, history = pruning.prune_loop(code, h_oc, pcfg, tcfg)
    except (RuntimeError, training.NonFiniteGradientError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    diverged = history and not np.isfinite(history[-1].loss_after_retrain)
    suffix = ".partial" if diverged else ""
    pruning.write_history_csv(history,
                              os.path.join(out_dir, f"history.csv{suffix}"))
    prov = {"config_hash": eff["provenance_hash"], "seed": tcfg.seed,
            "loss_history_digest": model_io.config_hash(
                [r.loss_after_retrain for r in history])}
    report = {"cn_count": pruning.complexity(plan, degree_normalized=True),
              "complexity": pruning.complexity(plan),
              "parameters": {}}
    for kind in eff["finalize"]:
        dec = pruning.finalize_decoder(code, plan, weights, kind, tcfg)
        mpath = os.path.join(out_dir, f"model_{kind}.json{suffix}")
        model_io.save_model(mpath, dec, code, code_spec=eff["code"],
                            provenance=prov)
        report["parameters"][kind] = pruning.count_parameters(dec.weights)
        print(f"wrote {mpath}")
    with open(os.path.join(out_dir, f"complexity.json{suffix}"), "w") as f:
        json.dump(report, f, indent=1)
    if diverged:
        print("training diverged; artifacts carry .partial", file=sys.stderr)
        return 3
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    eff = effective_config(cfg)
    out_dir = args.out_dir or eff["out_dir"]
    code = parse_code(eff["code"])
    tcfg = make_train_config(cfg)
    variant = eff["variant"]
    if args.init_model:
        init, meta = model_io.load_model(args.init_model)
        model_io.check_code_match(meta, code)
        plan = init.plan
    else:
        h = build_checks(code, eff["checks"])
        plan = IterationPlan.full(h, eff["l_max"])
    weights = _fresh_weights(variant, plan)
    _emit_config(out_dir, "train.config.json", eff)
    try:
        weights, history = training.train_until_plateau(
            code, plan, weights, _decode_variant(variant), tcfg)
    except training.NonFiniteGradientError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    training.write_loss_history_csv(history,
                                    os.path.join(out_dir, "loss_history.csv"))
    dec = Decoder(plan, weights, _decode_variant(variant))
    prov = {"config_hash": model_io.config_hash(eff), "seed": tcfg.seed,
            "loss_history_digest": model_io.config_hash(
                [h[1] for h in history])}
    mpath = args.output or os.path.join(out_dir, "model.json")
    model_io.save_model(mpath, dec, code, code_spec=eff["code"],
                        provenance=prov)
    print(f"wrote {mpath}")
    return 0


def cmd_quantize(args) -> int:
    decoder, meta = model_io.load_model(args.model)
    if decoder.quant is not None:
        raise UsageError("input model is already quantized")
    code = parse_code(meta["code"]["spec"] or args.code)
    model_io.check_code_match(meta, code)
    if min(args.q_ch, args.q_m, args.q_w) < 2:
        raise UsageError("bit-widths below 2 are not supported")
    cfg = load_run_config(args.config) if args.config else {"code": meta["code"]["spec"]}
    eff = effective_config(cfg, extra={"quant": {
        "q_ch": args.q_ch, "q_m": args.q_m, "q_w": args.q_w,
        "mode": args.mode, "msg_clip": args.msg_clip,
        "calib_blocks": args.calib_blocks, "calib_seed": args.calib_seed}})
    tcfg = make_train_config(cfg)

    def calibration_mu():
        rng = np.random.default_rng(args.calib_seed)
        ch = simulation.ChannelConfig(ebn0_db=tcfg.train_ebn0_db,
                                      rate=code.rate)
        info = rng.integers(0, 2, size=(args.calib_blocks, code.k),
                            dtype=np.uint8)
        tx = code.encode(info).T
        return simulation.awgn_llr(tx, ch, rng)

    if args.mode == "post-uniform":
        qdec = quant.baseline_post_training(decoder, "uniform",
                                            q_ch=args.q_ch, q_m=args.q_m,
                                            q_w=args.q_w,
                                            msg_clip=args.msg_clip)
    elif args.mode == "post-lloyd":
        qdec = quant.baseline_post_training(decoder, "lloyd_max",
                                            calibration_mu=calibration_mu(),
                                            q_ch=args.q_ch, q_m=args.q_m,
                                            q_w=args.q_w,
                                            msg_clip=args.msg_clip)
    else:
        trainable = args.mode == "joint"
        l_max = decoder.plan.l_max
        w_ranges = quant._per_layer_ranges(decoder.weights.w_vc, l_max)
        b_ranges = quant._per_layer_ranges(decoder.weights.offsets, l_max)
        qplan = quant.QuantizationPlan.uniform(
            l_max, args.q_ch, args.q_m, args.q_w, msg_range=args.msg_clip,
            w_ranges=w_ranges, b_ranges=b_ranges, trainable=trainable)
        qdec = quant.attach(qplan, decoder)
        try:
            weights, history = training.train_until_plateau(
                code, qdec.plan, qdec.weights, qdec.variant, tcfg,
                quant=qdec.quant, train_levels=trainable)
        except training.NonFiniteGradientError as e:
            print(f"numerical failure: {e}", file=sys.stderr)
            return 3
        qdec = dataclasses.replace(qdec, weights=weights)
    prov = {"config_hash": model_io.config_hash(eff),
            "seed": tcfg.seed, "mode": args.mode}
    model_io.save_model(args.output, qdec, code,
                        code_spec=meta["code"]["spec"], provenance=prov)
    _emit_config(os.path.dirname(args.output) or ".",
                 os.path.basename(args.output) + ".config.json", eff)
    print(f"wrote {args.output}")
    return 0


def cmd_eval(args) -> int:
    snrs = [float(t) for t in args.snrs.split(",")]
    if args.model:
        decoder, meta = model_io.load_model(args.model)
        code = parse_code(args.code or meta["code"]["spec"])
        model_io.check_code_match(meta, code)
        dec = decoder
    elif args.decoder == "ml":
        if not args.code:
            raise UsageError("--decoder ml needs --code")
        code = parse_code(args.code)
        dec = "ml"
    elif args.decoder == "bp-std":
        if not args.code:
            raise UsageError("--decoder bp-std needs --code")
        code = parse_code(args.code)
        plan = IterationPlan.full(code.h_std, args.l_max)
        dec = Decoder(plan, WeightSet.unit(), "exact")
    else:
        raise UsageError("eval needs --model or --decoder {ml,bp-std}")
    results = simulation.monte_carlo(
        dec, code, snrs, min_block_errors=args.min_errors,
        max_blocks=args.max_blocks, seed=args.seed, workers=args.workers)
    simulation.write_results_csv(results, args.output)
    if args.json_output:
        simulation.write_results_json(results, args.json_output)
    _emit_config(os.path.dirname(args.output) or ".",
                 os.path.basename(args.output) + ".config.json",
                 {"model": args.model, "decoder": args.decoder,
                  "code": args.code, "snrs": snrs,
                  "min_block_errors": args.min_errors,
                  "max_blocks": args.max_blocks, "seed": args.seed,
                  "workers": args.workers})
    for r in results:
        print(f"Eb/N0 {r.ebn0_db:5.2f} dB  BLER {r.bler:.4g}  "
              f"BER {r.ber:.4g}  ({r.block_errors}/{r.blocks})")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="prunebp",
        description="Check-node pruning and quantization for neural BP "
                    "decoders")
    sub = ap.add_subparsers(dest="command", required=True)

    c = sub.add_parser("checks", help="write a parity-check matrix as alist")
    c.add_argument("codespec", nargs="+",
                   help="rm R M | ldpc128 | json PATH | rm(r,m)")
    c.add_argument("--all-min-weight", action="store_true")
    c.add_argument("--sample", nargs=3, metavar=("MAX_WEIGHT", "COUNT", "SEED"))
    c.add_argument("--subsample", nargs=2, metavar=("COUNT", "SEED"))
    c.add_argument("--from", dest="from_file",
                   help="subsample from this alist instead of min-weight")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_checks)

    p = sub.add_parser("prune", help="run the prune/retrain pipeline")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_prune)

    t = sub.add_parser("train", help="train decoder weights on a fixed plan")
    t.add_argument("--config", required=True)
    t.add_argument("--init-model", help="take the iteration plan from this model")
    t.add_argument("--out-dir")
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_train)

    q = sub.add_parser("quantize", help="quantize a trained float model")
    q.add_argument("--model", required=True)
    q.add_argument("--mode", required=True,
                   choices=["joint", "qat", "post-uniform", "post-lloyd"])
    q.add_argument("--q-ch", type=int, default=3)
    q.add_argument("--q-m", type=int, default=3)
    q.add_argument("--q-w", type=int, default=3)
    q.add_argument("--msg-clip", type=float, default=8.0)
    q.add_argument("--calib-blocks", type=int, default=512)
    q.add_argument("--calib-seed", type=int, default=77)
    q.add_argument("--config", help="training hyperparameters for joint/qat")
    q.add_argument("--code")
    q.add_argument("-o", "--output", required=True)
    q.set_defaults(func=cmd_quantize)

    e = sub.add_parser("eval", help="Monte-Carlo BLER/BER of a decoder")
    e.add_argument("--model")
    e.add_argument("--decoder", choices=["ml", "bp-std"])
    e.add_argument("--code")
    e.add_argument("--l-max", type=int, default=6)
    e.add_argument("--snrs", required=True, help="comma-separated Eb/N0 dB")
    e.add_argument("--min-errors", type=int, default=100)
    e.add_argument("--max-blocks", type=int, default=10_000_000)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--workers", type=int,
                   default=int(os.environ.get("PRUNEBP_WORKERS", "1")))
    e.add_argument("-o", "--output", required=True)
    e.add_argument("--json", dest="json_output")
    e.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (UsageError, ValueError, KeyError, FileNotFoundError,
            codes.AlistFormatError, codes.SamplingShortfallError,
            model_io.ModelFormatError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (training.NonFiniteGradientError, FloatingPointError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
