"""Model files: JSON serialization of decode-ready decoder bundles.

A model file is one JSON document holding the per-iteration parity-check
structure (base rows plus active-row lists), the weight arrays with their
mode tags, the optional quantization plan, and training provenance. Plain
JSON floats round-trip float64 exactly (shortest-repr printing), so a
loaded decoder is bit-identical to the saved one.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

from .codes import LinearCode, ParityCheckMatrix
from .msgpass import Decoder, IterationPlan, WeightSet
from .quant import QuantizationPlan, QuantizerSpec

FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    pass


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _arr(a):
    return None if a is None else np.asarray(a, dtype=np.float64).tolist()


def _group(g):
    return None if g is None else [_arr(a) for a in g]


def _weights_doc(w: WeightSet) -> dict:
    return {
        "cn_mode": w.cn_mode,
        "offset_mode": w.offset_mode,
        "w_ch": _arr(w.w_ch),
        "w_vc": _group(w.w_vc),
        "w_cn": _group(w.w_cn),
        "offsets": _group(w.offsets),
    }


def _weights_from_doc(doc: dict) -> WeightSet:
    def arr(x):
        return None if x is None else np.asarray(x, dtype=np.float64)

    def group(x):
        return None if x is None else [np.asarray(a, dtype=np.float64) for a in x]

    return WeightSet(cn_mode=doc["cn_mode"], w_ch=arr(doc["w_ch"]),
                     w_vc=group(doc["w_vc"]), w_cn=group(doc["w_cn"]),
                     offsets=group(doc["offsets"]),
                     offset_mode=doc["offset_mode"])


def _quant_doc(q: QuantizationPlan | None) -> dict | None:
    if q is None:
        return None
    return {
        "q_ch": q.q_ch, "q_m": q.q_m, "q_w": q.q_w,
        "families": {name: [{"levels": s.levels.tolist(),
                             "trainable": s.trainable} for s in group]
                     for name, group in q.families()},
    }


def _quant_from_doc(doc: dict | None) -> QuantizationPlan | None:
    if doc is None:
        return None
    fams = {}
    widths = {"ch": doc["q_ch"], "vc": doc["q_m"], "cv": doc["q_m"],
              "w": doc["q_w"], "beta": doc["q_w"]}
    for name, group in doc["families"].items():
        fams[name] = [QuantizerSpec(widths[name],
                                    np.asarray(s["levels"], dtype=np.float64),
                                    trainable=bool(s["trainable"]))
                      for s in group]
    return QuantizationPlan(doc["q_ch"], doc["q_m"], doc["q_w"],
                            ch=fams["ch"], vc=fams["vc"], cv=fams["cv"],
                            w=fams["w"], beta=fams["beta"])


def save_model(path, decoder: Decoder, code: LinearCode,
               code_spec: str = "", provenance: dict | None = None) -> None:
    plan = decoder.plan
    doc = {
        "format_version": FORMAT_VERSION,
        "code": {"spec": code_spec, "name": code.name, "n": code.n,
                 "k": code.k},
        "variant": decoder.variant,
        "m_clip": decoder.m_clip,
        "plan": {
            "n_cols": plan.n_cols,
            "base_rows": [list(r) for r in plan.base.rows],
            "active_rows": [np.nonzero(plan.active[l])[0].tolist()
                            for l in range(plan.l_max)],
        },
        "weights": _weights_doc(decoder.weights),
        "quant": _quant_doc(decoder.quant),
        "provenance": provenance or {},
    }
    with open(path, "w") as f:
        json.dump(doc, f)


def load_model(path) -> tuple[Decoder, dict]:
    """Load a model file; returns (decoder, metadata dict)."""
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {doc.get('format_version')}")
    p = doc["plan"]
    base = ParityCheckMatrix(n_cols=int(p["n_cols"]),
                             rows=tuple(tuple(r) for r in p["base_rows"]),
                             overcomplete=True)
    active = np.zeros((len(p["active_rows"]), base.m), dtype=bool)
    for l, rows in enumerate(p["active_rows"]):
        active[l, list(map(int, rows))] = True
    plan = IterationPlan(base=base, active=active)
    weights = _weights_from_doc(doc["weights"])
    quant = _quant_from_doc(doc.get("quant"))
    decoder = Decoder(plan=plan, weights=weights, variant=doc["variant"],
                      quant=quant, m_clip=float(doc["m_clip"]))
    meta = {"code": doc["code"], "provenance": doc.get("provenance", {})}
    return decoder, meta


def check_code_match(meta: dict, code: LinearCode) -> None:
    info = meta["code"]
    if info["n"] != code.n or info["k"] != code.k:
        raise ModelFormatError(
            f"model was built for an [{info['n']}, {info['k']}] code, "
            f"got [{code.n}, {code.k}]")
