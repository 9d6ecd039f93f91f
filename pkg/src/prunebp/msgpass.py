"""Message passing over the unrolled Tanner graph.

Scalar node-update rules (the contract every decoder variant follows) plus
the iteration plan / weight containers and the batched ``decode`` entry
point. The vectorized engine lives in ``_unrolled``.

Conventions used throughout: sign(0) := +1, a posteriori LLR ties decide
bit 0, and all messages are clipped to +-M_CLIP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .codes import ParityCheckMatrix
from .quant import QuantizationPlan

M_CLIP = 18.0

VARIANTS = ("exact", "minsum", "oms", "noms")


# ---------------------------------------------------------------------------
# Scalar update rules
# ---------------------------------------------------------------------------

def vn_update(mu_ch: float, incoming, w_ch: float = 1.0, w_vc: float = 1.0) -> float:
    """Weighted variable-node update (reduces to plain BP at unit weights)."""
    s = 0.0
    for m in incoming:
        s += m
    return w_vc * (w_ch * mu_ch + s)


def cn_update_exact(incoming, w_c: float = 1.0, m_clip: float = M_CLIP) -> float:
    """Weighted tanh-product check-node update, log-magnitude form.

    Accumulates sum(log tanh(|mu|/2)) with separate sign tracking so long
    products cannot underflow. The atanh result is clamped to the minimum
    incoming magnitude (always a no-op in exact arithmetic, it removes the
    rounding overshoot of atanh near saturation so the min-sum rule
    dominates this one exactly); the output magnitude is clipped to m_clip.
    """
    if len(incoming) == 0:
        raise ValueError("check-node update needs at least one incoming message")
    sign = 1.0
    logmag = 0.0
    zero = False
    min_mag = math.inf
    for m in incoming:
        m = min(max(m, -m_clip), m_clip)
        if m < 0:
            sign = -sign
        a = abs(m)
        min_mag = min(min_mag, a)
        t = math.tanh(0.5 * a)
        if t == 0.0:
            zero = True
        else:
            logmag += math.log(t)
    if zero:
        return 0.0 * w_c
    mag = math.exp(logmag)
    raw = 2.0 * math.atanh(min(mag, math.tanh(0.5 * m_clip)) * sign)
    raw = min(max(raw, -min_mag), min_mag)
    out = w_c * raw
    return min(max(out, -m_clip), m_clip)


def _min_and_signprod(incoming):
    best = math.inf
    sign = 1.0
    for m in incoming:
        a = abs(m)
        if a < best:
            best = a
        if m < 0:
            sign = -sign
    return best, sign


def cn_update_minsum(incoming) -> float:
    """Min-sum approximation: min magnitude times the sign product."""
    if len(incoming) == 0:
        raise ValueError("check-node update needs at least one incoming message")
    best, sign = _min_and_signprod(incoming)
    return sign * best


def cn_update_oms(incoming, beta_c: float) -> float:
    """Offset min-sum: the min magnitude is reduced by a per-CN offset."""
    if len(incoming) == 0:
        raise ValueError("check-node update needs at least one incoming message")
    best, sign = _min_and_signprod(incoming)
    return sign * max(best - beta_c, 0.0)


def cn_update_noms(incoming, beta_edge: float) -> float:
    """Neural offset min-sum: same rule with the outgoing edge's own offset."""
    return cn_update_oms(incoming, beta_edge)


def marginalize(mu_ch: float, incoming_all, w_ch: float = 1.0) -> float:
    """A posteriori LLR: weighted channel term plus all CN messages."""
    s = 0.0
    for m in incoming_all:
        s += m
    return w_ch * mu_ch + s


def hard_decision(llr) -> np.ndarray:
    """1 where the LLR is negative; ties (exact zero) decide 0."""
    return (np.asarray(llr) < 0).astype(np.uint8)


# ---------------------------------------------------------------------------
# Iteration plan
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class IterationPlan:
    """Per-iteration parity-check structure of the unrolled graph.

    All iterations draw their rows from one shared base matrix; pruning is
    an ``active`` mask per (iteration, check node). A masked CN is never
    evaluated and contributes nothing anywhere.
    """

    base: ParityCheckMatrix
    active: np.ndarray  # bool, (l_max, m)

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.active, dtype=bool))
        if a.ndim != 2 or a.shape[1] != self.base.m:
            raise ValueError("active mask must be (l_max, m)")
        if a.shape[0] < 1:
            raise ValueError("need at least one iteration")
        if not a[0].any():
            raise ValueError("iteration 1 must keep at least one active CN")
        a.setflags(write=False)
        object.__setattr__(self, "active", a)

    @classmethod
    def full(cls, base: ParityCheckMatrix, l_max: int) -> "IterationPlan":
        return cls(base=base, active=np.ones((l_max, base.m), dtype=bool))

    @property
    def l_max(self) -> int:
        return self.active.shape[0]

    @property
    def n_cols(self) -> int:
        return self.base.n_cols

    @property
    def matrices(self) -> tuple[ParityCheckMatrix, ...]:
        """Materialized per-iteration matrices (active rows only)."""
        out = []
        for l in range(self.l_max):
            rows = tuple(self.base.rows[c] for c in np.nonzero(self.active[l])[0])
            out.append(ParityCheckMatrix(self.base.n_cols, rows, overcomplete=True))
        return tuple(out)

    def active_counts(self) -> np.ndarray:
        return self.active.sum(axis=1)

    def edge_counts(self) -> np.ndarray:
        """Active edges per iteration."""
        w = np.asarray(self.base.row_weights, dtype=np.int64)
        return np.array([int(w[self.active[l]].sum()) for l in range(self.l_max)])

    @property
    def cn_evals(self) -> int:
        """CN evaluations of one decode: total active CNs over all layers."""
        return int(self.active.sum())

    def with_pruned(self, victims) -> "IterationPlan":
        """New plan with (iteration, cn) pairs masked off."""
        a = self.active.copy()
        for l, c in victims:
            if not a[l, c]:
                raise ValueError(f"CN (iteration {l}, cn {c}) is already pruned")
            a[l, c] = False
        return IterationPlan(base=self.base, active=a)


# ---------------------------------------------------------------------------
# Trainable weights
# ---------------------------------------------------------------------------

@dataclass
class WeightSet:
    """All trainable scalars of one unrolled decoder.

    Optional parts; ``None`` means the neutral element (weights one,
    offsets zero). ``w_ch`` has l_max + 1 rows: row l feeds VN layer l and
    the marginalization after CN layer l-1, the extra final row serves
    only the last marginalization. Edge-indexed arrays are compact: they
    enumerate the active edges of their iteration in (cn, slot) order.
    """

    cn_mode: str = "unit"  # 'tied' | 'untied' | 'unit'
    w_ch: np.ndarray | None = None          # (l_max + 1, n)
    w_vc: list[np.ndarray] | None = None    # per layer (E_l,)
    w_cn: list[np.ndarray] | None = None    # per layer (m_l,) tied / (E_l,) untied
    offsets: list[np.ndarray] | None = None  # per layer (E_l,) edge / (m_l,) cn
    offset_mode: str | None = None           # 'edge' | 'cn' | None

    def __post_init__(self):
        if self.cn_mode not in ("tied", "untied", "unit"):
            raise ValueError(f"unknown cn_mode {self.cn_mode!r}")
        if (self.cn_mode == "unit") != (self.w_cn is None):
            raise ValueError("w_cn must be stored iff cn_mode is not 'unit'")
        if (self.offsets is None) != (self.offset_mode is None):
            raise ValueError("offsets and offset_mode go together")
        if self.offset_mode not in (None, "edge", "cn"):
            raise ValueError(f"unknown offset_mode {self.offset_mode!r}")

    # -- constructors -----------------------------------------------------
    @classmethod
    def unit(cls) -> "WeightSet":
        return cls()

    @classmethod
    def nbp_tied(cls, plan: IterationPlan) -> "WeightSet":
        """All-ones NBP weights with one shared weight per CN (pruning mode)."""
        n, L = plan.n_cols, plan.l_max
        ec, cc = plan.edge_counts(), plan.active_counts()
        return cls(
            cn_mode="tied",
            w_ch=np.ones((L + 1, n)),
            w_vc=[np.ones(int(ec[l])) for l in range(L)],
            w_cn=[np.ones(int(cc[l])) for l in range(L)],
        )

    @classmethod
    def nbp_untied(cls, plan: IterationPlan) -> "WeightSet":
        n, L = plan.n_cols, plan.l_max
        ec = plan.edge_counts()
        return cls(
            cn_mode="untied",
            w_ch=np.ones((L + 1, n)),
            w_vc=[np.ones(int(ec[l])) for l in range(L)],
            w_cn=[np.ones(int(ec[l])) for l in range(L)],
        )

    @classmethod
    def noms(cls, plan: IterationPlan) -> "WeightSet":
        """NOMS weights: VN-side weights one, per-edge offsets zero."""
        n, L = plan.n_cols, plan.l_max
        ec = plan.edge_counts()
        return cls(
            cn_mode="unit",
            w_ch=np.ones((L + 1, n)),
            w_vc=[np.ones(int(ec[l])) for l in range(L)],
            offsets=[np.zeros(int(ec[l])) for l in range(L)],
            offset_mode="edge",
        )

    @classmethod
    def oms(cls, plan: IterationPlan) -> "WeightSet":
        cc = plan.active_counts()
        return cls(
            cn_mode="unit",
            offsets=[np.zeros(int(cc[l])) for l in range(plan.l_max)],
            offset_mode="cn",
        )

    # -- bookkeeping ------------------------------------------------------
    def validate(self, plan: IterationPlan) -> None:
        """Check that every index set matches the plan's active structure."""
        L, n = plan.l_max, plan.n_cols
        ec, cc = plan.edge_counts(), plan.active_counts()
        if self.w_ch is not None and self.w_ch.shape != (L + 1, n):
            raise ValueError(f"w_ch shape {self.w_ch.shape} != {(L + 1, n)}")
        for name, group, sizes in (
            ("w_vc", self.w_vc, ec),
            ("w_cn", self.w_cn, ec if self.cn_mode == "untied" else cc),
            ("offsets", self.offsets,
             ec if self.offset_mode == "edge" else cc),
        ):
            if group is None:
                continue
            if len(group) != L:
                raise ValueError(f"{name}: expected {L} per-layer arrays")
            for l in range(L):
                if group[l].shape != (int(sizes[l]),):
                    raise ValueError(
                        f"{name}[{l}] has shape {group[l].shape}, "
                        f"expected ({int(sizes[l])},)"
                    )

    def copy(self) -> "WeightSet":
        cp = lambda g: None if g is None else [a.copy() for a in g]
        return WeightSet(
            cn_mode=self.cn_mode,
            w_ch=None if self.w_ch is None else self.w_ch.copy(),
            w_vc=cp(self.w_vc),
            w_cn=cp(self.w_cn),
            offsets=cp(self.offsets),
            offset_mode=self.offset_mode,
        )

    def param_items(self):
        """Iterate (key, array) over every stored trainable array."""
        if self.w_ch is not None:
            yield ("w_ch",), self.w_ch
        for name, group in (("w_vc", self.w_vc), ("w_cn", self.w_cn),
                            ("offsets", self.offsets)):
            if group is not None:
                for l, arr in enumerate(group):
                    yield (name, l), arr

    def n_parameters(self) -> int:
        return sum(int(a.size) for _, a in self.param_items())


# ---------------------------------------------------------------------------
# Decode
# ---------------------------------------------------------------------------

@dataclass
class DecodeTrace:
    """Per-layer soft outputs of one decode call.

    ``o`` is the sigmoid-mapped probability that each bit is one,
    o = sigma(-mu_post); ``hard`` is taken from the final layer.
    """

    mu_post: np.ndarray  # (l_max, n) or (l_max, n, batch)
    o: np.ndarray
    hard: np.ndarray     # (n,) or (n, batch) uint8
    cn_evals: int


@dataclass
class Decoder:
    """A decode-ready bundle: plan + weights + CN-update variant.

    ``quant`` optionally routes the channel, inter-layer messages, weights
    and offsets through per-layer quantizers.
    """

    plan: IterationPlan
    weights: WeightSet
    variant: str = "exact"
    quant: QuantizationPlan | None = None
    m_clip: float = M_CLIP
    dtype: str = "float64"  # runtime working precision, not serialized

    _engine: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.weights.validate(self.plan)
        if self.variant in ("minsum", "oms", "noms") and self.weights.w_cn is not None:
            raise ValueError("multiplicative CN weights apply to the exact variant only")
        if self.variant == "oms" and (self.weights.offset_mode or "cn") != "cn":
            raise ValueError("oms needs per-CN offsets")
        if self.variant == "noms" and (self.weights.offset_mode or "edge") != "edge":
            raise ValueError("noms needs per-edge offsets")
        if self.quant is not None and self.quant.l_max != self.plan.l_max:
            raise ValueError("quantization plan layer count mismatch")

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_engine"] = None  # compiled structure is rebuilt on demand
        return state

    def engine(self):
        from ._unrolled import UnrolledEngine
        if self._engine is None or self._engine.plan is not self.plan:
            object.__setattr__(self, "_engine", UnrolledEngine(self.plan))
        return self._engine

    def decode(self, mu_ch, early_stop_h: ParityCheckMatrix | None = None) -> DecodeTrace:
        return decode(self.plan, self.weights, self.variant, mu_ch,
                      quant=self.quant, m_clip=self.m_clip,
                      early_stop_h=early_stop_h, dtype=self.dtype,
                      _engine=self.engine())

    def decode_bits(self, mu_ch) -> np.ndarray:
        return self.decode(mu_ch).hard


def decode(plan: IterationPlan, weights: WeightSet, variant: str, mu_ch,
           quant: QuantizationPlan | None = None, m_clip: float = M_CLIP,
           early_stop_h: ParityCheckMatrix | None = None,
           dtype="float64", _engine=None) -> DecodeTrace:
    """Run the unrolled decoder on a channel-LLR vector or batch.

    ``mu_ch`` is (n,) or (n, batch). The flooding schedule per layer is:
    VN update, optional VN-message quantizer, CN update per ``variant``,
    optional CN-message quantizer, marginalization. The trace records the
    soft output of every layer; ``cn_evals`` counts the active CNs over
    all layers and does not depend on the inputs (early stopping, when a
    syndrome matrix is supplied, only freezes each block's hard decision
    at its first syndrome-satisfying layer).
    """
    from ._unrolled import UnrolledEngine

    mu = np.asarray(mu_ch, dtype=np.float64)
    single = mu.ndim == 1
    if single:
        mu = mu[:, None]
    if mu.shape[0] != plan.n_cols:
        raise ValueError(f"mu_ch has {mu.shape[0]} entries, expected {plan.n_cols}")
    engine = _engine if _engine is not None else UnrolledEngine(plan)
    weights.validate(plan)
    mu_post = engine.forward(weights, variant, mu, quant=quant, m_clip=m_clip,
                             dtype=np.dtype(dtype))
    from scipy.special import expit
    o = expit(-mu_post)
    hard = hard_decision(mu_post[-1])
    if early_stop_h is not None:
        hard = _early_stop_decisions(mu_post, early_stop_h)
    if single:
        mu_post, o, hard = mu_post[..., 0], o[..., 0], hard[..., 0]
    return DecodeTrace(mu_post=mu_post, o=o, hard=hard, cn_evals=plan.cn_evals)


def _early_stop_decisions(mu_post: np.ndarray, h: ParityCheckMatrix) -> np.ndarray:
    """Hard decision per block from its first syndrome-satisfying layer."""
    hd = h.to_dense().astype(np.int64)
    L, n, B = mu_post.shape
    hards = (mu_post < 0).astype(np.uint8)
    out = hards[-1].copy()
    done = np.zeros(B, dtype=bool)
    for l in range(L):
        syn = (hd @ hards[l].astype(np.int64)) % 2
        pick = (syn.sum(axis=0) == 0) & ~done
        out[:, pick] = hards[l][:, pick]
        done |= pick
    return out
