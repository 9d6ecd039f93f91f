"""Symmetric mid-tread quantizers with trainable levels.

A quantizer with bit-width n_q has 2^(n_q-1) stored level magnitudes
q_0 = 0 < q_1 < ... < q_max and maps x to sign(x) * q_j where j is picked
by the thresholds t_i = (q_{i-1} + q_i) / 2. Thresholds are always derived
from the levels, never stored. Gradients follow the straight-through
estimator: dQ/dx = 1 everywhere, and each input contributes a +-1 gradient
to exactly one level (none inside the dead zone).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np

logger = logging.getLogger(__name__)

MIN_LEVEL_SEP = 1e-6


@dataclass
class QuantizerSpec:
    """Level set of one symmetric mid-tread quantizer.

    ``levels`` holds [q_0=0, q_1, ..., q_max], strictly increasing.
    """

    n_q: int
    levels: np.ndarray
    trainable: bool = False

    def __post_init__(self):
        if self.n_q < 2:
            raise ValueError("bit-width must be >= 2")
        lv = np.asarray(self.levels, dtype=np.float64).copy()
        if lv.ndim != 1 or not (2 <= lv.shape[0] <= 2 ** (self.n_q - 1)):
            raise ValueError(
                f"expected 2..{2 ** (self.n_q - 1)} levels for "
                f"n_q={self.n_q}, got {lv.shape}"
            )
        if lv[0] != 0.0:
            raise ValueError("q_0 must be 0")
        if np.any(np.diff(lv) <= 0):
            raise ValueError("levels must be strictly increasing")
        self.levels = lv

    @property
    def n_levels(self) -> int:
        """Count of distinct output values, 2^n_q - 1."""
        return 2 * (self.levels.shape[0] - 1) + 1

    @property
    def thresholds(self) -> np.ndarray:
        """t_i = (q_{i-1} + q_i) / 2, recomputed from the levels."""
        return 0.5 * (self.levels[:-1] + self.levels[1:])

    @property
    def q_max(self) -> float:
        return float(self.levels[-1])

    def copy(self) -> "QuantizerSpec":
        return QuantizerSpec(self.n_q, self.levels.copy(), self.trainable)

    @classmethod
    def uniform(cls, n_q: int, upper: float, trainable: bool = False) -> "QuantizerSpec":
        """Levels evenly spaced over [0, upper]."""
        k = 2 ** (n_q - 1) - 1
        if upper <= 0:
            upper = 1.0
        return cls(n_q, np.linspace(0.0, upper, k + 1), trainable)


def bucket_indices(spec: QuantizerSpec, x: np.ndarray) -> np.ndarray:
    """Level index j with Q(x) = sign(x) * q_j; j = 0 is the dead zone."""
    return np.searchsorted(spec.thresholds, np.abs(x), side="right")


def quantize(spec: QuantizerSpec, x):
    """Apply the quantizer elementwise; scalars in, scalar out."""
    xv = np.asarray(x, dtype=np.float64)
    j = bucket_indices(spec, xv)
    out = np.where(xv < 0, -1.0, 1.0) * spec.levels[j]
    return float(out) if np.isscalar(x) or xv.ndim == 0 else out


def ste_grad_input(spec: QuantizerSpec, x):
    """Straight-through gradient of Q with respect to its input: 1."""
    xv = np.asarray(x, dtype=np.float64)
    out = np.ones_like(xv)
    return float(out) if np.isscalar(x) or xv.ndim == 0 else out


def grad_levels(spec: QuantizerSpec, x: float) -> np.ndarray:
    """Gradient of Q(x) with respect to (q_1, ..., q_max).

    One-hot: sign(x) at the level that x maps to, all zeros inside the
    dead zone.
    """
    k = spec.levels.shape[0] - 1
    g = np.zeros(k)
    j = int(bucket_indices(spec, np.asarray(x, dtype=np.float64)))
    if j >= 1:
        g[j - 1] = -1.0 if x < 0 else 1.0
    return g


def quantization_mse(spec: QuantizerSpec, samples: np.ndarray) -> float:
    q = quantize(spec, np.asarray(samples, dtype=np.float64))
    return float(np.mean((q - samples) ** 2))


def project_levels(levels: np.ndarray, min_sep: float = MIN_LEVEL_SEP) -> np.ndarray:
    """Restore a valid level set after a gradient step.

    Pins q_0 = 0, sorts the rest, clips at 0 and enforces the minimal
    separation.
    """
    lv = np.asarray(levels, dtype=np.float64).copy()
    rest = np.sort(np.maximum(lv[1:], 0.0))
    prev = 0.0
    for i in range(rest.shape[0]):
        if rest[i] < prev + min_sep:
            rest[i] = prev + min_sep
        prev = rest[i]
    lv[0] = 0.0
    lv[1:] = rest
    return lv


def lloyd_max_fit(samples: np.ndarray, n_q: int, tol: float = 1e-6,
                  max_rounds: int = 100) -> QuantizerSpec:
    """Fit quantizer levels to samples with the Lloyd-Max algorithm.

    Fitting is symmetric: it runs on |samples| with q_0 pinned at zero.
    Alternates centroid updates (level = mean of the samples in its cell)
    and boundary updates (thresholds = level midpoints) until the levels
    move less than ``tol`` or ``max_rounds`` is hit. Empty cells are
    repaired by re-seeding the level at the midpoint of its neighbors.
    """
    a = np.abs(np.asarray(samples, dtype=np.float64))
    k = 2 ** (n_q - 1) - 1
    if a.size < 2 ** n_q:
        raise ValueError(f"need at least {2 ** n_q} samples, got {a.size}")
    amax = float(a.max())
    spec = QuantizerSpec.uniform(n_q, amax if amax > 0 else 1.0)
    levels = spec.levels
    for _ in range(max_rounds):
        j = np.searchsorted(0.5 * (levels[:-1] + levels[1:]), a, side="right")
        new = levels.copy()
        repaired = []
        for i in range(1, k + 1):
            cell = a[j == i]
            if cell.size == 0:
                repaired.append(i)
            else:
                new[i] = cell.mean()
        for i in repaired:
            hi = new[i + 1] if i < k else max(amax, new[i - 1] + 2 * MIN_LEVEL_SEP)
            new[i] = 0.5 * (new[i - 1] + hi)
        if repaired:
            logger.info("lloyd_max_fit: repaired empty cells %s", repaired)
        new = project_levels(new)
        move = float(np.max(np.abs(new - levels)))
        levels = new
        if move < tol:
            break
    return QuantizerSpec(n_q, levels, trainable=False)


# ---------------------------------------------------------------------------
# Per-layer quantizer families for the unrolled decoder
# ---------------------------------------------------------------------------

@dataclass
class QuantizationPlan:
    """Quantizers for every attachment point of an unrolled decoder.

    Five families, each one spec per iteration layer: channel messages,
    VN-to-CN messages, CN-to-VN messages, VN-side weights, and CN offsets.
    Bit-widths are tied across layers within each group (q_ch for the
    channel, q_m for both message directions, q_w for weights and offsets);
    the level values are untied per layer.
    """

    q_ch: int
    q_m: int
    q_w: int
    ch: list[QuantizerSpec]
    vc: list[QuantizerSpec]
    cv: list[QuantizerSpec]
    w: list[QuantizerSpec]
    beta: list[QuantizerSpec]

    def __post_init__(self):
        l_max = len(self.ch)
        for name, group, q in (("vc", self.vc, self.q_m), ("cv", self.cv, self.q_m),
                               ("w", self.w, self.q_w), ("beta", self.beta, self.q_w),
                               ("ch", self.ch, self.q_ch)):
            if len(group) != l_max:
                raise ValueError(f"{name} group must have one spec per layer")
            for spec in group:
                if spec.n_q != q:
                    raise ValueError(
                        f"{name} group bit-width {spec.n_q} != declared {q}"
                    )

    @property
    def l_max(self) -> int:
        return len(self.ch)

    def copy(self) -> "QuantizationPlan":
        return QuantizationPlan(
            self.q_ch, self.q_m, self.q_w,
            [s.copy() for s in self.ch], [s.copy() for s in self.vc],
            [s.copy() for s in self.cv], [s.copy() for s in self.w],
            [s.copy() for s in self.beta],
        )

    def families(self):
        """Iterate (name, per-layer spec list)."""
        return (("ch", self.ch), ("vc", self.vc), ("cv", self.cv),
                ("w", self.w), ("beta", self.beta))

    @classmethod
    def uniform(cls, l_max: int, q_ch: int, q_m: int, q_w: int,
                msg_range: float = 8.0,
                w_ranges=None, b_ranges=None,
                trainable: bool = False) -> "QuantizationPlan":
        """Uniform levels: [0, msg_range] for messages and channel,
        per-layer [0, w_ranges[l]] / [0, b_ranges[l]] for weights/offsets.
        """
        if w_ranges is None:
            w_ranges = [1.0] * l_max
        if b_ranges is None:
            b_ranges = [1.0] * l_max
        mk = QuantizerSpec.uniform
        return cls(
            q_ch, q_m, q_w,
            ch=[mk(q_ch, msg_range, trainable) for _ in range(l_max)],
            vc=[mk(q_m, msg_range, trainable) for _ in range(l_max)],
            cv=[mk(q_m, msg_range, trainable) for _ in range(l_max)],
            w=[mk(q_w, float(w_ranges[i]), trainable) for i in range(l_max)],
            beta=[mk(q_w, float(b_ranges[i]), trainable) for i in range(l_max)],
        )


def attach(qplan: QuantizationPlan, decoder):
    """Return a copy of the decoder with this quantization plan attached.

    Quantizers are inserted on the channel input, after each VN and CN
    layer, and on the VN weights and CN offsets before use; weight storage
    itself stays full precision.
    """
    if qplan.l_max != decoder.plan.l_max:
        raise ValueError("quantization plan layer count does not match decoder")
    return replace(decoder, quant=qplan)


def detach(decoder):
    return replace(decoder, quant=None)


def baseline_post_training(decoder, mode: str, calibration_mu=None,
                           q_ch: int = 3, q_m: int = 3, q_w: int = 3,
                           msg_clip: float = 8.0):
    """Post-training quantization of a trained float decoder.

    ``uniform``: evenly spaced message/channel levels over [0, msg_clip]
    and per-layer weight/offset levels over the range of that layer's
    weights. ``lloyd_max``: levels fitted with Lloyd-Max to the message
    and weight samples from a calibration run (``calibration_mu``, shape
    (n, batch)). No retraining in either mode.
    """
    from . import _unrolled  # deferred: avoids import cycle

    l_max = decoder.plan.l_max
    w_ranges = _per_layer_ranges(decoder.weights.w_vc, l_max)
    b_ranges = _per_layer_ranges(decoder.weights.offsets, l_max)
    if mode == "uniform":
        qplan = QuantizationPlan.uniform(l_max, q_ch, q_m, q_w,
                                         msg_range=msg_clip,
                                         w_ranges=w_ranges, b_ranges=b_ranges)
        return attach(qplan, decoder)
    if mode != "lloyd_max":
        raise ValueError(f"unknown post-training mode: {mode}")
    if calibration_mu is None:
        raise ValueError("lloyd_max mode needs calibration samples")
    samples = _unrolled.collect_layer_samples(decoder, calibration_mu)
    ch, vc, cv, wq, bq = [], [], [], [], []
    for l in range(l_max):
        ch.append(lloyd_max_fit(samples["ch"][l], q_ch))
        vc.append(lloyd_max_fit(samples["vc"][l], q_m))
        cv.append(lloyd_max_fit(samples["cv"][l], q_m))
        wq.append(_fit_or_uniform(_layer_values(decoder.weights.w_vc, l), q_w))
        bq.append(_fit_or_uniform(_layer_values(decoder.weights.offsets, l), q_w))
    qplan = QuantizationPlan(q_ch, q_m, q_w, ch=ch, vc=vc, cv=cv, w=wq, beta=bq)
    return attach(qplan, decoder)


def _layer_values(group, l):
    if group is None:
        return None
    return np.asarray(group[l], dtype=np.float64)


def _per_layer_ranges(group, l_max):
    out = []
    for l in range(l_max):
        vals = _layer_values(group, l)
        if vals is None or vals.size == 0 or float(np.abs(vals).max()) <= 0:
            out.append(1.0)
        else:
            out.append(float(np.abs(vals).max()))
    return out


def _fit_or_uniform(values, n_q):
    """Lloyd fit when there are enough distinct samples, else uniform."""
    if values is None or values.size < 2 ** n_q:
        upper = 1.0 if values is None or values.size == 0 else float(
            max(np.abs(values).max(), MIN_LEVEL_SEP))
        return QuantizerSpec.uniform(n_q, upper)
    return lloyd_max_fit(values, n_q)
