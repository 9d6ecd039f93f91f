"""Gradient training of unrolled decoders.

Reverse-mode gradients through the decoder, the soft bit-error-rate
multiloss with its geometric layer weighting, plain Adam, batch
generation under the all-zero-codeword assumption, and plateau-detected
training runs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .msgpass import M_CLIP, Decoder, IterationPlan, WeightSet
from .quant import QuantizationPlan, project_levels


@dataclass
class TrainConfig:
    batch_size: int = 128
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    eta_init: float = 1.0
    eta_decay: float = 0.8
    eta_period: int = 3000
    max_batches: int = 100_000
    plateau_window: int = 100
    rel_improve: float = 1e-3
    train_ebn0_db: float = 4.0
    seed: int = 0
    dtype: str = "float64"

    def __post_init__(self):
        if not (0.0 < self.eta_init <= 1.0):
            raise ValueError("eta_init must be in (0, 1]")
        if not (0.0 < self.eta_decay <= 1.0):
            raise ValueError("eta_decay must be in (0, 1]")
        for name in ("learning_rate", "adam_eps", "rel_improve"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.batch_size < 1 or self.plateau_window < 1 or self.eta_period < 1:
            raise ValueError("batch_size, plateau_window, eta_period must be >= 1")
        if self.dtype not in ("float64", "float32"):
            raise ValueError("dtype must be 'float64' or 'float32'")


class NonFiniteGradientError(RuntimeError):
    """A gradient entry came out non-finite; message names the parameter."""


@dataclass
class GradientSet:
    """Gradients mirroring a WeightSet (plus quantizer levels).

    ``qlevels`` maps (family, layer) to gradients over q_1..q_max of the
    matching QuantizerSpec; only trainable specs appear.
    """

    w_ch: np.ndarray | None = None
    w_vc: list[np.ndarray] | None = None
    w_cn: list[np.ndarray] | None = None
    offsets: list[np.ndarray] | None = None
    qlevels: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "GradientSet":
        return cls(w_ch=d.get("w_ch"), w_vc=d.get("w_vc"),
                   w_cn=d.get("w_cn"), offsets=d.get("offsets"),
                   qlevels=d.get("qlevels", {}))

    def items(self):
        if self.w_ch is not None:
            yield ("w_ch",), self.w_ch
        for name, group in (("w_vc", self.w_vc), ("w_cn", self.w_cn),
                            ("offsets", self.offsets)):
            if group is not None:
                for l, arr in enumerate(group):
                    yield (name, l), arr
        for key, arr in self.qlevels.items():
            yield ("qlevels",) + key, arr

    def check_finite(self) -> None:
        for key, arr in self.items():
            bad = np.nonzero(~np.isfinite(arr))
            if bad[0].size:
                idx = tuple(int(b[0]) for b in bad)
                raise NonFiniteGradientError(
                    f"non-finite gradient at parameter {key} index {idx}"
                )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def soft_ber_loss(o, b) -> float:
    """Mean per-bit error probability (1-o)^b * o^(1-b)."""
    o = np.asarray(o, dtype=np.float64)
    b = np.broadcast_to(np.asarray(b), o.shape)
    return float(np.mean(np.where(b == 1, 1.0 - o, o)))


def _layer_coeffs(l_max: int, eta: float) -> np.ndarray:
    g = eta ** (l_max - 1 - np.arange(l_max, dtype=np.float64))
    return g / g.sum()


def multiloss(o_layers, b, eta: float) -> float:
    """Geometric-eta weighted average of the per-layer soft BER."""
    o_layers = np.asarray(o_layers, dtype=np.float64)
    if not (0.0 < eta <= 1.0):
        raise ValueError("eta must be in (0, 1]")
    g = _layer_coeffs(o_layers.shape[0], eta)
    per_layer = np.array([soft_ber_loss(o_layers[l], b)
                          for l in range(o_layers.shape[0])])
    return float(g @ per_layer)


# ---------------------------------------------------------------------------
# Backward
# ---------------------------------------------------------------------------

def backward(plan: IterationPlan, weights: WeightSet, variant: str,
             mu_batch, eta: float, bits=None,
             quant: QuantizationPlan | None = None,
             train_levels: bool = False, m_clip: float = M_CLIP,
             dtype=np.float64, _engine=None):
    """Loss and exact reverse-mode gradients of the batch-mean multiloss.

    ``mu_batch`` is (n, B). ``bits`` defaults to the all-zero codeword.
    Clipping backpropagates as identity inside the clip range and zero
    outside; quantizers follow their straight-through rules. ``dtype``
    selects the engine's working precision; gradients come back float64.
    """
    from ._unrolled import UnrolledEngine

    dtype = np.dtype(dtype)
    mu = np.asarray(mu_batch, dtype=dtype)
    if mu.ndim == 1:
        mu = mu[:, None]
    engine = _engine if _engine is not None else UnrolledEngine(plan)
    mu_post, cache = engine.forward(weights, variant, mu, quant=quant,
                                    m_clip=m_clip, want_cache=True,
                                    dtype=dtype)
    L, n, B = mu_post.shape
    o = expit(-mu_post)
    if bits is None:
        b = np.zeros((n, 1), dtype=dtype)
    else:
        b = np.asarray(bits, dtype=dtype)
        if b.ndim == 1:
            b = b[:, None]
    g = _layer_coeffs(L, eta)
    per_layer = np.where(b == 1, 1.0 - o, o).mean(axis=(1, 2), dtype=np.float64)
    loss = float(g @ per_layer)
    coef = (g / (n * B)).astype(dtype)
    gpost = (-coef[:, None, None] * (1.0 - 2.0 * b) * o * (1.0 - o))
    raw = engine.backward(weights, cache, gpost, train_levels=train_levels)
    grads = GradientSet.from_dict(raw)
    grads.check_finite()
    return loss, grads


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(weights: WeightSet, grads: GradientSet, state: AdamState,
              cfg: TrainConfig,
              quant: QuantizationPlan | None = None) -> tuple[WeightSet, AdamState]:
    """One Adam update with bias correction, in place.

    Quantizer levels found in ``grads.qlevels`` are updated too and then
    re-projected to a valid strictly-increasing level set (q_0 stays 0).
    """
    state.t += 1
    b1, b2, eps, lr = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                       cfg.learning_rate)
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t

    def update(key, param, grad):
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
        m = state.m[key]
        v = state.v[key]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        param -= lr * (m / c1) / (np.sqrt(v / c2) + eps)

    targets = dict(weights.param_items())
    for key, garr in grads.items():
        if key[0] == "qlevels":
            family, l = key[1], key[2]
            spec = dict(quant.families())[family][l]
            update(key, spec.levels[1:], garr)
            spec.levels = project_levels(spec.levels)
        else:
            update(key, targets[key], garr)
    return weights, state


# ---------------------------------------------------------------------------
# Batch sampling and the training loop
# ---------------------------------------------------------------------------

def sample_batch(code, cfg: TrainConfig, rng: np.random.Generator,
                 m_clip: float = M_CLIP) -> np.ndarray:
    """Channel LLR batch (n, batch_size) for the all-zero codeword."""
    from .simulation import ChannelConfig, awgn_llr

    ch = ChannelConfig(ebn0_db=cfg.train_ebn0_db, rate=code.rate)
    bits = np.zeros((code.n, cfg.batch_size), dtype=np.uint8)
    return awgn_llr(bits, ch, rng, m_clip=m_clip)


def train_until_plateau(code, plan: IterationPlan, weights: WeightSet,
                        variant: str, cfg: TrainConfig,
                        quant: QuantizationPlan | None = None,
                        train_levels: bool = False,
                        rng: np.random.Generator | None = None):
    """Adam-train until the sliding loss-window mean stops improving.

    Every ``eta_period`` batches eta is multiplied by ``eta_decay``;
    training stops after ``max_batches`` or once the mean loss over the
    last ``plateau_window`` batches has not beaten its previous best by a
    relative ``rel_improve`` for a full window. Returns the best-window
    snapshot of the weights plus the loss history [(batch, loss, eta)].
    When quantizer levels are trained, the best snapshot is restored into
    ``quant`` in place.
    """
    from ._unrolled import UnrolledEngine

    weights = weights.copy()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    engine = UnrolledEngine(plan)
    state = AdamState()
    eta = cfg.eta_init
    history: list[tuple[int, float, float]] = []
    window: list[float] = []
    wsum = 0.0
    best_mean = np.inf
    best_weights = weights.copy()
    best_quant = quant.copy() if (quant is not None and train_levels) else None
    last_improve = cfg.plateau_window

    for batch in range(1, cfg.max_batches + 1):
        mu = sample_batch(code, cfg, rng)
        loss, grads = backward(plan, weights, variant, mu, eta,
                               quant=quant, train_levels=train_levels,
                               dtype=cfg.dtype, _engine=engine)
        adam_step(weights, grads, state, cfg, quant=quant)
        history.append((batch, loss, eta))
        window.append(loss)
        wsum += loss
        if len(window) > cfg.plateau_window:
            wsum -= window.pop(0)
        if len(window) == cfg.plateau_window:
            mean = wsum / cfg.plateau_window
            if mean < best_mean * (1.0 - cfg.rel_improve) or not np.isfinite(best_mean):
                best_mean = mean
                best_weights = weights.copy()
                if best_quant is not None:
                    best_quant = quant.copy()
                last_improve = batch
            elif batch - last_improve >= cfg.plateau_window:
                break
        if batch % cfg.eta_period == 0:
            eta *= cfg.eta_decay
    if not history:
        return weights, history
    if best_quant is not None:
        for (_, group), (_, bgroup) in zip(quant.families(), best_quant.families()):
            for spec, bspec in zip(group, bgroup):
                spec.levels = bspec.levels.copy()
    return best_weights, history


def final_window_loss(history, window: int) -> float:
    """Mean loss over the last ``window`` recorded batches."""
    if not history:
        return np.inf
    tail = [h[1] for h in history[-window:]]
    return float(np.mean(tail))


def best_window_loss(history, window: int) -> float:
    """Best sliding-window mean seen in a history."""
    losses = [h[1] for h in history]
    if len(losses) < window:
        return float(np.mean(losses)) if losses else np.inf
    c = np.cumsum([0.0] + losses)
    means = (c[window:] - c[:-window]) / window
    return float(means.min())


def write_loss_history_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["batch_index", "loss", "eta"])
        for batch, loss, eta in history:
            writer.writerow([batch, f"{loss:.10g}", f"{eta:.10g}"])
