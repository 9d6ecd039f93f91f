"""AWGN/BPSK channel, brute-force ML decoding, and Monte-Carlo BLER/BER.

Evaluation transmits random codewords (training elsewhere uses the
all-zero assumption); a block error is any bit mismatch over the full
codeword. Per-chunk RNG streams are split off the master seed by chunk
index, so estimates do not depend on how work is partitioned.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .codes import LinearCode
from .msgpass import M_CLIP

ML_MAX_DIM = 24


@dataclass(frozen=True)
class ChannelConfig:
    """BPSK over AWGN at a given Eb/N0 for a rate-``rate`` code."""

    ebn0_db: float
    rate: float
    seed: int = 0

    @property
    def sigma2(self) -> float:
        """Noise variance for unit-energy symbols: 1/(2 R 10^(Eb/N0 / 10))."""
        return 1.0 / (2.0 * self.rate * 10.0 ** (self.ebn0_db / 10.0))


@dataclass
class ErrorRateEstimate:
    ebn0_db: float
    bler: float
    ber: float
    blocks: int
    block_errors: int
    bit_errors: int
    std_err: float

    def as_dict(self) -> dict:
        return {
            "ebn0_db": self.ebn0_db, "bler": self.bler, "ber": self.ber,
            "blocks": self.blocks, "block_errors": self.block_errors,
            "bit_errors": self.bit_errors, "std_err": self.std_err,
        }


def llr_from_output(y, sigma2: float):
    """Channel LLR ln p(y|0)/p(y|1) = 2 y / sigma^2 for BPSK x = 1 - 2b."""
    return 2.0 * np.asarray(y, dtype=np.float64) / sigma2


def awgn_llr(bits, cfg: ChannelConfig, rng: np.random.Generator,
             m_clip: float = M_CLIP) -> np.ndarray:
    """Transmit bits over the channel; returns clipped LLRs, same shape."""
    bits = np.asarray(bits)
    x = 1.0 - 2.0 * bits.astype(np.float64)
    y = x + rng.normal(0.0, math.sqrt(cfg.sigma2), size=bits.shape)
    return np.clip(llr_from_output(y, cfg.sigma2), -m_clip, m_clip)


# ---------------------------------------------------------------------------
# Brute-force ML decoding
# ---------------------------------------------------------------------------

def _info_words(k: int, start: int, stop: int) -> np.ndarray:
    """Info words for indices [start, stop); bit i of the index is bit i."""
    idx = np.arange(start, stop, dtype=np.uint32)
    return ((idx[:, None] >> np.arange(k, dtype=np.uint32)[None, :]) & 1).astype(np.uint8)


def codebook(code: LinearCode, start: int = 0, stop: int | None = None) -> np.ndarray:
    """Codewords for an index range in generator-enumeration order."""
    if stop is None:
        stop = 1 << code.k
    return code.encode(_info_words(code.k, start, stop))


def ml_decode(code: LinearCode, mu_ch, chunk: int = 1 << 16) -> np.ndarray:
    """Exhaustive max-correlation ML decoding.

    Maximizes sum_i (1 - 2 c_i) mu_i over all 2^k codewords; ties break
    toward the lowest codeword index. ``mu_ch`` is (n,) or (n, B).
    """
    if code.k > ML_MAX_DIM:
        raise ValueError(
            f"k={code.k} exceeds the exhaustive ML bound {ML_MAX_DIM}"
        )
    mu = np.asarray(mu_ch, dtype=np.float64)
    single = mu.ndim == 1
    if single:
        mu = mu[:, None]
    total = 1 << code.k
    best_val = np.full(mu.shape[1], -np.inf)
    best_idx = np.zeros(mu.shape[1], dtype=np.int64)
    for start in range(0, total, chunk):
        stop = min(start + chunk, total)
        cw = codebook(code, start, stop)
        corr = (1.0 - 2.0 * cw.astype(np.float64)) @ mu  # (chunk, B)
        local = np.argmax(corr, axis=0)
        val = corr[local, np.arange(mu.shape[1])]
        better = val > best_val
        best_val[better] = val[better]
        best_idx[better] = start + local[better]
    out = np.empty((code.n, mu.shape[1]), dtype=np.uint8)
    for b, idx in enumerate(best_idx):
        out[:, b] = code.encode(_info_words(code.k, idx, idx + 1))[0]
    return out[:, 0] if single else out


# ---------------------------------------------------------------------------
# Monte-Carlo estimation
# ---------------------------------------------------------------------------

def _run_chunk(decoder, code, ebn0_db, blocks, seed, m_clip):
    rng = np.random.default_rng(seed)
    cfg = ChannelConfig(ebn0_db=ebn0_db, rate=code.rate)
    info = rng.integers(0, 2, size=(blocks, code.k), dtype=np.uint8)
    tx = code.encode(info).T.astype(np.uint8)          # (n, blocks)
    mu = awgn_llr(tx, cfg, rng, m_clip=m_clip)
    rx = ml_decode(code, mu) if decoder == "ml" else decoder.decode_bits(mu)
    diff = rx != tx
    return int((diff.any(axis=0)).sum()), int(diff.sum())


def _chunk_results_in_order(decoder, code, ebn0, point_idx, seed,
                            chunk_blocks, max_blocks, workers, m_clip):
    """Yield (blocks, block_errors, bit_errors) chunk by chunk, in order."""
    n_chunks = (max_blocks + chunk_blocks - 1) // chunk_blocks
    sizes = [min(chunk_blocks, max_blocks - i * chunk_blocks)
             for i in range(n_chunks)]

    def chunk_seed(i):
        return np.random.SeedSequence(entropy=seed, spawn_key=(point_idx, i))

    if workers <= 1:
        for i in range(n_chunks):
            be, bite = _run_chunk(decoder, code, ebn0, sizes[i],
                                  chunk_seed(i), m_clip)
            yield sizes[i], be, bite
        return
    with ProcessPoolExecutor(max_workers=workers) as pool:
        futs = {}
        submitted = 0
        for i in range(n_chunks):
            while submitted < min(i + workers + 1, n_chunks):
                futs[submitted] = pool.submit(
                    _run_chunk, decoder, code, ebn0, sizes[submitted],
                    chunk_seed(submitted), m_clip)
                submitted += 1
            be, bite = futs.pop(i).result()
            yield sizes[i], be, bite


def monte_carlo(decoder, code: LinearCode, ebn0_list,
                min_block_errors: int = 100, max_blocks: int = 10_000_000,
                seed: int = 0, chunk_blocks: int = 2048,
                workers: int = 1, m_clip: float = M_CLIP) -> list[ErrorRateEstimate]:
    """Estimate BLER/BER per SNR point with error-count-targeted stopping.

    ``decoder`` is either the string 'ml' or an object with a
    ``decode_bits(mu)`` method mapping (n, B) LLRs to (n, B) hard bits.
    Random codewords are transmitted. Each point stops after the first
    whole chunk that reaches ``min_block_errors`` cumulative block errors,
    or at ``max_blocks``. Chunk seeds depend only on (seed, point index,
    chunk index) and chunks are consumed in index order, so estimates are
    independent of ``workers``.
    """
    results = []
    for p, ebn0 in enumerate(ebn0_list):
        blocks = block_errors = bit_errors = 0
        for nb, be, bite in _chunk_results_in_order(
                decoder, code, ebn0, p, seed, chunk_blocks, max_blocks,
                workers, m_clip):
            blocks += nb
            block_errors += be
            bit_errors += bite
            if block_errors >= min_block_errors:
                break
        bler = block_errors / blocks if blocks else 0.0
        std = math.sqrt(max(bler * (1.0 - bler), 0.0) / blocks) if blocks else 0.0
        results.append(ErrorRateEstimate(
            ebn0_db=float(ebn0), bler=bler,
            ber=bit_errors / (blocks * code.n) if blocks else 0.0,
            blocks=blocks, block_errors=block_errors, bit_errors=bit_errors,
            std_err=std))
    return results


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["ebn0_db", "bler", "ber", "blocks", "block_errors",
                    "std_err"])
        for r in results:
            w.writerow([f"{r.ebn0_db:.10g}", f"{r.bler:.10g}",
                        f"{r.ber:.10g}", r.blocks, r.block_errors,
                        f"{r.std_err:.10g}"])


def write_results_json(results, path) -> None:
    with open(path, "w") as f:
        json.dump([r.as_dict() for r in results], f, indent=1)
