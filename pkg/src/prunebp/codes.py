"""Linear block codes and parity-check matrix construction.

Provides Reed-Muller codes, enumeration of minimum-weight dual codewords
(the rows of overcomplete parity-check matrices), seeded sampling of
low-weight dual checks, and alist / JSON file formats.
"""

from __future__ import annotations

import itertools
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

# Brute-force enumeration of the dual code is refused above this dimension.
DUAL_ENUM_MAX_DIM = 26


class EnumerationBoundError(ValueError):
    """Dual dimension exceeds the brute-force enumeration bound."""


class SamplingShortfallError(RuntimeError):
    """Could not find the requested number of distinct checks.

    Attributes:
        found: how many distinct rows were found before giving up.
    """

    def __init__(self, requested: int, found: int, budget: int):
        super().__init__(
            f"found only {found} of {requested} distinct parity checks "
            f"within {budget} attempts"
        )
        self.requested = requested
        self.found = found
        self.budget = budget


class AlistFormatError(ValueError):
    """Malformed alist file; message names the offending line."""


# ---------------------------------------------------------------------------
# GF(2) linear algebra
# ---------------------------------------------------------------------------

def gf2_row_reduce(mat: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Reduced row echelon form over GF(2).

    Returns (rref matrix, pivot column list). Input is not modified.
    """
    a = (np.asarray(mat, dtype=np.uint8) & 1).copy()
    rows, cols = a.shape
    pivots = []
    r = 0
    for c in range(cols):
        if r >= rows:
            break
        hit = np.nonzero(a[r:, c])[0]
        if hit.size == 0:
            continue
        p = r + hit[0]
        if p != r:
            a[[r, p]] = a[[p, r]]
        # clear all other ones in this column
        sel = a[:, c].astype(bool)
        sel[r] = False
        a[sel] ^= a[r]
        pivots.append(c)
        r += 1
    return a, pivots


def gf2_rank(mat: np.ndarray) -> int:
    if mat.size == 0:
        return 0
    _, pivots = gf2_row_reduce(mat)
    return len(pivots)


def gf2_null_space(mat: np.ndarray) -> np.ndarray:
    """Basis of the right null space over GF(2), rows = basis vectors.

    The basis refers to the original column order (no permutation is
    applied to the input; pivot bookkeeping handles non-systematic
    matrices).
    """
    a = np.asarray(mat, dtype=np.uint8) & 1
    _, cols = a.shape
    rref, pivots = gf2_row_reduce(a)
    free = [c for c in range(cols) if c not in pivots]
    basis = np.zeros((len(free), cols), dtype=np.uint8)
    for i, f in enumerate(free):
        basis[i, f] = 1
        for r, p in enumerate(pivots):
            if rref[r, f]:
                basis[i, p] = 1
    return basis


def gf2_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a @ b) mod 2 with uint8 inputs."""
    return (a.astype(np.int64) @ b.astype(np.int64) % 2).astype(np.uint8)


# ---------------------------------------------------------------------------
# Core types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParityCheckMatrix:
    """Binary m x n parity-check matrix in sparse row form.

    Each row is a sorted tuple of column indices (the support of one
    parity-check equation / check node). Duplicate rows are only legal
    when ``overcomplete`` is set.
    """

    n_cols: int
    rows: tuple[tuple[int, ...], ...]
    overcomplete: bool = False
    row_weights: tuple[int, ...] = field(init=False, repr=False)

    def __post_init__(self):
        clean = []
        for i, row in enumerate(self.rows):
            if len(row) == 0:
                raise ValueError(f"row {i} is empty")
            t = tuple(sorted(set(int(j) for j in row)))
            if len(t) != len(row):
                raise ValueError(f"row {i} has repeated column indices")
            if t[0] < 0 or t[-1] >= self.n_cols:
                raise ValueError(f"row {i} has column index out of range")
            clean.append(t)
        if not self.overcomplete and len(set(clean)) != len(clean):
            raise ValueError("duplicate rows require overcomplete=True")
        object.__setattr__(self, "rows", tuple(clean))
        object.__setattr__(self, "row_weights", tuple(len(r) for r in clean))

    @property
    def m(self) -> int:
        return len(self.rows)

    @property
    def max_row_weight(self) -> int:
        return max(self.row_weights)

    def to_dense(self) -> np.ndarray:
        h = np.zeros((self.m, self.n_cols), dtype=np.uint8)
        for i, row in enumerate(self.rows):
            h[i, list(row)] = 1
        return h

    @classmethod
    def from_dense(cls, h: np.ndarray, overcomplete: bool = False) -> "ParityCheckMatrix":
        h = np.asarray(h, dtype=np.uint8) & 1
        rows = tuple(tuple(np.nonzero(r)[0].tolist()) for r in h)
        return cls(n_cols=h.shape[1], rows=rows, overcomplete=overcomplete)

    def has_duplicate_rows(self) -> bool:
        return len(set(self.rows)) != len(self.rows)


@dataclass(frozen=True)
class LinearCode:
    """A binary [n, k] linear block code.

    ``generator`` is a full-rank k x n matrix; ``h_std`` is a full-rank
    (n-k) x n parity-check matrix whose rows span the dual code.
    """

    name: str
    generator: np.ndarray
    h_std: ParityCheckMatrix

    def __post_init__(self):
        g = np.asarray(self.generator, dtype=np.uint8) & 1
        object.__setattr__(self, "generator", g)
        k, n = g.shape
        if self.h_std.n_cols != n:
            raise ValueError("h_std column count does not match generator")
        if gf2_rank(g) != k:
            raise ValueError("generator is not full rank")
        hd = self.h_std.to_dense()
        if hd.shape[0] != n - k or gf2_rank(hd) != n - k:
            raise ValueError("h_std must be a full-rank (n-k) x n matrix")
        if gf2_matmul(hd, g.T).any():
            raise ValueError("h_std rows are not orthogonal to the generator")

    @property
    def n(self) -> int:
        return self.generator.shape[1]

    @property
    def k(self) -> int:
        return self.generator.shape[0]

    @property
    def rate(self) -> float:
        return self.k / self.n

    def encode(self, info: np.ndarray) -> np.ndarray:
        """Encode info bits (..., k) -> codewords (..., n) over GF(2)."""
        info = np.asarray(info, dtype=np.uint8) & 1
        return gf2_matmul(info, self.generator)


# ---------------------------------------------------------------------------
# Reed-Muller construction
# ---------------------------------------------------------------------------

def rm_code(r: int, m: int) -> LinearCode:
    """Reed-Muller code RM(r, m) with n = 2^m.

    Generator rows are the evaluation vectors of all monomials of degree
    <= r in x_1..x_m, ordered by degree then lexicographically by
    variable index. Evaluation point j has x_i = bit (i-1) of j.
    """
    if not (0 <= r <= m <= 16):
        raise ValueError(f"require 0 <= r <= m <= 16, got r={r}, m={m}")
    n = 1 << m
    points = np.arange(n, dtype=np.uint32)
    xs = [((points >> i) & 1).astype(np.uint8) for i in range(m)]
    rows = [np.ones(n, dtype=np.uint8)]
    for deg in range(1, r + 1):
        for combo in itertools.combinations(range(m), deg):
            v = np.ones(n, dtype=np.uint8)
            for i in combo:
                v &= xs[i]
            rows.append(v)
    g = np.array(rows, dtype=np.uint8)
    h = gf2_null_space(g)
    return LinearCode(name=f"RM({r},{m})", generator=g,
                      h_std=ParityCheckMatrix.from_dense(h))


# ---------------------------------------------------------------------------
# Dual-code enumeration and sampling
# ---------------------------------------------------------------------------

def _pack_rows(rows: np.ndarray) -> np.ndarray:
    """Pack binary rows into uint64 words, little-endian within the word."""
    nbits = rows.shape[1]
    nwords = (nbits + 63) // 64
    out = np.zeros((rows.shape[0], nwords), dtype=np.uint64)
    for j in range(nbits):
        out[:, j // 64] |= rows[:, j].astype(np.uint64) << np.uint64(j % 64)
    return out


def _combo_words(basis_words: np.ndarray, index: int) -> np.ndarray:
    """XOR of basis words selected by the bits of ``index``."""
    acc = np.zeros(basis_words.shape[1], dtype=np.uint64)
    i = 0
    while index:
        if index & 1:
            acc ^= basis_words[i]
        index >>= 1
        i += 1
    return acc


def _unpack_support(words: np.ndarray, n: int) -> tuple[int, ...]:
    sup = []
    for j in range(n):
        if (int(words[j // 64]) >> (j % 64)) & 1:
            sup.append(j)
    return tuple(sup)


def min_weight_dual_checks(code: LinearCode) -> ParityCheckMatrix:
    """All minimum-weight nonzero dual codewords, as parity-check rows.

    Exhaustively enumerates the 2^(n-k) dual codewords (bit-packed, in
    chunked halves) and keeps those of minimum nonzero Hamming weight.
    Rows are ordered lexicographically by their column-index sets, so the
    result is independent of the h_std basis used.
    """
    dim = code.n - code.k
    if dim > DUAL_ENUM_MAX_DIM:
        raise EnumerationBoundError(
            f"dual dimension {dim} exceeds the enumeration bound "
            f"{DUAL_ENUM_MAX_DIM}"
        )
    basis = code.h_std.to_dense()
    bw = _pack_rows(basis)
    lo_dim = min(dim, 13)
    hi_dim = dim - lo_dim
    # all XOR combinations of the low half, built by Gray-code walk
    lo = np.zeros((1 << lo_dim, bw.shape[1]), dtype=np.uint64)
    for i in range(1, 1 << lo_dim):
        gray_bit = (i & -i).bit_length() - 1
        lo[i] = lo[i - 1] ^ bw[gray_bit]
    # the walk visits selection mask gray(i) at step i; remap to direct order
    gray = np.arange(1 << lo_dim) ^ (np.arange(1 << lo_dim) >> 1)
    direct = np.empty_like(lo)
    direct[gray] = lo
    lo = direct

    best_w = code.n + 1
    hits: list[tuple[int, int]] = []  # (hi_index, lo_index)
    for hi_idx in range(1 << hi_dim):
        hi = _combo_words(bw[lo_dim:], hi_idx)
        combo = lo ^ hi
        w = np.bitwise_count(combo).sum(axis=1)
        if hi_idx == 0:
            w[0] = code.n + 1  # skip the zero codeword
        cur = int(w.min())
        if cur < best_w:
            best_w = cur
            hits = []
        if cur <= best_w:
            for lo_idx in np.nonzero(w == best_w)[0]:
                hits.append((hi_idx, int(lo_idx)))
    rows = []
    for hi_idx, lo_idx in hits:
        words = lo[lo_idx] ^ _combo_words(bw[lo_dim:], hi_idx)
        rows.append(_unpack_support(words, code.n))
    rows.sort()
    return ParityCheckMatrix(n_cols=code.n, rows=tuple(rows), overcomplete=True)


def sample_overcomplete(
    code: LinearCode,
    max_weight: int,
    count: int,
    seed: int,
    combo_lengths: tuple[int, ...] = (1, 2, 3, 4),
    attempt_budget: int | None = None,
) -> ParityCheckMatrix:
    """Sample ``count`` distinct dual codewords of weight <= max_weight.

    Each attempt XORs j rows of h_std (j drawn uniformly from
    ``combo_lengths``); over-weight and duplicate results are rejected.
    Deterministic for a fixed seed.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    basis = code.h_std.to_dense()
    bw = _pack_rows(basis)
    nrows = basis.shape[0]
    budget = attempt_budget if attempt_budget is not None else max(1000, 400 * count)
    seen: dict[tuple[int, ...], None] = {}
    attempts = 0
    while len(seen) < count and attempts < budget:
        attempts += 1
        j = int(rng.choice(combo_lengths))
        j = min(j, nrows)
        picks = rng.choice(nrows, size=j, replace=False)
        words = np.zeros(bw.shape[1], dtype=np.uint64)
        for p in picks:
            words ^= bw[p]
        w = int(np.bitwise_count(words).sum())
        if w == 0 or w > max_weight:
            continue
        sup = _unpack_support(words, code.n)
        if sup not in seen:
            seen[sup] = None
    if len(seen) < count:
        raise SamplingShortfallError(count, len(seen), budget)
    return ParityCheckMatrix(n_cols=code.n, rows=tuple(seen.keys()),
                             overcomplete=True)


def subsample_checks(h: ParityCheckMatrix, count: int, seed: int) -> ParityCheckMatrix:
    """Uniform random subset of ``count`` rows, original order preserved."""
    if count > h.m:
        raise ValueError(f"count {count} exceeds row count {h.m}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(h.m, size=count, replace=False))
    rows = tuple(h.rows[i] for i in idx)
    return ParityCheckMatrix(n_cols=h.n_cols, rows=rows, overcomplete=True)


# ---------------------------------------------------------------------------
# alist I/O (MacKay layout, 1-based, zero-padded)
# ---------------------------------------------------------------------------

def write_alist(h: ParityCheckMatrix, path: str | os.PathLike) -> None:
    n, m = h.n_cols, h.m
    col_lists: list[list[int]] = [[] for _ in range(n)]
    for i, row in enumerate(h.rows):
        for j in row:
            col_lists[j].append(i)
    max_col = max((len(c) for c in col_lists), default=0)
    max_row = h.max_row_weight
    lines = [f"{n} {m}", f"{max_col} {max_row}"]
    lines.append(" ".join(str(len(c)) for c in col_lists))
    lines.append(" ".join(str(w) for w in h.row_weights))
    for c in col_lists:
        padded = [str(i + 1) for i in c] + ["0"] * (max_col - len(c))
        lines.append(" ".join(padded))
    for row in h.rows:
        padded = [str(j + 1) for j in row] + ["0"] * (max_row - len(row))
        lines.append(" ".join(padded))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def _alist_ints(line: str, lineno: int) -> list[int]:
    try:
        return [int(t) for t in line.split()]
    except ValueError:
        raise AlistFormatError(f"line {lineno}: non-integer token") from None


def read_alist(path: str | os.PathLike, overcomplete: bool = False) -> ParityCheckMatrix:
    with open(path) as f:
        raw = [ln.rstrip("\n") for ln in f]
    lines = [ln for ln in raw if ln.strip() != ""]
    if len(lines) < 4:
        raise AlistFormatError("line 1: truncated alist header")
    head = _alist_ints(lines[0], 1)
    if len(head) != 2:
        raise AlistFormatError("line 1: expected 'n m'")
    n, m = head
    maxes = _alist_ints(lines[1], 2)
    if len(maxes) != 2:
        raise AlistFormatError("line 2: expected max column/row degrees")
    max_col, max_row = maxes
    col_degs = _alist_ints(lines[2], 3)
    row_degs = _alist_ints(lines[3], 4)
    if len(col_degs) != n:
        raise AlistFormatError(f"line 3: expected {n} column degrees")
    if len(row_degs) != m:
        raise AlistFormatError(f"line 4: expected {m} row degrees")
    if len(lines) != 4 + n + m:
        raise AlistFormatError(
            f"line {len(lines)}: expected {4 + n + m} lines, got {len(lines)}"
        )
    # column lists are redundant with row lists; parse and cross-check
    col_lists = []
    for i in range(n):
        lineno = 5 + i
        vals = _alist_ints(lines[4 + i], lineno)
        entries = [v for v in vals if v != 0]
        if any(v < 0 for v in vals):
            raise AlistFormatError(f"line {lineno}: negative index")
        if len(vals) not in (len(entries), max_col):
            raise AlistFormatError(f"line {lineno}: bad padding")
        if len(entries) != col_degs[i]:
            raise AlistFormatError(
                f"line {lineno}: column degree mismatch "
                f"({len(entries)} != {col_degs[i]})"
            )
        for v in entries:
            if not (1 <= v <= m):
                raise AlistFormatError(f"line {lineno}: row index {v} out of range")
        col_lists.append(entries)
    rows = []
    for i in range(m):
        lineno = 5 + n + i
        vals = _alist_ints(lines[4 + n + i], lineno)
        entries = [v for v in vals if v != 0]
        if any(v < 0 for v in vals):
            raise AlistFormatError(f"line {lineno}: negative index")
        if len(vals) not in (len(entries), max_row):
            raise AlistFormatError(f"line {lineno}: bad padding")
        if len(entries) != row_degs[i]:
            raise AlistFormatError(
                f"line {lineno}: row degree mismatch "
                f"({len(entries)} != {row_degs[i]})"
            )
        for v in entries:
            if not (1 <= v <= n):
                raise AlistFormatError(
                    f"line {lineno}: column index {v} out of range"
                )
        rows.append(tuple(v - 1 for v in entries))
    got = ParityCheckMatrix(n_cols=n, rows=tuple(rows), overcomplete=overcomplete)
    # cross-check the column lists against the row lists
    ref: list[list[int]] = [[] for _ in range(n)]
    for i, row in enumerate(got.rows):
        for j in row:
            ref[j].append(i + 1)
    for j in range(n):
        if sorted(col_lists[j]) != ref[j]:
            raise AlistFormatError(
                f"line {5 + j}: column list inconsistent with row lists"
            )
    return got


# ---------------------------------------------------------------------------
# (128, 64) LDPC code (TC uplink profile) and JSON code descriptors
# ---------------------------------------------------------------------------

# 4 x 8 grid of 16x16 circulant cells: 'I+k' means identity XOR right-shift
# by k, integers are single right-shifts, None is the zero cell.
_TC_LDPC_GRID: list[list[object]] = [
    ["I+7", 2, 14, 6, None, 0, 13, "I"],
    [6, "I+15", 0, 1, "I", None, 0, 7],
    [4, 1, "I+15", 14, 11, "I", None, 3],
    [0, 1, 9, "I+13", 14, 1, "I", None],
]


def _circulant(size: int, shift: int) -> np.ndarray:
    c = np.zeros((size, size), dtype=np.uint8)
    c[np.arange(size), (np.arange(size) + shift) % size] = 1
    return c


def build_tc_ldpc_dense(msub: int = 16) -> np.ndarray:
    """Dense H of the (128, 64) rate-1/2 LDPC code with the TC profile.

    Built from 16x16 circulants on a 4x8 grid; CN degree 8, VN degrees 3
    and 5 (half each).
    """
    blocks = []
    for grid_row in _TC_LDPC_GRID:
        row_cells = []
        for cell in grid_row:
            if cell is None:
                row_cells.append(np.zeros((msub, msub), dtype=np.uint8))
            elif cell == "I":
                row_cells.append(np.eye(msub, dtype=np.uint8))
            elif isinstance(cell, str) and cell.startswith("I+"):
                row_cells.append(np.eye(msub, dtype=np.uint8)
                                 ^ _circulant(msub, int(cell[2:])))
            else:
                row_cells.append(_circulant(msub, int(cell)))
        blocks.append(np.hstack(row_cells))
    return np.vstack(blocks)


def ldpc_128_64(fixture_path: str | os.PathLike | None = None) -> LinearCode:
    """The in-repo (128, 64) LDPC code, loaded from its alist fixture.

    The generator is derived as a null-space basis of H.
    """
    if fixture_path is None:
        fixture_path = os.path.join(os.path.dirname(__file__), "fixtures",
                                    "ldpc_128_64.alist")
    h = read_alist(fixture_path)
    g = gf2_null_space(h.to_dense())
    return LinearCode(name="LDPC(128,64)", generator=g, h_std=h)


def save_code_json(code: LinearCode, path: str | os.PathLike,
                   h_std_path: str | os.PathLike) -> None:
    """Write a JSON code descriptor; h_std goes to its own alist file."""
    write_alist(code.h_std, h_std_path)
    doc = {
        "name": code.name,
        "n": code.n,
        "k": code.k,
        "generator": [list(map(int, np.nonzero(row)[0])) for row in code.generator],
        "h_std_path": os.path.relpath(h_std_path, os.path.dirname(path) or "."),
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_code_json(path: str | os.PathLike) -> LinearCode:
    with open(path) as f:
        doc = json.load(f)
    n, k = int(doc["n"]), int(doc["k"])
    g = np.zeros((k, n), dtype=np.uint8)
    for i, sup in enumerate(doc["generator"]):
        g[i, list(map(int, sup))] = 1
    h_path = doc["h_std_path"]
    if not os.path.isabs(h_path):
        h_path = os.path.join(os.path.dirname(path) or ".", h_path)
    h = read_alist(h_path)
    return LinearCode(name=str(doc["name"]), generator=g, h_std=h)


def binomial_sum(m: int, r: int) -> int:
    """Sum of C(m, i) for i = 0..r (the RM(r, m) dimension)."""
    return sum(math.comb(m, i) for i in range(r + 1))
