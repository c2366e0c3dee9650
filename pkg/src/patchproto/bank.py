"""Normal-patch memory bank: exact nearest-neighbor queries and greedy
k-center coreset subsampling.

Exact search is the contract. Distances are canonical float64 values
(cast the float32 vectors up, subtract, square, sum each row, sqrt), so
results are bit-identical to a naive linear scan. For large banks a
float32 GEMM prefilter cuts the work: it bounds each squared distance
within a provable margin, keeps every vector that could still reach the
k-th place, and recomputes only those candidates canonically. The
prefilter changes speed, never values.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatchError, FormatError, ParameterError
from .grids import MAGIC_BANK, EmbeddingGrid, _read_container, _write_container

# Switch to the GEMM prefilter above this many bank cells (n * channels).
_FAST_PATH_MIN_ELEMS = 1 << 21
# f32 dot-product error slack: 8 * c * 2**-24 * magnitude covers the
# worst-case sequential accumulation bound with room to spare.
_F32_EPS = 2.0 ** -24


@dataclass(frozen=True, eq=False)
class MemoryBank:
    """Flat collection of normal patch embeddings, optionally coreset-reduced."""

    vectors: np.ndarray      # (n, channels) float32, read-only
    source_count: int        # patches ingested before any subsampling
    coreset_fraction: float  # in (0, 1]; 1.0 means no subsampling

    def __post_init__(self):
        arr = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ParameterError(f"bank vectors must be a non-empty (n, c) matrix, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ParameterError("bank contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "vectors", arr)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def channels(self) -> int:
        return self.vectors.shape[1]


def build_bank(normals: list[EmbeddingGrid]) -> MemoryBank:
    """Flatten every patch of every normal grid into one bank (no subsampling)."""
    if not normals:
        raise ParameterError("cannot build a bank from an empty grid list")
    channels = normals[0].channels
    for i, g in enumerate(normals):
        if g.channels != channels:
            raise DimensionMismatchError(
                f"grid {i} has {g.channels} channels, expected {channels}"
            )
    vectors = np.vstack([g.patches() for g in normals])
    return MemoryBank(vectors=vectors, source_count=vectors.shape[0], coreset_fraction=1.0)


def coreset_size(fraction: float, source_count: int) -> int:
    return min(source_count, max(1, math.ceil(fraction * source_count)))


def coreset_subsample(bank: MemoryBank, fraction: float, seed: int = 0) -> MemoryBank:
    """Reduce the bank to ceil(fraction * n) vectors by greedy farthest-point
    selection, starting from the largest-norm vector.

    The seed is reserved for a future randomized start and must be 0.
    Re-subsampling an already reduced bank is rejected (the size invariant
    is stated against the original source count).
    """
    if not (0.0 < fraction <= 1.0):
        raise ParameterError(f"coreset fraction must be in (0, 1], got {fraction}")
    if seed != 0:
        raise ParameterError("coreset seed is reserved and must currently be 0")
    if bank.coreset_fraction != 1.0:
        raise ParameterError("bank was already coreset-subsampled; rebuild it first")
    n = len(bank)
    target = coreset_size(fraction, n)
    if target == n:
        return MemoryBank(bank.vectors, source_count=bank.source_count, coreset_fraction=fraction)
    indices = greedy_coreset_indices(bank.vectors, target)
    return MemoryBank(
        bank.vectors[indices], source_count=bank.source_count, coreset_fraction=fraction
    )


def _row_sq_norms(matrix_f32: np.ndarray) -> np.ndarray:
    """Canonical float64 squared norms, chunked so no full f64 copy is held."""
    n = matrix_f32.shape[0]
    out = np.empty(n, dtype=np.float64)
    step = max(1, (1 << 22) // max(1, matrix_f32.shape[1]))
    for a in range(0, n, step):
        block = matrix_f32[a:a + step].astype(np.float64)
        out[a:a + step] = (block * block).sum(axis=1)
    return out


def _canonical_sq_dists(rows_f32: np.ndarray, point_f64: np.ndarray) -> np.ndarray:
    """Canonical float64 squared distances from every row to one point."""
    n = rows_f32.shape[0]
    out = np.empty(n, dtype=np.float64)
    step = max(1, (1 << 22) // max(1, rows_f32.shape[1]))
    for a in range(0, n, step):
        diff = rows_f32[a:a + step].astype(np.float64) - point_f64
        out[a:a + step] = (diff * diff).sum(axis=1)
    return out


def greedy_coreset_indices(vectors: np.ndarray, count: int) -> np.ndarray:
    """Greedy k-center (farthest-point) selection over the rows of `vectors`.

    Start at the largest-L2-norm row (ties: lowest index); each step adds
    the row farthest from the current selection (ties: lowest index).
    Results match the brute-force greedy rule exactly; large inputs go
    through the margin-checked f32 prefilter.
    """
    vectors = np.ascontiguousarray(vectors, dtype=np.float32)
    n, c = vectors.shape
    if not (1 <= count <= n):
        raise ParameterError(f"coreset size must be in [1, {n}], got {count}")
    if n * c <= _FAST_PATH_MIN_ELEMS:
        return _greedy_indices_small(vectors, count)
    return _greedy_indices_prefiltered(vectors, count)


def _greedy_indices_small(vectors: np.ndarray, count: int) -> np.ndarray:
    pts = vectors.astype(np.float64)
    sq_norms = (pts * pts).sum(axis=1)
    start = int(np.argmax(sq_norms))
    selected = [start]
    diff = pts - pts[start]
    min_sq = (diff * diff).sum(axis=1)
    for _ in range(count - 1):
        nxt = int(np.argmax(min_sq))
        selected.append(nxt)
        diff = pts - pts[nxt]
        np.minimum(min_sq, (diff * diff).sum(axis=1), out=min_sq)
    return np.asarray(selected, dtype=np.int64)


def _greedy_indices_prefiltered(vectors: np.ndarray, count: int) -> np.ndarray:
    n, c = vectors.shape
    bb = _row_sq_norms(vectors)
    margin = 16.0 * c * _F32_EPS * float(bb.max())

    def approx_sq_to(idx: int) -> np.ndarray:
        ab = vectors @ vectors[idx]  # f32 GEMV
        d = bb + bb[idx] - 2.0 * ab.astype(np.float64)
        np.maximum(d, 0.0, out=d)
        return d

    def exact_min_sq(idx: int, selected: list[int]) -> float:
        # canonical min squared distance from row idx to the selected rows
        q = vectors[idx].astype(np.float64)
        best = np.inf
        sel = np.asarray(selected, dtype=np.int64)
        step = max(1, (1 << 22) // c)
        for a in range(0, len(sel), step):
            diff = vectors[sel[a:a + step]].astype(np.float64) - q
            best = min(best, float((diff * diff).sum(axis=1).min()))
        return best

    start = int(np.argmax(bb))
    selected = [start]
    approx_min = approx_sq_to(start)
    for _ in range(count - 1):
        cutoff = float(approx_min.max()) - 2.0 * margin
        cand = np.flatnonzero(approx_min >= cutoff)
        exact = [exact_min_sq(int(i), selected) for i in cand]
        nxt = int(cand[int(np.argmax(exact))])
        selected.append(nxt)
        np.minimum(approx_min, approx_sq_to(nxt), out=approx_min)
    return np.asarray(selected, dtype=np.int64)


def coreset_covering_radius(original: np.ndarray, coreset: np.ndarray) -> float:
    """Max over original rows of the distance to their nearest coreset row."""
    original = np.ascontiguousarray(original, dtype=np.float32)
    worst_min = np.full(original.shape[0], np.inf)
    for row in np.ascontiguousarray(coreset, dtype=np.float32):
        np.minimum(worst_min, _canonical_sq_dists(original, row.astype(np.float64)), out=worst_min)
    return float(np.sqrt(worst_min.max()))


def _k_smallest_mean(sq_dists: np.ndarray, k: int) -> float:
    """Mean of the k smallest sqrt'd values; ascending sort, sequential sum."""
    dists = np.sqrt(np.sort(sq_dists))
    total = 0.0
    for v in dists[:k]:
        total += float(v)
    return total / k


def nn_distances(bank: MemoryBank, queries: np.ndarray, k: int = 1) -> np.ndarray:
    """Mean of the k smallest Euclidean distances from each query row to the
    bank; k=1 is the exact nearest-neighbor distance."""
    queries = np.atleast_2d(np.asarray(queries))
    if queries.dtype != np.float32:
        queries = queries.astype(np.float32)
    queries = np.ascontiguousarray(queries)
    if queries.shape[1] != bank.channels:
        raise DimensionMismatchError(
            f"query dim {queries.shape[1]} != bank channels {bank.channels}"
        )
    if not (1 <= k <= len(bank)):
        raise ParameterError(f"k must be in [1, {len(bank)}], got {k}")
    if len(bank) * bank.channels <= _FAST_PATH_MIN_ELEMS:
        return _nn_small(bank.vectors, queries, k)
    return _nn_prefiltered(bank.vectors, queries, k)


def _nn_small(bank: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    out = np.empty(queries.shape[0], dtype=np.float64)
    for i, q in enumerate(queries):
        out[i] = _k_smallest_mean(_canonical_sq_dists(bank, q.astype(np.float64)), k)
    return out


def _nn_prefiltered(bank: np.ndarray, queries: np.ndarray, k: int) -> np.ndarray:
    n, c = bank.shape
    bb = _row_sq_norms(bank)
    bb_max = float(bb.max())
    coef = 8.0 * c * _F32_EPS
    out = np.empty(queries.shape[0], dtype=np.float64)
    step = max(1, (1 << 25) // max(1, n))  # query rows per GEMM block
    for a in range(0, queries.shape[0], step):
        block = queries[a:a + step]
        ab = bank @ block.T  # (n, step) f32 GEMM
        ab64 = ab.astype(np.float64)
        qq = _row_sq_norms(block)
        for j in range(block.shape[0]):
            approx = bb + qq[j] - 2.0 * ab64[:, j]
            np.maximum(approx, 0.0, out=approx)
            margin = coef * (qq[j] + bb_max)
            kth = np.partition(approx, k - 1)[k - 1]
            cand = np.flatnonzero(approx <= kth + 2.0 * margin)
            exact = _canonical_sq_dists(
                np.ascontiguousarray(bank[cand]), block[j].astype(np.float64)
            )
            out[a + j] = _k_smallest_mean(exact, k)
    return out


def nn_distance(bank: MemoryBank, query: np.ndarray, k: int = 1) -> float:
    query = np.asarray(query)
    if query.ndim != 1:
        raise DimensionMismatchError(f"query must be a single vector, got shape {query.shape}")
    return float(nn_distances(bank, query[None, :], k)[0])


def save_bank(bank: MemoryBank, path: str | Path) -> None:
    """Persist the bank in the shared binary container (magic PPMB).

    The reserved header words hold the ingested patch count (u32) and the
    coreset fraction (f64).
    """
    if bank.source_count > 0xFFFFFFFF:
        raise ParameterError("source_count too large for the bank header")
    payload = bank.vectors.reshape(len(bank), 1, bank.channels)
    extension = struct.pack("<d", bank.coreset_fraction)
    _write_container(path, MAGIC_BANK, payload, reserved=bank.source_count, extension=extension)


def load_bank(path: str | Path) -> MemoryBank:
    payload, reserved, extension = _read_container(path, MAGIC_BANK)
    if payload.shape[1] != 1:
        raise FormatError(f"{path}: width: bank files store (n, 1, c), got width {payload.shape[1]}")
    (fraction,) = struct.unpack("<d", extension)
    source_count = int(reserved)
    n = payload.shape[0]
    if not (0.0 < fraction <= 1.0):
        raise FormatError(f"{path}: coreset_fraction: must be in (0, 1], got {fraction}")
    if n != coreset_size(fraction, source_count):
        raise FormatError(
            f"{path}: size: {n} vectors does not match "
            f"ceil({fraction} * {source_count}) = {coreset_size(fraction, source_count)}"
        )
    bank = MemoryBank(
        payload.reshape(n, payload.shape[2]),
        source_count=source_count,
        coreset_fraction=fraction,
    )
    return bank
