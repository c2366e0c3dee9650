"""Patch-level anomaly scores: bank distances per patch, softmax-normalized.

The softmax carries a temperature knob, default 1.0. Over several hundred
patches with a small distance range the default softmax is nearly uniform,
which directly shifts how many patches a cumulative-mass threshold admits
during selection; lower the temperature to concentrate mass on the highest
scores before tuning the threshold.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .bank import MemoryBank, nn_distances
from .errors import DimensionMismatchError, FormatError, ParameterError
from .grids import MAGIC_SCORE_MAP, EmbeddingGrid, _read_container, _write_container


@dataclass(frozen=True, eq=False)
class ScoreMap:
    """Per-patch anomaly scores of one grid.

    `raw` holds bank distances (>= 0). `normalized` is the softmax of
    raw (sums to 1) once `softmax_normalize` has run, else None. Entries
    are >= 0 rather than > 0: exp underflows to exact zero for extreme
    score gaps, and the f32 dump format quantizes tiny weights to zero.
    """

    raw: np.ndarray                   # (h, w) float64
    normalized: np.ndarray | None = None

    def __post_init__(self):
        raw = np.ascontiguousarray(self.raw, dtype=np.float64)
        if raw.ndim != 2 or raw.shape[0] < 1 or raw.shape[1] < 1:
            raise ParameterError(f"score map must be (h, w), got shape {raw.shape}")
        if not np.isfinite(raw).all() or (raw < 0).any():
            raise ParameterError("raw scores must be finite and non-negative")
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)
        if self.normalized is not None:
            norm = np.ascontiguousarray(self.normalized, dtype=np.float64)
            if norm.shape != raw.shape:
                raise DimensionMismatchError(
                    f"normalized shape {norm.shape} != raw shape {raw.shape}"
                )
            if not np.isfinite(norm).all() or (norm < 0).any():
                raise ParameterError("normalized scores must be finite and non-negative")
            if abs(float(norm.sum()) - 1.0) > 1e-6:
                raise ParameterError(f"normalized scores must sum to 1, got {norm.sum()!r}")
            norm.flags.writeable = False
            object.__setattr__(self, "normalized", norm)

    @property
    def height(self) -> int:
        return self.raw.shape[0]

    @property
    def width(self) -> int:
        return self.raw.shape[1]


def score_grid(grid: EmbeddingGrid, bank: MemoryBank, k: int = 1) -> ScoreMap:
    """Distance of every patch to the bank (mean of k nearest); raw map only."""
    if grid.channels != bank.channels:
        raise DimensionMismatchError(
            f"grid channels {grid.channels} != bank channels {bank.channels}"
        )
    dists = nn_distances(bank, grid.patches(), k=k)
    return ScoreMap(raw=dists.reshape(grid.height, grid.width))


def softmax_normalize(score_map: ScoreMap, temperature: float = 1.0) -> ScoreMap:
    """Return a new map with normalized = softmax(raw / temperature).

    Max-subtraction keeps the exponentials stable; the result is invariant
    to shifting all raw scores by a constant.
    """
    if temperature <= 0:
        raise ParameterError(f"temperature must be positive, got {temperature}")
    scaled = score_map.raw / temperature
    scaled = scaled - scaled.max()
    exp = np.exp(scaled)
    return ScoreMap(raw=score_map.raw, normalized=exp / exp.sum())


def write_score_map(score_map: ScoreMap, path: str | Path) -> None:
    """Debug dump: container with magic PPSM, channels = (raw, normalized)."""
    if score_map.normalized is None:
        raise ParameterError("score map has no normalized channel; run softmax_normalize first")
    payload = np.stack([score_map.raw, score_map.normalized], axis=2).astype(np.float32)
    _write_container(path, MAGIC_SCORE_MAP, payload)


def read_score_map(path: str | Path) -> ScoreMap:
    payload, _, _ = _read_container(path, MAGIC_SCORE_MAP)
    if payload.shape[2] != 2:
        raise FormatError(f"{path}: channels: score maps need 2 channels, got {payload.shape[2]}")
    raw = payload[:, :, 0].astype(np.float64)
    norm = payload[:, :, 1].astype(np.float64)
    # no rescaling: f32 quantization keeps the mass within the 1e-6 sum
    # tolerance, and preserving values exactly keeps write(read(f)) == f
    return ScoreMap(raw=raw, normalized=norm)
