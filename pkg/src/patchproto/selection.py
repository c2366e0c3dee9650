"""Adaptive selection of the anomaly embeddings of one image.

Patches are taken in decreasing normalized-score order until their
cumulative mass reaches the threshold gamma or the count hits the upper
bound m. The literal accumulate-until loop admits nothing at gamma = 0,
but that setting is defined as "take the single highest-score patch", so
one entry is always selected.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ParameterError
from .grids import EmbeddingGrid
from .scoring import ScoreMap


@dataclass(frozen=True, eq=False)
class SelectionEntry:
    patch_index: tuple[int, int]   # (row, col)
    embedding: np.ndarray          # (channels,) float32
    weight: float                  # full-image softmax score of the patch


@dataclass(frozen=True, eq=False)
class ScoredSelection:
    """Selected anomaly embeddings of one image, highest weight first.

    Weights are the full-image softmax values, NOT renormalized over the
    selection, so the stored mass can be audited against the stopping
    rule. Ties in weight are broken by row-major patch index.
    """

    entries: tuple[SelectionEntry, ...]
    source_dims: tuple[int, int, int]

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def channels(self) -> int:
        return self.source_dims[2]

    def embeddings(self) -> np.ndarray:
        """Entry embeddings stacked as (len, channels) float32."""
        return np.stack([e.embedding for e in self.entries])

    def weights(self) -> np.ndarray:
        return np.array([e.weight for e in self.entries], dtype=np.float64)

    def total_weight(self) -> float:
        total = 0.0
        for e in self.entries:
            total += e.weight
        return total


def select_anomaly_embeddings(
    grid: EmbeddingGrid, score_map: ScoreMap, gamma: float, m: int
) -> ScoredSelection:
    """Pick the top patches by normalized score until cumulative mass >= gamma
    or m patches are taken; always at least one."""
    if not (0.0 <= gamma <= 1.0):
        raise ParameterError(f"gamma must be in [0, 1], got {gamma}")
    if m < 1:
        raise ParameterError(f"m must be >= 1, got {m}")
    if score_map.normalized is None:
        raise ParameterError("score map is not normalized; run softmax_normalize first")
    if (score_map.height, score_map.width) != (grid.height, grid.width):
        raise DimensionMismatchError(
            f"score map dims {(score_map.height, score_map.width)} "
            f"!= grid dims {(grid.height, grid.width)}"
        )

    flat = score_map.normalized.reshape(-1)
    # stable argsort on the negated scores: descending score, row-major ties
    order = np.argsort(-flat, kind="stable")

    entries: list[SelectionEntry] = []
    cum = 0.0
    for flat_idx in order:
        if entries and (cum >= gamma or len(entries) >= m):
            break
        row, col = divmod(int(flat_idx), grid.width)
        entries.append(
            SelectionEntry(
                patch_index=(row, col),
                embedding=grid.patch(row, col),
                weight=float(flat[flat_idx]),
            )
        )
        cum += float(flat[flat_idx])
    return ScoredSelection(entries=tuple(entries), source_dims=grid.shape)
