"""Estimator-style wrappers over the functional pipeline.

These follow the usual fit/transform/predict conventions (constructor
stores hyperparameters verbatim, fitted state gets a trailing underscore,
get_params/set_params come from BaseEstimator) so the pipeline drops into
existing tooling. X is always a sequence of EmbeddingGrid.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin

from .bank import MemoryBank
from .errors import DimensionMismatchError, ParameterError
from .grids import EmbeddingGrid
from .prototypes import build_prototypes, classify, mean_pool
from .scoring import score_grid, softmax_normalize
from .selection import select_anomaly_embeddings


def check_grids(X) -> list[EmbeddingGrid]:
    """Validate a sequence of grids: non-empty, all EmbeddingGrid, one
    channel count."""
    grids = list(X)
    if not grids:
        raise ParameterError("X must contain at least one embedding grid")
    for g in grids:
        if not isinstance(g, EmbeddingGrid):
            raise ParameterError(f"expected EmbeddingGrid, got {type(g).__name__}")
    channels = {g.channels for g in grids}
    if len(channels) > 1:
        raise DimensionMismatchError(f"mixed channel counts in X: {sorted(channels)}")
    return grids


def _check_bank(bank, grids: list[EmbeddingGrid]) -> MemoryBank:
    if not isinstance(bank, MemoryBank):
        raise ParameterError("bank must be a MemoryBank (see build_bank/load_bank)")
    if bank.channels != grids[0].channels:
        raise DimensionMismatchError(
            f"bank channels {bank.channels} != grid channels {grids[0].channels}"
        )
    return bank


class PatchScorer(BaseEstimator, TransformerMixin):
    """Grids in, normalized anomaly score maps out."""

    def __init__(self, bank: MemoryBank | None = None, k_nearest: int = 1,
                 temperature: float = 1.0):
        self.bank = bank
        self.k_nearest = k_nearest
        self.temperature = temperature

    def fit(self, X, y=None):
        grids = check_grids(X)
        _check_bank(self.bank, grids)
        self.n_features_in_ = grids[0].channels
        return self

    def transform(self, X):
        if not hasattr(self, "n_features_in_"):
            raise ParameterError("PatchScorer is not fitted; call fit first")
        grids = check_grids(X)
        if grids[0].channels != self.n_features_in_:
            raise DimensionMismatchError(
                f"X has {grids[0].channels} channels, fitted for {self.n_features_in_}"
            )
        return [
            softmax_normalize(score_grid(g, self.bank, k=self.k_nearest),
                              temperature=self.temperature)
            for g in grids
        ]


class PatchProtoClassifier(BaseEstimator, ClassifierMixin):
    """Few-shot anomaly-type classifier: fit on support grids and labels,
    predict query grids by distance to per-class selection sets."""

    def __init__(self, bank: MemoryBank | None = None, gamma: float = 0.9,
                 max_patches: int = 32, k_nearest: int = 1,
                 temperature: float = 1.0, renorm_weights: bool = False):
        self.bank = bank
        self.gamma = gamma
        self.max_patches = max_patches
        self.k_nearest = k_nearest
        self.temperature = temperature
        self.renorm_weights = renorm_weights

    def _select(self, grid: EmbeddingGrid):
        sm = softmax_normalize(score_grid(grid, self.bank, k=self.k_nearest),
                               temperature=self.temperature)
        return select_anomaly_embeddings(grid, sm, gamma=self.gamma, m=self.max_patches)

    def fit(self, X, y):
        grids = check_grids(X)
        _check_bank(self.bank, grids)
        labels = [int(v) for v in y]
        if len(labels) != len(grids):
            raise ParameterError(f"len(y)={len(labels)} != len(X)={len(grids)}")
        support = [(self._select(g), cid) for g, cid in zip(grids, labels)]
        self.prototypes_ = build_prototypes(support)
        self.classes_ = np.array(sorted({cid for _, cid in support}))
        self.n_features_in_ = grids[0].channels
        return self

    def predict(self, X):
        if not hasattr(self, "prototypes_"):
            raise ParameterError("PatchProtoClassifier is not fitted; call fit first")
        grids = check_grids(X)
        if grids[0].channels != self.n_features_in_:
            raise DimensionMismatchError(
                f"X has {grids[0].channels} channels, fitted for {self.n_features_in_}"
            )
        return np.array([
            classify(self._select(g), self.prototypes_,
                     renorm_weights=self.renorm_weights).predicted_class
            for g in grids
        ])

    def decision_distances(self, X) -> list[dict[int, float]]:
        """Per-query class distance dicts, for inspection and reporting."""
        if not hasattr(self, "prototypes_"):
            raise ParameterError("PatchProtoClassifier is not fitted; call fit first")
        return [
            classify(self._select(g), self.prototypes_,
                     renorm_weights=self.renorm_weights).distances
            for g in check_grids(X)
        ]


class MeanPrototypeClassifier(BaseEstimator, ClassifierMixin):
    """Baseline: mean-pool each grid to a single vector, average per class,
    predict by Euclidean argmin (ties to the lowest class id)."""

    def fit(self, X, y):
        grids = check_grids(X)
        labels = [int(v) for v in y]
        if len(labels) != len(grids):
            raise ParameterError(f"len(y)={len(labels)} != len(X)={len(grids)}")
        pooled: dict[int, list[np.ndarray]] = {}
        for g, cid in zip(grids, labels):
            pooled.setdefault(cid, []).append(mean_pool(g))
        self.classes_ = np.array(sorted(pooled))
        self.prototypes_ = np.stack(
            [np.mean(pooled[cid], axis=0) for cid in self.classes_]
        )
        self.n_features_in_ = grids[0].channels
        return self

    def predict(self, X):
        if not hasattr(self, "prototypes_"):
            raise ParameterError("MeanPrototypeClassifier is not fitted; call fit first")
        grids = check_grids(X)
        if grids[0].channels != self.n_features_in_:
            raise DimensionMismatchError(
                f"X has {grids[0].channels} channels, fitted for {self.n_features_in_}"
            )
        out = []
        for g in grids:
            d = np.linalg.norm(self.prototypes_ - mean_pool(g)[None, :], axis=1)
            out.append(self.classes_[int(np.argmin(d))])  # argmin takes first tie
        return np.array(out)
