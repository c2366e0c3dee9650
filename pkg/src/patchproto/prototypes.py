"""Class prototypes and the set-to-set distance used to label queries.

A class prototype is the list of its support samples' scored selections,
kept as separate sets: selections differ in size from image to image, so
they are never mean-pooled into a single vector. The distance from a
query selection to a class averages, over the class's support sets, the
weighted sum of each query embedding's best (1 - cosine) match within
that set. Prediction is the argmin class, ties to the lowest class id.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, ParameterError
from .grids import EmbeddingGrid
from .selection import ScoredSelection


@dataclass(frozen=True, eq=False)
class ClassPrototype:
    class_id: int
    support_sets: tuple[ScoredSelection, ...]  # one per support sample, unmerged

    def __post_init__(self):
        if not self.support_sets:
            raise ParameterError(f"class {self.class_id}: prototype needs >= 1 support set")
        dims = {s.channels for s in self.support_sets}
        if len(dims) > 1:
            raise DimensionMismatchError(f"class {self.class_id}: mixed channel counts {dims}")


@dataclass(frozen=True, eq=False)
class ClassificationResult:
    predicted_class: int
    distances: dict[int, float]
    # per class: for each support set, each query embedding's nearest
    # prototype embedding index (audit trail); None for the baseline path
    nearest_support_indices: dict[int, list[list[int]]] | None = None


def build_prototypes(
    support: list[tuple[ScoredSelection, int]],
    expected_classes: list[int] | None = None,
) -> list[ClassPrototype]:
    """Group support selections by class, preserving per-sample sets and order."""
    if not support:
        raise ParameterError("no support selections given")
    by_class: dict[int, list[ScoredSelection]] = {}
    for sel, class_id in support:
        by_class.setdefault(class_id, []).append(sel)
    if expected_classes is not None:
        missing = sorted(set(expected_classes) - set(by_class))
        if missing:
            raise ParameterError(f"no support selections for declared classes {missing}")
    return [
        ClassPrototype(class_id=cid, support_sets=tuple(sets))
        for cid, sets in sorted(by_class.items())
    ]


def _unit_rows(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to unit norm; zero rows stay zero (cosine with anything = 0)."""
    out = matrix.astype(np.float64)
    norms = np.linalg.norm(out, axis=1)
    nonzero = norms > 0
    out[nonzero] /= norms[nonzero, None]
    return out


def _canonical_order(rows: np.ndarray, weights: np.ndarray | None = None) -> np.ndarray:
    """Deterministic row order keyed on raw bytes (rows, then paired weights).

    BLAS rounds the same dot product differently depending on where it sits
    in the output matrix, so feeding it byte-identical operands is the only
    way reordered inputs come back bit-identical. Ties (byte-equal rows with
    byte-equal weights) are interchangeable downstream.
    """
    n = len(rows)
    if weights is None:
        keys = [rows[i].tobytes() for i in range(n)]
    else:
        keys = [rows[i].tobytes() + np.float64(weights[i]).tobytes() for i in range(n)]
    return np.array(sorted(range(n), key=keys.__getitem__), dtype=np.intp)


def class_distance(
    query: ScoredSelection,
    proto: ClassPrototype,
    renorm_weights: bool = False,
    _collect_nearest: list[list[int]] | None = None,
) -> float:
    """Weighted best-cosine-match distance from a query selection to a class.

    d = mean over the class's support sets of
        sum_i w_i * min over set embeddings p of (1 - cos(q_i, p)).

    With renorm_weights the query weights are rescaled to sum to 1, which
    makes magnitudes comparable across queries of different selection
    sizes without changing any per-query argmin.

    Every array entering arithmetic is first put in a canonical row order
    (unit-row bytes; query rows also keyed on their weight) and every sum
    runs in sorted-value order, so reordering query entries, support sets,
    or entries within a support set leaves the result bit-identical, not
    just close. Keying on unit rows rather than raw ones keeps the order,
    and hence the result, stable under power-of-two rescaling too.
    """
    if query.channels != proto.support_sets[0].channels:
        raise DimensionMismatchError(
            f"query channels {query.channels} != prototype channels "
            f"{proto.support_sets[0].channels}"
        )
    weights = query.weights()
    if renorm_weights:
        weights = weights / np.sort(weights).sum()
    q_unit = _unit_rows(query.embeddings())
    q_order = _canonical_order(q_unit, weights)
    q_hat = q_unit[q_order]
    w = weights[q_order]
    inv_q = np.empty(len(q_order), dtype=np.intp)
    inv_q[q_order] = np.arange(len(q_order))

    per_set = np.empty(len(proto.support_sets))
    for n, support_set in enumerate(proto.support_sets):
        p_unit = _unit_rows(support_set.embeddings())
        p_order = _canonical_order(p_unit)
        p_hat = p_unit[p_order]
        sims = np.clip(q_hat @ p_hat.T, -1.0, 1.0)
        best = sims.argmax(axis=1)
        if _collect_nearest is not None:
            _collect_nearest.append(
                [int(p_order[best[inv_q[i]]]) for i in range(len(inv_q))]
            )
        contribs = w * (1.0 - sims[np.arange(len(q_hat)), best])
        per_set[n] = np.sort(contribs).sum()
    return float(np.sort(per_set).sum()) / len(proto.support_sets)


def _argmin_class(distances: dict[int, float]) -> int:
    best_id, best_d = None, None
    for cid in sorted(distances):
        if best_d is None or distances[cid] < best_d:
            best_id, best_d = cid, distances[cid]
    return best_id


def classify(
    query: ScoredSelection,
    protos: list[ClassPrototype],
    renorm_weights: bool = False,
) -> ClassificationResult:
    """Distance to every prototype, then argmin (ties to the lowest class id)."""
    if not protos:
        raise ParameterError("need at least one class prototype")
    distances: dict[int, float] = {}
    nearest: dict[int, list[list[int]]] = {}
    for proto in protos:
        collect: list[list[int]] = []
        distances[proto.class_id] = class_distance(
            query, proto, renorm_weights=renorm_weights, _collect_nearest=collect
        )
        nearest[proto.class_id] = collect
    return ClassificationResult(
        predicted_class=_argmin_class(distances),
        distances=distances,
        nearest_support_indices=nearest,
    )


def mean_pool(grid: EmbeddingGrid) -> np.ndarray:
    """Whole-image descriptor: mean over all patch embeddings (float64)."""
    return grid.patches().astype(np.float64).mean(axis=0)


def baseline_proto_classify(
    support_grids: list[tuple[EmbeddingGrid, int]],
    query_grid: EmbeddingGrid,
) -> ClassificationResult:
    """Vanilla prototype baseline: one mean-pooled vector per image, class
    prototypes by averaging support vectors, prediction by Euclidean argmin."""
    if not support_grids:
        raise ParameterError("no support grids given")
    channels = query_grid.channels
    for g, _ in support_grids:
        if g.channels != channels:
            raise DimensionMismatchError(
                f"support channels {g.channels} != query channels {channels}"
            )
    pooled: dict[int, list[np.ndarray]] = {}
    for g, class_id in support_grids:
        pooled.setdefault(class_id, []).append(mean_pool(g))
    q = mean_pool(query_grid)
    distances = {
        cid: float(np.linalg.norm(q - np.mean(vecs, axis=0)))
        for cid, vecs in pooled.items()
    }
    return ClassificationResult(
        predicted_class=_argmin_class(distances),
        distances=distances,
        nearest_support_indices=None,
    )
