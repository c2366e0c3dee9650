"""Episodic few-shot evaluation: sample support/query splits, run the
pipeline (or the mean-pool baseline) over identical episodes, aggregate
accuracy and a per-class confusion matrix.

Episode sampling is deterministic: episode e of a run seeded with s draws
from numpy's default_rng([s, e]), and per-class candidate lists are sorted
by sample id first, so the same manifest content yields the same episodes
regardless of listing order. Parallel execution only maps independent
episodes across a thread pool and reduces in episode order; every number
is identical to the serial run, byte for byte.
"""
from __future__ import annotations

import dataclasses
import json
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .bank import MemoryBank, build_bank, coreset_subsample
from .errors import ParameterError
from .manifest import DatasetManifest, FeatureProvider
from .prototypes import baseline_proto_classify, build_prototypes, classify
from .scoring import ScoreMap, score_grid, softmax_normalize
from .selection import select_anomaly_embeddings

METHOD_PATCHPROTO = "patchproto"
METHOD_BASELINE = "baseline"


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the scoring/selection/classification pipeline."""

    gamma: float = 0.9
    max_patches: int = 32
    k_nearest: int = 1
    temperature: float = 1.0
    coreset_fraction: float = 0.1
    renorm_weights: bool = False

    def __post_init__(self):
        # range errors surface here rather than deep inside an episode
        if not 0.0 <= self.gamma <= 1.0:
            raise ParameterError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.max_patches < 1:
            raise ParameterError(f"max_patches must be >= 1, got {self.max_patches}")
        if self.k_nearest < 1:
            raise ParameterError(f"k_nearest must be >= 1, got {self.k_nearest}")
        if self.temperature <= 0.0:
            raise ParameterError(f"temperature must be > 0, got {self.temperature}")
        if not 0.0 < self.coreset_fraction <= 1.0:
            raise ParameterError(
                f"coreset_fraction must be in (0, 1], got {self.coreset_fraction}"
            )


@dataclass(frozen=True)
class Episode:
    index: int
    support: tuple[tuple[str, int], ...]  # (sample_id, class_id), K per class
    queries: tuple[tuple[str, int], ...]  # (sample_id, true_class_id)
    seed_trace: tuple[int, int] = (0, 0)  # (run seed, episode index)


@dataclass(frozen=True)
class EpisodeResult:
    index: int
    total: int
    correct: int
    accuracy: float
    # confusion increment: rows true class, cols predicted, in class_ids order
    confusion: tuple[tuple[int, ...], ...]
    predictions: tuple[tuple[str, int, int], ...] = ()  # (sample_id, true, predicted)


@dataclass(frozen=True)
class EvalReport:
    dataset_name: str
    method: str
    shots: int
    seed: int
    config: PipelineConfig
    class_ids: tuple[int, ...]
    per_episode: tuple[EpisodeResult, ...]
    mean_accuracy: float
    std_accuracy: float
    confusion: tuple[tuple[int, ...], ...]  # summed over episodes

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=indent)


def sample_episodes(
    manifest: DatasetManifest,
    shots: int,
    n_episodes: int,
    seed: int = 0,
    queries_per_class: int | None = None,
) -> list[Episode]:
    """Draw `shots` support samples per anomaly class without replacement;
    everything left over becomes the query pool (optionally capped per class)."""
    if shots < 1:
        raise ParameterError(f"shots must be >= 1, got {shots}")
    if n_episodes < 1:
        raise ParameterError(f"n_episodes must be >= 1, got {n_episodes}")
    if queries_per_class is not None and queries_per_class < 1:
        raise ParameterError(f"queries_per_class must be >= 1, got {queries_per_class}")
    class_ids = sorted(manifest.class_ids)
    if not class_ids:
        raise ParameterError("manifest declares no anomaly classes")
    pools = {
        cid: sorted(s.sample_id for s in manifest.samples_of_class(cid))
        for cid in class_ids
    }
    # strictly more than K per class, so every class can contribute queries
    for cid, pool in pools.items():
        need = shots + (1 if queries_per_class is None else queries_per_class)
        if len(pool) < need:
            raise ParameterError(
                f"class {cid} has only {len(pool)} samples, needs >= {need} "
                f"for {shots}-shot episodes"
            )

    episodes = []
    for e in range(n_episodes):
        rng = np.random.default_rng([seed, e])
        support: list[tuple[str, int]] = []
        queries: list[tuple[str, int]] = []
        for cid in class_ids:
            pool = pools[cid]
            picked = rng.choice(len(pool), size=shots, replace=False)
            chosen = {int(i) for i in picked}
            support.extend((pool[i], cid) for i in sorted(chosen))
            rest = [i for i in range(len(pool)) if i not in chosen]
            if queries_per_class is not None:
                sub = rng.choice(len(rest), size=queries_per_class, replace=False)
                rest = [rest[i] for i in sorted(int(j) for j in sub)]
            queries.extend((pool[i], cid) for i in rest)
        episodes.append(Episode(index=e, support=tuple(support),
                                queries=tuple(queries), seed_trace=(seed, e)))
    return episodes


def prepare_bank(
    manifest: DatasetManifest,
    provider: FeatureProvider,
    coreset_fraction: float = 0.1,
) -> MemoryBank:
    """Memory bank from every normal sample's patches, then coreset-subsampled."""
    grids = [provider.grid(s.sample_id) for s in manifest.normal_samples()]
    bank = build_bank(grids)
    if coreset_fraction < 1.0:
        bank = coreset_subsample(bank, coreset_fraction)
    return bank


class _ScoreMapCache:
    """Normalized score maps keyed by sample id. Maps depend on the bank,
    k and temperature but not on gamma/m, so one cache serves a whole run
    (and every gamma of a sweep). Concurrent recomputation is harmless:
    the value is deterministic."""

    def __init__(self, provider: FeatureProvider, bank: MemoryBank,
                 k_nearest: int, temperature: float):
        self._provider = provider
        self._bank = bank
        self._k = k_nearest
        self._temperature = temperature
        self._maps: dict[str, ScoreMap] = {}
        self._lock = threading.Lock()

    def normalized(self, sample_id: str) -> ScoreMap:
        with self._lock:
            hit = self._maps.get(sample_id)
        if hit is not None:
            return hit
        grid = self._provider.grid(sample_id)
        sm = softmax_normalize(
            score_grid(grid, self._bank, k=self._k), temperature=self._temperature
        )
        with self._lock:
            self._maps[sample_id] = sm
        return sm


def run_episode(
    episode: Episode,
    provider: FeatureProvider,
    config: PipelineConfig,
    class_ids: tuple[int, ...],
    cache: _ScoreMapCache | None = None,
    method: str = METHOD_PATCHPROTO,
    keep_predictions: bool = False,
) -> EpisodeResult:
    """One episode end to end: accuracy plus this episode's confusion counts."""
    index_of = {cid: i for i, cid in enumerate(class_ids)}
    confusion = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    predictions = []

    if method == METHOD_PATCHPROTO:
        if cache is None:
            raise ParameterError("patchproto method needs a score-map cache")
        support_sel = []
        for sample_id, cid in episode.support:
            grid = provider.grid(sample_id)
            sel = select_anomaly_embeddings(
                grid, cache.normalized(sample_id),
                gamma=config.gamma, m=config.max_patches,
            )
            support_sel.append((sel, cid))
        protos = build_prototypes(support_sel)

        def predict(sample_id: str) -> int:
            grid = provider.grid(sample_id)
            sel = select_anomaly_embeddings(
                grid, cache.normalized(sample_id),
                gamma=config.gamma, m=config.max_patches,
            )
            return classify(sel, protos,
                            renorm_weights=config.renorm_weights).predicted_class
    elif method == METHOD_BASELINE:
        support_grids = [(provider.grid(sid), cid) for sid, cid in episode.support]

        def predict(sample_id: str) -> int:
            return baseline_proto_classify(
                support_grids, provider.grid(sample_id)
            ).predicted_class
    else:
        raise ParameterError(f"unknown method {method!r}")

    correct = 0
    for sample_id, true_cid in episode.queries:
        pred = predict(sample_id)
        if pred == true_cid:
            correct += 1
        confusion[index_of[true_cid], index_of[pred]] += 1
        if keep_predictions:
            predictions.append((sample_id, true_cid, pred))

    total = len(episode.queries)
    return EpisodeResult(
        index=episode.index,
        total=total,
        correct=correct,
        accuracy=correct / total,
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
        predictions=tuple(predictions),
    )


def _aggregate(
    manifest: DatasetManifest,
    method: str,
    shots: int,
    seed: int,
    config: PipelineConfig,
    class_ids: tuple[int, ...],
    results: list[EpisodeResult],
) -> EvalReport:
    accs = np.array([r.accuracy for r in results], dtype=np.float64)
    confusion = np.zeros((len(class_ids), len(class_ids)), dtype=np.int64)
    for r in results:
        confusion += np.asarray(r.confusion, dtype=np.int64)
    return EvalReport(
        dataset_name=manifest.dataset_name,
        method=method,
        shots=shots,
        seed=seed,
        config=config,
        class_ids=class_ids,
        per_episode=tuple(results),
        mean_accuracy=float(accs.mean()),
        std_accuracy=float(accs.std()),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
    )


def _map_episodes(job, episodes, workers: int | None):
    if workers is not None and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(job, episodes))  # ordered reduction
    return [job(ep) for ep in episodes]


def evaluate(
    manifest: DatasetManifest,
    provider: FeatureProvider,
    shots: int,
    n_episodes: int,
    seed: int = 0,
    config: PipelineConfig = PipelineConfig(),
    bank: MemoryBank | None = None,
    method: str = METHOD_PATCHPROTO,
    queries_per_class: int | None = None,
    keep_predictions: bool = False,
    workers: int | None = None,
) -> EvalReport:
    """Full episodic run. workers=None (or 1) is serial; larger values fan
    episodes out over threads, and the report is identical either way."""
    episodes = sample_episodes(manifest, shots, n_episodes, seed, queries_per_class)
    class_ids = tuple(sorted(manifest.class_ids))
    cache = None
    if method == METHOD_PATCHPROTO:
        if bank is None:
            bank = prepare_bank(manifest, provider, config.coreset_fraction)
        cache = _ScoreMapCache(provider, bank, config.k_nearest, config.temperature)
    elif method != METHOD_BASELINE:
        raise ParameterError(f"unknown method {method!r}")

    def job(ep: Episode) -> EpisodeResult:
        return run_episode(ep, provider, config, class_ids, cache=cache,
                           method=method, keep_predictions=keep_predictions)

    results = _map_episodes(job, episodes, workers)
    return _aggregate(manifest, method, shots, seed, config, class_ids, results)


def gamma_sweep(
    manifest: DatasetManifest,
    provider: FeatureProvider,
    gammas: list[float],
    shots: int,
    n_episodes: int,
    seed: int = 0,
    config: PipelineConfig = PipelineConfig(),
    bank: MemoryBank | None = None,
    queries_per_class: int | None = None,
    workers: int | None = None,
) -> list[tuple[float, EvalReport]]:
    """Re-run the same episodes at each gamma. Score maps do not depend on
    gamma, so they are computed once and shared across the sweep."""
    if not gammas:
        raise ParameterError("gamma_sweep needs at least one gamma")
    episodes = sample_episodes(manifest, shots, n_episodes, seed, queries_per_class)
    class_ids = tuple(sorted(manifest.class_ids))
    if bank is None:
        bank = prepare_bank(manifest, provider, config.coreset_fraction)
    cache = _ScoreMapCache(provider, bank, config.k_nearest, config.temperature)

    out = []
    for gamma in gammas:
        cfg = dataclasses.replace(config, gamma=gamma)

        def job(ep: Episode) -> EpisodeResult:
            return run_episode(ep, provider, cfg, class_ids, cache=cache)

        results = _map_episodes(job, episodes, workers)
        out.append((gamma, _aggregate(manifest, METHOD_PATCHPROTO, shots, seed,
                                      cfg, class_ids, results)))
    return out
