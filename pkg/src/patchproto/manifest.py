"""Dataset manifests and the feature-provider boundary.

A manifest is a JSON document:

    {
      "dataset_name": "carpet",
      "classes": [{"class_id": 0, "class_name": "color"}, ...],
      "samples": [
        {"sample_id": "train/good/000", "class_id": -1,
         "embedding_file_path": "train_good_000.ppeb", "role": "normal"},
        {"sample_id": "test/hole/003", "class_id": 2,
         "embedding_file_path": "test_hole_003.ppeb", "role": "anomaly"},
        ...
      ]
    }

Embedding file paths are relative to the manifest's directory. Normal
samples carry class_id -1: normality is not a class, normal grids only
feed the memory bank. Unknown extra top-level keys (e.g. an exporter's
config echo) are ignored.

The core never touches raw images; providers hand out precomputed
`EmbeddingGrid`s per sample id, so any CNN runtime stays outside this
package.
"""
from __future__ import annotations

import json
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

from .errors import ManifestError, PatchProtoError
from .grids import EmbeddingGrid, read_embedding_dims, read_embedding_file

ROLE_NORMAL = "normal"
ROLE_ANOMALY = "anomaly"
NORMAL_CLASS_ID = -1


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    class_id: int
    embedding_file_path: str
    role: str


@dataclass(frozen=True)
class DatasetManifest:
    """Validated listing of one dataset's samples and anomaly classes."""

    dataset_name: str
    classes: tuple[tuple[int, str], ...]          # (class_id, class_name)
    samples: tuple[SampleRecord, ...]
    root: Path | None = None                      # directory paths are relative to
    grid_dims: tuple[int, int, int] | None = None  # set when dimensions were audited

    @property
    def class_ids(self) -> list[int]:
        return sorted(cid for cid, _ in self.classes)

    def class_name(self, class_id: int) -> str:
        for cid, name in self.classes:
            if cid == class_id:
                return name
        raise KeyError(class_id)

    def normal_samples(self) -> list[SampleRecord]:
        return [s for s in self.samples if s.role == ROLE_NORMAL]

    def anomaly_samples(self) -> list[SampleRecord]:
        return [s for s in self.samples if s.role == ROLE_ANOMALY]

    def samples_of_class(self, class_id: int) -> list[SampleRecord]:
        return [s for s in self.samples if s.role == ROLE_ANOMALY and s.class_id == class_id]

    def sample(self, sample_id: str) -> SampleRecord:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise ManifestError(f"unknown sample_id {sample_id!r}")

    def embedding_path(self, sample: SampleRecord) -> Path:
        base = self.root if self.root is not None else Path(".")
        return base / sample.embedding_file_path

    def to_dict(self) -> dict:
        return {
            "dataset_name": self.dataset_name,
            "classes": [{"class_id": cid, "class_name": name} for cid, name in self.classes],
            "samples": [
                {
                    "sample_id": s.sample_id,
                    "class_id": s.class_id,
                    "embedding_file_path": s.embedding_file_path,
                    "role": s.role,
                }
                for s in self.samples
            ],
        }


def validate_manifest(manifest: DatasetManifest) -> None:
    """Check manifest invariants, raising ManifestError listing every offender."""
    problems: list[str] = []
    known_classes = {cid for cid, _ in manifest.classes}
    if len(known_classes) != len(manifest.classes):
        problems.append("classes: duplicate class_id entries")
    if any(cid < 0 for cid in known_classes):
        problems.append("classes: class_id must be >= 0")

    seen: set[str] = set()
    n_normal = 0
    for s in manifest.samples:
        if s.sample_id in seen:
            problems.append(f"duplicate sample_id {s.sample_id!r}")
        seen.add(s.sample_id)
        if s.role == ROLE_NORMAL:
            n_normal += 1
            if s.class_id != NORMAL_CLASS_ID:
                problems.append(
                    f"sample {s.sample_id!r}: normal samples must use class_id {NORMAL_CLASS_ID}"
                )
        elif s.role == ROLE_ANOMALY:
            if s.class_id not in known_classes:
                problems.append(
                    f"sample {s.sample_id!r}: class_id {s.class_id} not declared in classes"
                )
        else:
            problems.append(f"sample {s.sample_id!r}: role must be 'normal' or 'anomaly', got {s.role!r}")
    if n_normal == 0:
        problems.append("no role=normal samples: the memory bank would be empty")

    if problems:
        raise ManifestError("invalid manifest:\n  " + "\n  ".join(problems))


def audit_grid_dims(manifest: DatasetManifest) -> tuple[int, int, int]:
    """Read every referenced embedding header; all grids must share one shape."""
    dims_seen: dict[tuple[int, int, int], str] = {}
    problems: list[str] = []
    for s in manifest.samples:
        path = manifest.embedding_path(s)
        try:
            dims = read_embedding_dims(path)
        except PatchProtoError as exc:
            problems.append(f"sample {s.sample_id!r}: {exc}")
            continue
        dims_seen.setdefault(dims, s.sample_id)
    if problems:
        raise ManifestError("manifest audit failed:\n  " + "\n  ".join(problems))
    if len(dims_seen) > 1:
        detail = ", ".join(f"{d} (first: {sid})" for d, sid in sorted(dims_seen.items()))
        raise ManifestError(f"heterogeneous grid dims within one dataset: {detail}")
    return next(iter(dims_seen))


def load_manifest(path: str | Path, audit_dims: bool = True) -> DatasetManifest:
    """Load and validate a manifest document.

    With audit_dims=True (the default) every referenced embedding file's
    header is read and checked for one homogeneous grid shape.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise PatchProtoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc

    for key in ("dataset_name", "classes", "samples"):
        if key not in doc:
            raise ManifestError(f"{path}: missing required field {key!r}")
    try:
        classes = tuple((int(c["class_id"]), str(c["class_name"])) for c in doc["classes"])
        samples = tuple(
            SampleRecord(
                sample_id=str(s["sample_id"]),
                class_id=int(s["class_id"]),
                embedding_file_path=str(s["embedding_file_path"]),
                role=str(s["role"]),
            )
            for s in doc["samples"]
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed classes/samples entry: {exc}") from exc

    manifest = DatasetManifest(
        dataset_name=str(doc["dataset_name"]),
        classes=classes,
        samples=samples,
        root=path.parent,
    )
    validate_manifest(manifest)
    if audit_dims:
        dims = audit_grid_dims(manifest)
        manifest = DatasetManifest(
            dataset_name=manifest.dataset_name,
            classes=manifest.classes,
            samples=manifest.samples,
            root=manifest.root,
            grid_dims=dims,
        )
    return manifest


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    validate_manifest(manifest)
    Path(path).write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")


class FeatureProvider(Protocol):
    """Boundary that yields a sample's embedding grid, deterministically."""

    def grid(self, sample_id: str) -> EmbeddingGrid:
        ...


class FileProvider:
    """FeatureProvider reading embedding files named by a manifest.

    Thread-safe; keeps an LRU cache of decoded grids since episodic
    evaluation revisits the same samples many times.
    """

    def __init__(self, manifest: DatasetManifest, cache_size: int = 128):
        self._paths = {s.sample_id: manifest.embedding_path(s) for s in manifest.samples}
        self._cache: OrderedDict[str, EmbeddingGrid] = OrderedDict()
        self._cache_size = cache_size
        self._lock = threading.Lock()

    def grid(self, sample_id: str) -> EmbeddingGrid:
        with self._lock:
            if sample_id in self._cache:
                self._cache.move_to_end(sample_id)
                return self._cache[sample_id]
        if sample_id not in self._paths:
            raise ManifestError(f"unknown sample_id {sample_id!r}")
        path = self._paths[sample_id]
        try:
            grid = read_embedding_file(path)
        except PatchProtoError as exc:
            raise PatchProtoError(f"sample {sample_id!r}: {exc}") from exc
        with self._lock:
            self._cache[sample_id] = grid
            if len(self._cache) > self._cache_size:
                self._cache.popitem(last=False)
        return grid


class InMemoryProvider:
    """FeatureProvider over a dict of already-loaded grids."""

    def __init__(self, grids: dict[str, EmbeddingGrid]):
        self._grids = dict(grids)

    def grid(self, sample_id: str) -> EmbeddingGrid:
        try:
            return self._grids[sample_id]
        except KeyError:
            raise ManifestError(f"unknown sample_id {sample_id!r}") from None
