"""Subset walk, embedding-file emission, and manifest assembly.

The output formats are the classification package's public contracts,
reproduced here byte for byte so this tool needs nothing from that package
at runtime: a 32-byte container header (magic "PPEB", version 1, three u32
dims, reserved u32, 8-byte extension) over a little-endian float32 payload,
and a JSON manifest with dataset_name / classes / samples.
"""
import json
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExportConfig, ExportError
from .model import (
    BACKBONE_NAME,
    NORM_MEAN,
    NORM_STD,
    PRETRAINED_TAG,
    FeatureExtractor,
    load_backbone,
    preprocess,
)

_HEADER = struct.Struct("<4sIIIII8s")
_MAGIC = b"PPEB"
_VERSION = 1

ROLE_NORMAL = "normal"
ROLE_ANOMALY = "anomaly"
NORMAL_CLASS_ID = -1

MIN_NORMAL_SAMPLES = 200
REFUSED_SUBSETS = ("toothbrush",)

_IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}


@dataclass(frozen=True)
class _Record:
    sample_id: str
    source: Path
    class_id: int
    role: str


@dataclass(frozen=True)
class ExportResult:
    manifest_path: Path
    written: int
    errors: tuple[tuple[str, str], ...]  # (source path, message) per failed image
    grid_dims: tuple[int, int, int]


def _image_files(folder: Path) -> list[Path]:
    return sorted(
        p for p in folder.iterdir()
        if p.is_file() and p.suffix.lower() in _IMAGE_SUFFIXES
    )


def walk_subset(config: ExportConfig) -> tuple[list[tuple[int, str]], list[_Record]]:
    """Resolve the subset's class table and deterministic file listing.

    train/good supplies normals; each test/<defect> folder is one anomaly
    class named after the folder (test/good holds held-out normals for
    detection benchmarks and is skipped here). Class ids follow sorted
    folder-name order; files are sorted within each folder.
    """
    if config.subset in REFUSED_SUBSETS:
        raise ExportError(
            f"subset {config.subset!r} has a single anomaly type and is "
            f"excluded by default; it cannot support multi-class episodes"
        )
    subset_dir = config.root / config.subset
    train_good = subset_dir / "train" / "good"
    test_dir = subset_dir / "test"
    for needed in (subset_dir, train_good, test_dir):
        if not needed.is_dir():
            raise ExportError(f"missing folder: {needed}")

    normals = _image_files(train_good)
    if not normals:
        raise ExportError(f"no images in {train_good}")
    defect_dirs = sorted(
        d for d in test_dir.iterdir() if d.is_dir() and d.name != "good"
    )
    if not defect_dirs:
        raise ExportError(f"no anomaly class folders under {test_dir}")

    classes = [(cid, d.name) for cid, d in enumerate(defect_dirs)]
    records = [
        _Record(f"good_{p.stem}", p, NORMAL_CLASS_ID, ROLE_NORMAL) for p in normals
    ]
    for cid, d in enumerate(defect_dirs):
        files = _image_files(d)
        if not files:
            raise ExportError(f"no images in {d}")
        records.extend(
            _Record(f"{d.name}_{p.stem}", p, cid, ROLE_ANOMALY) for p in files
        )
    return classes, records


def _write_grid(path: Path, grid: np.ndarray) -> None:
    h, w, c = grid.shape
    header = _HEADER.pack(_MAGIC, _VERSION, h, w, c, 0, b"\x00" * 8)
    body = np.ascontiguousarray(grid, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(body)


def export_subset(
    config: ExportConfig,
    extractor: FeatureExtractor | None = None,
    batch_size: int = 8,
) -> ExportResult:
    """Export one subset: an embedding file per readable image + manifest.

    Unreadable images are collected into the result's error list rather
    than aborting the run; callers treat a non-empty list as failure.
    Output order is the walk order regardless of how images are batched.
    """
    if batch_size < 1:
        raise ExportError(f"batch_size must be >= 1, got {batch_size}")
    classes, records = walk_subset(config)
    if extractor is None:
        extractor = load_backbone()

    errors: list[tuple[str, str]] = []
    loaded: list[tuple[_Record, torch.Tensor]] = []
    from PIL import Image

    for rec in records:
        try:
            with Image.open(rec.source) as img:
                loaded.append((rec, preprocess(img, config.image_size)))
        except (OSError, ValueError) as exc:
            errors.append((str(rec.source), str(exc)))

    normal_count = sum(1 for rec, _ in loaded if rec.role == ROLE_NORMAL)
    if normal_count < MIN_NORMAL_SAMPLES:
        warnings.warn(
            f"subset {config.subset!r}: {normal_count} normal samples, "
            f"expected at least {MIN_NORMAL_SAMPLES}",
            UserWarning,
            stacklevel=2,
        )

    config.out_dir.mkdir(parents=True, exist_ok=True)
    written_samples: list[dict] = []
    dims = None
    for start in range(0, len(loaded), batch_size):
        chunk = loaded[start:start + batch_size]
        batch = torch.stack([t for _, t in chunk])
        grids = extractor.embed(batch, config.taps, config.pool_size)
        for (rec, _), grid in zip(chunk, grids):
            dims = grid.shape
            filename = f"{rec.sample_id}.ppe"
            _write_grid(config.out_dir / filename, grid)
            written_samples.append(
                {
                    "sample_id": rec.sample_id,
                    "class_id": rec.class_id,
                    "embedding_file_path": filename,
                    "role": rec.role,
                }
            )

    if dims is None:
        raise ExportError(f"subset {config.subset!r}: no image could be read")

    doc = {
        "dataset_name": config.subset,
        "classes": [{"class_id": cid, "class_name": name} for cid, name in classes],
        "samples": written_samples,
        "config": {
            "backbone": BACKBONE_NAME,
            "pretrained": PRETRAINED_TAG,
            "image_size": config.image_size,
            "taps": list(config.taps),
            "pool_size": config.pool_size,
            "normalization": {"mean": list(NORM_MEAN), "std": list(NORM_STD)},
            "grid": list(dims),
        },
    }
    manifest_path = config.out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2) + "\n")
    return ExportResult(
        manifest_path=manifest_path,
        written=len(written_samples),
        errors=tuple(errors),
        grid_dims=(int(dims[0]), int(dims[1]), int(dims[2])),
    )
