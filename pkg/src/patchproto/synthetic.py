"""Synthetic embedding datasets with known ground truth.

Normal patches cluster around a "normal" unit direction; each anomaly
class plants a handful of patches pointing along its own direction,
mutually orthogonal to the normal one, plus gaussian noise.

With normal_modes > 1 every image commits to one of several normal
sub-directions (think different rolls of the same fabric). The bank still
covers all modes, so raw anomaly scores stay honest, but a single support
image only exhibits its own mode. Once over-selection pulls normal
patches into the prototype sets, prediction degenerates toward
image-to-image mode matching, which carries no class signal: that is the
controllable failure mode the gamma sweep is meant to expose.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParameterError
from .grids import EmbeddingGrid, write_embedding_file
from .manifest import (
    NORMAL_CLASS_ID,
    ROLE_ANOMALY,
    ROLE_NORMAL,
    DatasetManifest,
    InMemoryProvider,
    SampleRecord,
    save_manifest,
)


def _grid(patches: np.ndarray, height: int, width: int) -> EmbeddingGrid:
    arr = patches.reshape(height, width, -1).astype(np.float32)
    arr.flags.writeable = False
    return EmbeddingGrid(arr)


def make_synthetic_dataset(
    n_classes: int = 3,
    n_normals: int = 20,
    anomalies_per_class: int = 12,
    height: int = 10,
    width: int = 10,
    channels: int = 16,
    planted_range: tuple[int, int] = (1, 4),
    noise_scale: float = 0.05,
    normal_modes: int = 1,
    mode_angle_deg: float = 25.0,
    seed: int = 0,
) -> tuple[DatasetManifest, InMemoryProvider]:
    """Build a manifest plus in-memory grids. Deterministic in seed."""
    if normal_modes < 1:
        raise ParameterError(f"normal_modes must be >= 1, got {normal_modes}")
    extra = normal_modes if normal_modes > 1 else 0
    if channels < n_classes + 1 + extra:
        raise ParameterError(
            f"need channels >= n_classes + 1 + modes for orthogonal directions, "
            f"got {channels} < {n_classes + 1 + extra}"
        )
    lo, hi = planted_range
    if not 1 <= lo <= hi or hi > height * width:
        raise ParameterError(f"bad planted_range {planted_range} for {height}x{width} grid")

    rng = np.random.default_rng(seed)
    # orthonormal axes: 0 is "normal", 1..n_classes the classes, the rest
    # tilt the per-mode normal directions away from axis 0
    axes = np.eye(channels, dtype=np.float64)
    class_dirs = [axes[1 + c] for c in range(n_classes)]
    if normal_modes == 1:
        mode_dirs = [axes[0]]
    else:
        angle = np.deg2rad(mode_angle_deg)
        mode_dirs = [
            np.cos(angle) * axes[0] + np.sin(angle) * axes[1 + n_classes + j]
            for j in range(normal_modes)
        ]

    def noisy(direction: np.ndarray, n: int) -> np.ndarray:
        return direction[None, :] + rng.normal(0.0, noise_scale, size=(n, channels))

    grids: dict[str, EmbeddingGrid] = {}
    samples: list[SampleRecord] = []
    n_patches = height * width

    for i in range(n_normals):
        sid = f"normal_{i:03d}"
        mode = mode_dirs[i % normal_modes]  # every mode lands in the bank
        grids[sid] = _grid(noisy(mode, n_patches), height, width)
        samples.append(SampleRecord(sample_id=sid, class_id=NORMAL_CLASS_ID,
                                    embedding_file_path=f"{sid}.ppe", role=ROLE_NORMAL))

    for cid in range(n_classes):
        for i in range(anomalies_per_class):
            sid = f"class{cid}_{i:03d}"
            mode = mode_dirs[int(rng.integers(normal_modes))]
            patches = noisy(mode, n_patches)
            n_planted = int(rng.integers(lo, hi + 1))
            spots = rng.choice(n_patches, size=n_planted, replace=False)
            patches[spots] = noisy(class_dirs[cid], n_planted)
            grids[sid] = _grid(patches, height, width)
            samples.append(SampleRecord(sample_id=sid, class_id=cid,
                                        embedding_file_path=f"{sid}.ppe",
                                        role=ROLE_ANOMALY))

    manifest = DatasetManifest(
        dataset_name="synthetic",
        classes=tuple((cid, f"type_{cid}") for cid in range(n_classes)),
        samples=tuple(samples),
        root=None,
        grid_dims=(height, width, channels),
    )
    return manifest, InMemoryProvider({sid: g for sid, g in grids.items()})


def write_to_dir(
    manifest: DatasetManifest, provider: InMemoryProvider, out_dir: str | Path
) -> Path:
    """Materialize grids as embedding files plus manifest.json; returns the
    manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for rec in manifest.samples:
        write_embedding_file(provider.grid(rec.sample_id), out / rec.embedding_file_path)
    path = out / "manifest.json"
    save_manifest(manifest, path)
    return path
