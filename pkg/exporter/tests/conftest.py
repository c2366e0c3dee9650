import numpy as np
import pytest
import torch
from PIL import Image

from feature_exporter import FeatureExtractor

CARPET_DEFECTS = ("color", "cut", "hole", "metal_contamination", "thread")


@pytest.fixture(scope="session")
def extractor():
    """Randomly initialized trunk with a fixed seed.

    Pretrained weights need a download this environment does not allow;
    shapes, determinism, and file contracts do not depend on weight values.
    """
    from torchvision.models import wide_resnet50_2

    torch.manual_seed(0)
    return FeatureExtractor(wide_resnet50_2(weights=None))


def _write_png(path, seed, size=48):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, "RGB").save(path)


def make_subset(root, name, n_normals, defects, per_defect=2, test_good=2):
    """Fake MVTec-style subset folder with deterministic PNG content."""
    seed = 0
    for i in range(n_normals):
        _write_png(root / name / "train" / "good" / f"{i:03d}.png", seed)
        seed += 1
    for d in defects:
        for i in range(per_defect):
            _write_png(root / name / "test" / d / f"{i:03d}.png", seed)
            seed += 1
    for i in range(test_good):
        _write_png(root / name / "test" / "good" / f"{i:03d}.png", seed)
        seed += 1


@pytest.fixture(scope="session")
def data_root(tmp_path_factory):
    root = tmp_path_factory.mktemp("mvtec")
    make_subset(root, "carpet", n_normals=4, defects=CARPET_DEFECTS)
    make_subset(root, "tile", n_normals=2, defects=("crack",), per_defect=1, test_good=0)
    make_subset(root, "toothbrush", n_normals=1, defects=("defective",), per_defect=1)
    return root
