"""Export configuration and its validity rules."""
from dataclasses import dataclass
from pathlib import Path


class ExportError(Exception):
    """Export cannot proceed (bad layout, refused subset, bad config)."""


# output stride of each residual stage of a standard ResNet trunk:
# stem (conv + maxpool) is 4, every later stage halves resolution
_STAGE_STRIDES = {1: 4, 2: 8, 3: 16, 4: 32}

DEFAULT_TAPS = (2, 3)
DEEP_TAPS = (3, 4)


def tap_stride(stage: int) -> int:
    if stage not in _STAGE_STRIDES:
        raise ExportError(f"tap stage must be one of {sorted(_STAGE_STRIDES)}, got {stage}")
    return _STAGE_STRIDES[stage]


@dataclass(frozen=True)
class ExportConfig:
    """Everything one export run depends on.

    taps names two residual stages, shallow first; the deeper map is
    upsampled to the shallower one's resolution before concatenation.
    image_size must be divisible by the stride at every tapped stage so
    the grids line up without fractional patches.
    """

    root: Path
    subset: str
    out_dir: Path
    image_size: int = 224
    taps: tuple[int, int] = DEFAULT_TAPS
    pool_size: int = 3

    def __post_init__(self):
        object.__setattr__(self, "root", Path(self.root))
        object.__setattr__(self, "out_dir", Path(self.out_dir))
        object.__setattr__(self, "taps", tuple(int(t) for t in self.taps))
        if not self.subset:
            raise ExportError("subset name must be non-empty")
        if len(self.taps) != 2 or self.taps[0] >= self.taps[1]:
            raise ExportError(f"taps must be two stages, shallow then deep, got {self.taps}")
        for t in self.taps:
            stride = tap_stride(t)
            if self.image_size < stride or self.image_size % stride != 0:
                raise ExportError(
                    f"image_size {self.image_size} is not divisible by stride "
                    f"{stride} of tapped stage {t}"
                )
        if self.pool_size < 1 or self.pool_size % 2 == 0:
            raise ExportError(f"pool_size must be odd and >= 1, got {self.pool_size}")

    @property
    def grid_size(self) -> int:
        """Side length of the exported grid (resolution of the shallow tap)."""
        return self.image_size // tap_stride(self.taps[0])
