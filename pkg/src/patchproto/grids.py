"""Patch-embedding grids and the binary container format they are stored in.

Container layout (little-endian throughout, 32-byte header):

    offset  0   magic       4 bytes   b"PPEB" (grid) / b"PPMB" (bank) / b"PPSM" (score map)
    offset  4   version     u32       = 1
    offset  8   height      u32       patch rows (bank files: vector count)
    offset 12   width       u32       patch cols (bank files: 1)
    offset 16   channels    u32       embedding dimension
    offset 20   reserved    u32       = 0; bank files store the ingested patch count here
    offset 24   extension   8 bytes   = 0; bank files store the coreset fraction as f64
    offset 32   payload     height * width * channels f32, row-major (h, w, c)

The payload is 32-bit float: the smallest width that keeps pretrained-CNN
feature precision, with fixed endianness so files are portable across
platforms.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, ParameterError, PatchProtoError

MAGIC_EMBEDDING = b"PPEB"
MAGIC_BANK = b"PPMB"
MAGIC_SCORE_MAP = b"PPSM"
FORMAT_VERSION = 1
HEADER_SIZE = 32

_HEADER = struct.Struct("<4sIIIII8s")


@dataclass(frozen=True, eq=False)
class EmbeddingGrid:
    """One image's H x W grid of C-dimensional patch embeddings.

    `data` is a read-only float32 array of shape (height, width, channels)
    with every value finite.
    """

    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "data", _validate_grid_array(np.asarray(self.data)))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def patches(self) -> np.ndarray:
        """All patch vectors as a (height * width, channels) row-major view."""
        return self.data.reshape(-1, self.data.shape[2])

    def patch(self, row: int, col: int) -> np.ndarray:
        return self.data[row, col]


def _validate_grid_array(arr: np.ndarray) -> np.ndarray:
    if arr.ndim != 3:
        raise ParameterError(f"grid data must be 3-dimensional (h, w, c), got shape {arr.shape}")
    if any(s < 1 for s in arr.shape):
        raise ParameterError(f"grid dims must all be >= 1, got shape {arr.shape}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if not np.isfinite(arr).all():
        raise ParameterError("grid contains non-finite values (NaN or Inf)")
    arr.flags.writeable = False
    return arr


def _write_container(path: str | Path, magic: bytes, payload: np.ndarray,
                     reserved: int = 0, extension: bytes = b"\x00" * 8) -> None:
    """Write a (h, w, c) float32 array under the 32-byte container header."""
    h, w, c = payload.shape
    header = _HEADER.pack(magic, FORMAT_VERSION, h, w, c, reserved, extension)
    body = np.ascontiguousarray(payload, dtype="<f4").tobytes()
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(body)
    except OSError as exc:
        raise PatchProtoError(f"cannot write {path}: {exc}") from exc


def _read_container(path: str | Path, magic: bytes) -> tuple[np.ndarray, int, bytes]:
    """Read a container file, returning (payload array, reserved, extension)."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise PatchProtoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes, need {HEADER_SIZE})")
    got_magic, version, h, w, c, reserved, extension = _HEADER.unpack_from(raw, 0)
    if got_magic != magic:
        raise FormatError(f"{path}: magic: expected {magic!r}, got {got_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version: expected {FORMAT_VERSION}, got {version}")
    if h < 1 or w < 1 or c < 1:
        raise FormatError(f"{path}: dims: all of height/width/channels must be >= 1, got {(h, w, c)}")
    expected = h * w * c * 4
    actual = len(raw) - HEADER_SIZE
    if actual != expected:
        raise FormatError(
            f"{path}: payload: declared dims {(h, w, c)} need {expected} bytes, file has {actual}"
        )
    payload = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(h, w, c)
    return payload, reserved, extension


def write_embedding_file(grid: EmbeddingGrid, path: str | Path) -> None:
    """Persist a grid, byte-exact and platform-independent."""
    _write_container(path, MAGIC_EMBEDDING, grid.data)


def read_embedding_file(path: str | Path) -> EmbeddingGrid:
    """Load a grid written by `write_embedding_file`, validating the header."""
    payload, _, _ = _read_container(path, MAGIC_EMBEDDING)
    if not np.isfinite(payload).all():
        raise FormatError(f"{path}: payload: contains non-finite values")
    return EmbeddingGrid(payload)


def read_embedding_dims(path: str | Path) -> tuple[int, int, int]:
    """Read only the (height, width, channels) header of an embedding file."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read(HEADER_SIZE)
    except OSError as exc:
        raise PatchProtoError(f"cannot read {path}: {exc}") from exc
    if len(raw) < HEADER_SIZE:
        raise FormatError(f"{path}: header truncated ({len(raw)} bytes, need {HEADER_SIZE})")
    got_magic, version, h, w, c, _, _ = _HEADER.unpack_from(raw, 0)
    if got_magic != MAGIC_EMBEDDING:
        raise FormatError(f"{path}: magic: expected {MAGIC_EMBEDDING!r}, got {got_magic!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version: expected {FORMAT_VERSION}, got {version}")
    return h, w, c
