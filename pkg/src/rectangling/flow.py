"""Dense displacement fields and Middlebury ``.flo`` I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .raster import atomic_write_bytes

FLO_MAGIC = b"PIEH"
UNKNOWN_FLOW = 1e10  # Middlebury convention: |component| > 1e9 means unknown


class FlowFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class FlowField:
    """(height, width, 2) array of (u, v) pixel displacements; NaN marks undefined."""

    vectors: np.ndarray

    def __post_init__(self):
        vec = np.asarray(self.vectors, dtype=np.float64)
        if vec.ndim != 3 or vec.shape[2] != 2:
            raise ValueError(f"flow must be (h, w, 2), got {vec.shape}")
        object.__setattr__(self, "vectors", vec)

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @property
    def u(self) -> np.ndarray:
        return self.vectors[:, :, 0]

    @property
    def v(self) -> np.ndarray:
        return self.vectors[:, :, 1]

    def magnitude(self) -> np.ndarray:
        return np.hypot(self.u, self.v)

    def defined(self) -> np.ndarray:
        return np.all(np.isfinite(self.vectors), axis=2)

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width, 2)))


def write_flo(flow: FlowField, path) -> None:
    vec = flow.vectors.astype(np.float32)
    vec = np.where(np.isfinite(vec), vec, np.float32(UNKNOWN_FLOW))
    header = FLO_MAGIC + struct.pack("<ii", flow.width, flow.height)
    atomic_write_bytes(path, header + vec.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad .flo magic")
    width, height = struct.unpack("<ii", data[4:12])
    if width < 1 or height < 1:
        raise FlowFormatError(f"{path}: invalid dimensions {width}x{height}")
    n = width * height * 2
    payload = data[12 : 12 + 4 * n]
    if len(payload) < 4 * n:
        raise FlowFormatError(f"{path}: truncated payload")
    vec = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(height, width, 2)
    vec = np.where(np.abs(vec) > 1e9, np.nan, vec)
    return FlowField(vec)
