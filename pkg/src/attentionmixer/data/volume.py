"""Scan volumes: container, ``.vol`` storage, resampling and intensity normalisation.

``.vol`` layout (all little-endian)::

    offset  size  field
    0       4     magic b"AMV1"
    4       2     version (u16) = 1
    6       1     dtype code (u8), 1 = float32
    7       1     reserved
    8       12    D, H, W (3 x u32)
    20      12    spacing in mm (3 x float32)
    32      ...   voxels, row-major with D outermost
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..io import atomic_write_bytes

MAGIC = b"AMV1"
VERSION = 1
DTYPE_F32 = 1
_HEADER = struct.Struct("<4sHBB3I3f")
MAX_VOXELS = 1 << 30


class VolumeFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Volume:
    voxels: np.ndarray  # (D, H, W)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"volume needs three positive extents, got {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.voxels.shape


def encode_volume(v: Volume) -> bytes:
    d, h, w = v.dims
    header = _HEADER.pack(MAGIC, VERSION, DTYPE_F32, 0, d, h, w, *v.spacing)
    return header + v.voxels.astype("<f4").tobytes(order="C")


def decode_volume(buf: bytes) -> Volume:
    if len(buf) < _HEADER.size:
        raise VolumeFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, version, dtype, _, d, h, w, sd, sh, sw = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise VolumeFormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise VolumeFormatError(f"unsupported version {version}", 4)
    if dtype != DTYPE_F32:
        raise VolumeFormatError(f"unsupported dtype code {dtype}", 6)
    if min(d, h, w) == 0:
        raise VolumeFormatError(f"zero extent in dims {(d, h, w)}", 8)
    n = d * h * w
    if n > MAX_VOXELS:
        raise VolumeFormatError(f"dimension overflow: {d}x{h}x{w} voxels", 8)
    payload = len(buf) - _HEADER.size
    if payload != 4 * n:
        raise VolumeFormatError(
            f"payload holds {payload // 4} voxels ({payload} bytes), header declares {n}",
            _HEADER.size + min(payload, 4 * n),
        )
    voxels = np.frombuffer(buf, dtype="<f4", count=n, offset=_HEADER.size).reshape(d, h, w)
    return Volume(voxels.astype(np.float32), (sd, sh, sw))


def save_volume(v: Volume, path) -> None:
    atomic_write_bytes(Path(path), encode_volume(v))


def load_volume(path) -> Volume:
    return decode_volume(Path(path).read_bytes())


def _resample_axis(arr: np.ndarray, axis: int, target: int) -> np.ndarray:
    n = arr.shape[axis]
    # voxel-centre convention: target cells tile the same physical extent as the source
    coords = (np.arange(target) + 0.5) * (n / target) - 0.5
    coords = np.clip(coords, 0.0, n - 1)
    lo = np.floor(coords).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = coords - lo
    shape = [1] * arr.ndim
    shape[axis] = target
    frac = frac.reshape(shape)
    return np.take(arr, lo, axis=axis) * (1 - frac) + np.take(arr, hi, axis=axis) * frac


def resample_volume(v: Volume, target_side: int) -> Volume:
    """Trilinear resampling onto a ``target_side`` cube spanning the source extent."""
    if target_side < 2:
        raise ValueError("target_side must be >= 2")
    if min(v.dims) < 2:
        raise ValueError(f"cannot resample a degenerate volume with dims {v.dims}")
    if v.dims == (target_side,) * 3 and len(set(v.spacing)) == 1:
        return Volume(v.voxels.copy(), v.spacing)
    arr = v.voxels.astype(np.float64)
    for axis in range(3):
        arr = _resample_axis(arr, axis, target_side)
    extents = [n * s for n, s in zip(v.dims, v.spacing)]
    iso = float(np.mean(extents)) / target_side
    return Volume(arr.astype(np.float32), (iso, iso, iso))


def clip_normalize(v: Volume, lower: float = 1.0, upper: float = 99.0) -> Volume:
    """Clamp to the per-scan 1st/99th percentiles and rescale linearly to [0, 1]."""
    x = v.voxels.astype(np.float64)
    lo, hi = np.percentile(x, [lower, upper])
    if hi <= lo:
        return Volume(np.zeros_like(v.voxels), v.spacing)
    out = (np.clip(x, lo, hi) - lo) / (hi - lo)
    return Volume(out.astype(np.float32), v.spacing)


def preprocess_volume(v: Volume, side: int) -> np.ndarray:
    return clip_normalize(resample_volume(v, side)).voxels
