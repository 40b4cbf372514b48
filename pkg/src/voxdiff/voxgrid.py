"""Voxel field representation: raw R^3 x 4 grids, activations, interpolation, and file IO.

Channel 0 holds the raw (pre-activation) density, channels 1..3 the raw color.
Voxel samples sit at cell centers of a uniform lattice spanning ``bounds``.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

CHANNELS = 4
GRID_MAGIC = b"VXGR"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sIII6d")

Bounds = Tuple[Tuple[float, float, float], Tuple[float, float, float]]
DEFAULT_BOUNDS: Bounds = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))


class GridIOError(ValueError):
    """Base class for grid file errors. ``code`` identifies the failure kind."""

    code = "grid-io"


class GridMissingError(GridIOError, FileNotFoundError):
    code = "missing-file"


class GridBadMagicError(GridIOError):
    code = "bad-magic"


class GridTruncatedError(GridIOError):
    code = "truncated"


class GridDimensionError(GridIOError):
    code = "dimension-mismatch"


class GridChecksumError(GridIOError):
    code = "checksum"


@dataclass(frozen=True)
class ActivationParams:
    """Density is ``exp(alpha * v0 + beta)``; ``d_min`` is the raw value meaning "empty"."""

    alpha: float = 1.0
    beta: float = 0.0
    d_min: float = -10.0

    def __post_init__(self):
        if not all(math.isfinite(v) for v in (self.alpha, self.beta, self.d_min)):
            raise ValueError("activation parameters must be finite")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive so density increases with the raw value")
        if math.exp(self.alpha * self.d_min + self.beta) >= 1e-3:
            raise ValueError(
                f"exp(alpha*d_min + beta) = {math.exp(self.alpha * self.d_min + self.beta):.3g} "
                "is not close to zero (must be < 1e-3)"
            )


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    data: np.ndarray
    bounds: Bounds = field(default=DEFAULT_BOUNDS)

    def __post_init__(self):
        data = np.array(self.data, copy=True)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim != 4 or data.shape[3] != CHANNELS or not (data.shape[0] == data.shape[1] == data.shape[2]):
            raise ValueError(f"grid data must have shape (R, R, R, 4), got {data.shape}")
        if data.shape[0] < 1:
            raise ValueError("grid resolution must be positive")
        if not np.all(np.isfinite(data)):
            raise ValueError("grid data contains non-finite values")
        lo, hi = (tuple(float(v) for v in b) for b in self.bounds)
        if len(lo) != 3 or len(hi) != 3 or not all(a < b for a, b in zip(lo, hi)):
            raise ValueError(f"invalid bounds {self.bounds}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "bounds", (lo, hi))

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.bounds[0])

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.bounds[1])

    @property
    def cell_size(self) -> np.ndarray:
        return (self.hi - self.lo) / self.resolution

    def with_data(self, data: np.ndarray) -> "VoxelGrid":
        return VoxelGrid(data, self.bounds)

    def astype(self, dtype) -> "VoxelGrid":
        return VoxelGrid(self.data.astype(dtype), self.bounds)

    def voxel_centers(self) -> np.ndarray:
        """World positions of all voxel centers, shape (R, R, R, 3)."""
        R = self.resolution
        axes = [self.lo[a] + (np.arange(R) + 0.5) * self.cell_size[a] for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    @classmethod
    def filled(cls, resolution: int, density: float, color: float, bounds: Bounds = DEFAULT_BOUNDS) -> "VoxelGrid":
        data = np.empty((resolution,) * 3 + (CHANNELS,))
        data[..., 0] = density
        data[..., 1:] = color
        return cls(data, bounds)


def density_from_raw(v0, act: ActivationParams = ActivationParams()):
    return np.exp(act.alpha * np.asarray(v0, dtype=np.float64) + act.beta)


def raw_from_density(sigma, act: ActivationParams = ActivationParams()):
    return (np.log(sigma) - act.beta) / act.alpha


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    # split branches so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def color_from_raw(v):
    return sigmoid(v)


def interp_stencil(points: np.ndarray, resolution: int, lo: np.ndarray, cell: np.ndarray):
    """Trilinear stencil for world points of shape (..., 3).

    Returns ``(index, weight)`` each of shape (..., 8) where ``index`` is the flat voxel
    index ``(x*R + y)*R + z``. Points outside the lattice of centers are clamped.
    """
    R = resolution
    u = (points - lo) / cell - 0.5
    u = np.clip(u, 0.0, R - 1)
    i0 = np.minimum(np.floor(u), max(R - 2, 0)).astype(np.int64)
    f = u - i0
    i1 = np.minimum(i0 + 1, R - 1)
    idx = []
    wts = []
    for cx in (0, 1):
        ix = i1[..., 0] if cx else i0[..., 0]
        wx = f[..., 0] if cx else 1.0 - f[..., 0]
        for cy in (0, 1):
            iy = i1[..., 1] if cy else i0[..., 1]
            wy = f[..., 1] if cy else 1.0 - f[..., 1]
            for cz in (0, 1):
                iz = i1[..., 2] if cz else i0[..., 2]
                wz = f[..., 2] if cz else 1.0 - f[..., 2]
                idx.append((ix * R + iy) * R + iz)
                wts.append(wx * wy * wz)
    return np.stack(idx, axis=-1), np.stack(wts, axis=-1)


def trilinear_interp(grid: VoxelGrid, x) -> np.ndarray:
    """Raw 4-vector feature at world point(s) ``x`` (shape (3,) or (..., 3))."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 3:
        raise ValueError("points must have a trailing dimension of 3")
    if not np.all(np.isfinite(x)):
        raise ValueError("query point is not finite")
    idx, w = interp_stencil(x, grid.resolution, grid.lo, grid.cell_size)
    flat = grid.data.reshape(-1, CHANNELS)
    return np.einsum("...k,...kc->...c", w, flat[idx])


def grid_write(grid: VoxelGrid, path) -> None:
    """Write ``grid`` as little-endian VXGR. Values are stored as float32."""
    R = grid.resolution
    payload = np.ascontiguousarray(grid.data, dtype="<f4").tobytes()
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, R, CHANNELS, *grid.bounds[0], *grid.bounds[1])
    crc = zlib.crc32(payload)
    Path(path).write_bytes(header + payload + struct.pack("<I", crc))


def grid_read(path) -> VoxelGrid:
    path = Path(path)
    if not path.is_file():
        raise GridMissingError(f"grid file not found: {path}")
    blob = path.read_bytes()
    if len(blob) < 4 or blob[:4] != GRID_MAGIC:
        raise GridBadMagicError(f"{path}: bad magic {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise GridTruncatedError(f"{path}: truncated header")
    magic, version, R, channels, *bounds = _HEADER.unpack_from(blob)
    if version != GRID_VERSION:
        raise GridIOError(f"{path}: unsupported grid format version {version}")
    if channels != CHANNELS or R < 1:
        raise GridDimensionError(f"{path}: expected {CHANNELS} channels and R >= 1, got R={R}, channels={channels}")
    n = R**3 * CHANNELS * 4
    expected = _HEADER.size + n + 4
    if len(blob) < expected:
        raise GridTruncatedError(f"{path}: payload has {len(blob) - _HEADER.size} bytes, expected {n + 4}")
    if len(blob) > expected:
        raise GridDimensionError(f"{path}: {len(blob) - expected} trailing bytes beyond R={R} payload")
    payload = blob[_HEADER.size:_HEADER.size + n]
    (crc,) = struct.unpack_from("<I", blob, _HEADER.size + n)
    if zlib.crc32(payload) != crc:
        raise GridChecksumError(f"{path}: CRC32 mismatch")
    data = np.frombuffer(payload, dtype="<f4").reshape(R, R, R, CHANNELS).astype(np.float32)
    return VoxelGrid(data, (tuple(bounds[:3]), tuple(bounds[3:])))


def file_crc32(path) -> int:
    return zlib.crc32(Path(path).read_bytes())
