"""Voxel grids, label maps, the ``.gbtv`` codec and preprocessing."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Xoshiro256

MAGIC = b"GBTV"
VERSION = 1
DTYPE_IMAGE = 0
DTYPE_LABELS = 1
_HEADER = struct.Struct("<4sHBB3I3f3fI")


class VolumeFormatError(ValueError):
    """Base class for ``.gbtv`` decode failures."""


class BadMagicError(VolumeFormatError):
    pass


class VersionMismatchError(VolumeFormatError):
    pass


class TruncatedPayloadError(VolumeFormatError):
    pass


class DimsMismatchError(VolumeFormatError):
    pass


def _f32_triple(values, name, positive=False):
    out = tuple(float(np.float32(v)) for v in values)
    if len(out) != 3:
        raise ValueError(f"{name} needs 3 components, got {len(out)}")
    if positive and not all(v > 0 for v in out):
        raise ValueError(f"{name} components must be positive: {out}")
    return out


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar 3D image. ``data`` is float32 with shape ``dims`` (depth, height, width)."""

    data: np.ndarray
    spacing: tuple = (1.5, 1.5, 1.5)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"image data must be a non-empty 3D array, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _f32_triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _f32_triple(self.origin, "origin"))

    @property
    def dims(self):
        return tuple(int(d) for d in self.data.shape)

    def same_geometry(self, other):
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return self.same_geometry(other) and self.data.tobytes() == other.data.tobytes()


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer label volume; every value is below ``num_classes``."""

    labels: np.ndarray
    num_classes: int = 6
    spacing: tuple = (1.5, 1.5, 1.5)
    origin: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValueError(f"label data must be a non-empty 3D array, got shape {labels.shape}")
        if self.num_classes < 1 or self.num_classes > 256:
            raise ValueError("num_classes must be in [1, 256]")
        if labels.size and int(labels.max()) >= self.num_classes:
            raise ValueError(f"label {int(labels.max())} >= num_classes {self.num_classes}")
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "spacing", _f32_triple(self.spacing, "spacing", positive=True))
        object.__setattr__(self, "origin", _f32_triple(self.origin, "origin"))

    @property
    def dims(self):
        return tuple(int(d) for d in self.labels.shape)

    def same_geometry(self, other):
        return self.dims == other.dims and self.spacing == other.spacing and self.origin == other.origin

    def __eq__(self, other):
        if not isinstance(other, LabelMap):
            return NotImplemented
        return (
            self.same_geometry(other)
            and self.num_classes == other.num_classes
            and self.labels.tobytes() == other.labels.tobytes()
        )


@dataclass(frozen=True)
class AugmentSpec:
    crop_dims: tuple
    flip_axes: frozenset = field(default_factory=lambda: frozenset({0, 1, 2}))
    rng_seed: int = 0


# -- codec -------------------------------------------------------------------


def encode(value) -> bytes:
    """Serialize a VoxelGrid or LabelMap to ``.gbtv`` bytes."""
    if isinstance(value, VoxelGrid):
        code, n_cls, payload = DTYPE_IMAGE, 0, value.data.astype("<f4").tobytes()
    elif isinstance(value, LabelMap):
        code, n_cls, payload = DTYPE_LABELS, value.num_classes, value.labels.tobytes()
    else:
        raise TypeError(f"cannot encode {type(value).__name__}")
    header = _HEADER.pack(MAGIC, VERSION, code, 0, *value.dims, *value.spacing, *value.origin, n_cls)
    return header + payload


def decode(buf: bytes):
    """Parse ``.gbtv`` bytes; each malformation raises its own error type."""
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError("not a .gbtv stream (bad magic)")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("truncated header")
    magic, version, code, _reserved, d, h, w, sx, sy, sz, ox, oy, oz, n_cls = _HEADER.unpack_from(buf)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported .gbtv version {version}")
    if code not in (DTYPE_IMAGE, DTYPE_LABELS):
        raise VolumeFormatError(f"unknown dtype code {code}")
    itemsize = 4 if code == DTYPE_IMAGE else 1
    expected = d * h * w * itemsize
    payload = memoryview(buf)[_HEADER.size:]
    if len(payload) < expected:
        raise TruncatedPayloadError(f"truncated payload: {len(payload)} of {expected} bytes")
    if len(payload) > expected or d * h * w == 0:
        raise DimsMismatchError(f"payload of {len(payload)} bytes disagrees with dims {(d, h, w)}")
    spacing, origin = (sx, sy, sz), (ox, oy, oz)
    if code == DTYPE_IMAGE:
        data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(d, h, w)
        return VoxelGrid(data, spacing, origin)
    labels = np.frombuffer(payload, dtype=np.uint8).reshape(d, h, w).copy()
    return LabelMap(labels, int(n_cls), spacing, origin)


def save(value, path):
    Path(path).write_bytes(encode(value))


def load(path):
    return decode(Path(path).read_bytes())


# -- preprocessing ---------------------------------------------------------


def _resampled_dims(dims, spacing, target):
    return tuple(max(1, int(math.floor(d * s / target + 0.5))) for d, s in zip(dims, spacing))


def _linear_axis(arr, axis, pos):
    n = arr.shape[axis]
    pos = np.clip(pos, 0.0, n - 1)
    i0 = np.floor(pos).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    frac = pos - i0
    shape = [1] * arr.ndim
    shape[axis] = -1
    frac = frac.reshape(shape)
    a = np.take(arr, i0, axis=axis)
    b = np.take(arr, i1, axis=axis)
    return a + (b - a) * frac


def resample_isotropic(grid, target_spacing=1.5):
    """Resample onto an isotropic grid; trilinear for images, nearest for labels.

    Output voxel ``j`` sits at ``origin + j * target`` and samples the input at
    continuous index ``j * target / spacing``, clamped to the volume edge.
    """
    if not target_spacing > 0:
        raise ValueError("target spacing must be positive")
    t = float(target_spacing)
    dims = _resampled_dims(grid.dims, grid.spacing, t)
    positions = [np.arange(n, dtype=np.float64) * t / s for n, s in zip(dims, grid.spacing)]
    if isinstance(grid, LabelMap):
        idx = [
            np.clip(np.floor(p + 0.5).astype(np.intp), 0, n - 1)
            for p, n in zip(positions, grid.dims)
        ]
        labels = grid.labels[np.ix_(*idx)]
        return LabelMap(labels, grid.num_classes, (t, t, t), grid.origin)
    out = grid.data.astype(np.float64)
    for axis, p in enumerate(positions):
        out = _linear_axis(out, axis, p)
    return VoxelGrid(out.astype(np.float32), (t, t, t), grid.origin)


def znormalize(grid):
    """Zero-mean, unit population-SD intensities; near-constant volumes map to zeros."""
    x = grid.data.astype(np.float64)
    mu = x.mean()
    sd = x.std()
    if sd < 1e-8:
        out = np.zeros_like(x)
    else:
        out = (x - mu) / sd
    return VoxelGrid(out.astype(np.float32), grid.spacing, grid.origin)


def crop_offset(dims, crop_dims, rng):
    return tuple(rng.below(d - c + 1) for d, c in zip(dims, crop_dims))


def augment(grid, labels, spec):
    """Seeded random crop followed by independent per-axis flips (p = 0.5)."""
    if not grid.same_geometry(labels):
        raise ValueError("image and labels must share geometry")
    crop = tuple(int(c) for c in spec.crop_dims)
    if len(crop) != 3 or any(c < 1 or c > d for c, d in zip(crop, grid.dims)):
        raise ValueError(f"crop {crop} does not fit volume {grid.dims}")
    rng = Xoshiro256(spec.rng_seed)
    off = crop_offset(grid.dims, crop, rng)
    window = tuple(slice(o, o + c) for o, c in zip(off, crop))
    img = grid.data[window]
    lbl = labels.labels[window]
    for axis in sorted(spec.flip_axes):
        if rng.random() < 0.5:
            img = np.flip(img, axis)
            lbl = np.flip(lbl, axis)
    origin = tuple(o + i * s for o, i, s in zip(grid.origin, off, grid.spacing))
    return (
        VoxelGrid(img, grid.spacing, origin),
        LabelMap(lbl, labels.num_classes, labels.spacing, origin),
    )
