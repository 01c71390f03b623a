"""Volumetric containers, resampling, crop/pad and the on-disk grid format.

Arrays are indexed ``[z, y, x]`` (x fastest in memory). A grid on disk is a
pair of files ``<name>.json`` (header) and ``<name>.raw`` (little-endian
payload, C order).
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptySegmentationError, ValidationError

HU_MIN, HU_MAX = -2048, 4096
HU_FILL = -1024

_DTYPES = {"int16": np.dtype("<i2"), "float32": np.dtype("<f4"), "uint8": np.dtype("u1")}
_KIND_DTYPE = {"hounsfield": "int16", "probability": "float32", "labels": "uint8"}


@dataclass(frozen=True)
class Spacing:
    """Voxel size in mm along (z, y, x)."""

    dz: float
    dy: float
    dx: float

    def __post_init__(self):
        for v in (self.dz, self.dy, self.dx):
            if not (math.isfinite(v) and v > 0):
                raise ValidationError(f"spacing must be positive and finite, got {self.as_tuple()}")

    @classmethod
    def of(cls, value) -> "Spacing":
        if isinstance(value, Spacing):
            return value
        dz, dy, dx = (float(v) for v in value)
        return cls(dz, dy, dx)

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.dz, self.dy, self.dx)

    @property
    def voxel_volume(self) -> float:
        return self.dz * self.dy * self.dx


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.ascontiguousarray(arr)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class VoxelVolume:
    """Scalar grid: Hounsfield units or probabilities."""

    data: np.ndarray
    spacing: Spacing
    kind: str = "hounsfield"

    def __post_init__(self):
        if self.kind not in ("hounsfield", "probability"):
            raise ValidationError(f"unknown volume kind {self.kind!r}")
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValidationError(f"volume must be a non-empty 3D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValidationError("volume contains non-finite values")
        if self.kind == "hounsfield":
            if data.min() < HU_MIN or data.max() > HU_MAX:
                raise ValidationError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
        elif data.min() < 0 or data.max() > 1:
            raise ValidationError("probability values outside [0, 1]")
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "data", _freeze(data))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class RegionLabels:
    """Small-integer label grid (lobes, disease mask or region partition)."""

    labels: np.ndarray
    spacing: Spacing

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 3 or min(labels.shape) < 1:
            raise ValidationError(f"labels must be a non-empty 3D array, got shape {labels.shape}")
        if labels.dtype != np.uint8:
            if labels.size and (labels.min() < 0 or labels.max() > 255):
                raise ValidationError("label values must fit in uint8")
            labels = labels.astype(np.uint8)
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class BoundingBox:
    """Inclusive per-axis voxel index ranges ``((zlo, zhi), (ylo, yhi), (xlo, xhi))``."""

    ranges: tuple[tuple[int, int], tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        if len(self.ranges) != 3:
            raise ValidationError("bounding box needs three axes")
        for lo, hi in self.ranges:
            if lo < 0 or hi < lo:
                raise ValidationError(f"invalid bounding box {self.ranges}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(hi - lo + 1 for lo, hi in self.ranges)

    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(lo, hi + 1) for lo, hi in self.ranges)

    def within(self, dims) -> bool:
        return all(hi < n for (lo, hi), n in zip(self.ranges, dims))


# ---------------------------------------------------------------------------
# file format
# ---------------------------------------------------------------------------

def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def save_volume(grid: VoxelVolume | RegionLabels, path) -> None:
    """Write ``<path>.json`` and ``<path>.raw``."""
    header_path, raw_path = _paths(path)
    if isinstance(grid, RegionLabels):
        kind, arr = "labels", grid.labels
    else:
        kind, arr = grid.kind, grid.data
    dtype_name = _KIND_DTYPE[kind]
    if kind == "hounsfield":
        rounded = np.rint(arr)
        arr = rounded.astype(_DTYPES[dtype_name])
    else:
        arr = np.asarray(arr, dtype=_DTYPES[dtype_name])
    header = {
        "dims": [int(n) for n in arr.shape],
        "spacing_mm": [float(s) for s in grid.spacing.as_tuple()],
        "dtype": dtype_name,
        "kind": kind,
    }
    try:
        header_path.parent.mkdir(parents=True, exist_ok=True)
        raw_path.write_bytes(np.ascontiguousarray(arr).tobytes(order="C"))
        header_path.write_text(json.dumps(header, indent=1) + "\n")
    except OSError as exc:
        raise ValidationError(f"cannot write grid to {path}: {exc}") from exc


def load_volume(path) -> VoxelVolume | RegionLabels:
    header_path, raw_path = _paths(path)
    if not header_path.exists():
        raise ValidationError(f"missing header file {header_path}")
    if not raw_path.exists():
        raise ValidationError(f"missing payload file {raw_path}")
    try:
        header = json.loads(header_path.read_text())
        dims = tuple(int(n) for n in header["dims"])
        spacing = header["spacing_mm"]
        dtype_name = header["dtype"]
        kind = header["kind"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed header {header_path}: {exc}") from exc
    if dtype_name not in _DTYPES:
        raise ValidationError(f"unknown dtype {dtype_name!r}")
    if kind not in _KIND_DTYPE:
        raise ValidationError(f"unknown kind {kind!r}")
    if _KIND_DTYPE[kind] != dtype_name:
        raise ValidationError(f"kind {kind!r} must be stored as {_KIND_DTYPE[kind]}, got {dtype_name}")
    if len(dims) != 3 or min(dims) < 1:
        raise ValidationError(f"invalid dims {dims}")
    if len(spacing) != 3:
        raise ValidationError("spacing_mm needs three values")
    spacing = Spacing.of(spacing)
    dtype = _DTYPES[dtype_name]
    payload = raw_path.read_bytes()
    expected = dims[0] * dims[1] * dims[2] * dtype.itemsize
    if len(payload) != expected:
        raise ValidationError(
            f"payload size mismatch for {raw_path}: {len(payload)} bytes, expected {expected} for dims {dims}"
        )
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    if kind == "labels":
        return RegionLabels(arr.copy(), spacing)
    return VoxelVolume(arr.copy(), spacing, kind)


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _target_dims(dims, src: Spacing, dst: Spacing) -> tuple[int, int, int]:
    out = []
    for n, s_in, s_out in zip(dims, src.as_tuple(), dst.as_tuple()):
        out.append(max(1, int(math.floor(n * s_in / s_out + 0.5))))
    return tuple(out)


def _source_coords(n_out: int, s_in: float, s_out: float) -> np.ndarray:
    # continuous source index of each output voxel centre
    return (np.arange(n_out) + 0.5) * (s_out / s_in) - 0.5


def resample_trilinear(vol: VoxelVolume, target) -> VoxelVolume:
    """Trilinear resampling onto ``target`` spacing, clamping at the edges."""
    target = Spacing.of(target)
    src = vol.spacing
    if src == target:
        return vol
    out_dims = _target_dims(vol.dims, src, target)
    arr = vol.data.astype(np.float64)
    for axis, (n_in, n_out, s_in, s_out) in enumerate(
        zip(vol.dims, out_dims, src.as_tuple(), target.as_tuple())
    ):
        pos = np.clip(_source_coords(n_out, s_in, s_out), 0, n_in - 1)
        i0 = np.floor(pos).astype(np.intp)
        i1 = np.minimum(i0 + 1, n_in - 1)
        w = pos - i0
        shape = [1, 1, 1]
        shape[axis] = n_out
        w = w.reshape(shape)
        arr = np.take(arr, i0, axis=axis) * (1 - w) + np.take(arr, i1, axis=axis) * w
    if vol.kind == "probability":
        arr = np.clip(arr, 0.0, 1.0)
    return VoxelVolume(arr, target, vol.kind)


def nearest_indices(n_out: int, n_in: int, s_in: float, s_out: float) -> np.ndarray:
    """Source voxel containing each output voxel centre."""
    pos = (np.arange(n_out) + 0.5) * (s_out / s_in)
    return np.clip(np.floor(pos).astype(np.intp), 0, n_in - 1)


def resample_nearest(labels: RegionLabels, target) -> RegionLabels:
    target = Spacing.of(target)
    src = labels.spacing
    if src == target:
        return labels
    out_dims = _target_dims(labels.dims, src, target)
    idx = [
        nearest_indices(n_out, n_in, s_in, s_out)
        for n_in, n_out, s_in, s_out in zip(labels.dims, out_dims, src.as_tuple(), target.as_tuple())
    ]
    out = labels.labels[np.ix_(*idx)]
    return RegionLabels(out, target)


# ---------------------------------------------------------------------------
# crop / pad
# ---------------------------------------------------------------------------

def default_fill(grid) -> float:
    if isinstance(grid, RegionLabels):
        return 0
    return HU_FILL if grid.kind == "hounsfield" else 0.0


def crop_pad_to(grid, bbox: BoundingBox, out_dims, fill=None):
    """Centre the ``bbox`` region of ``grid`` in an array of ``out_dims``.

    Regions larger than ``out_dims`` are centre-cropped; the rest of the output
    takes ``fill`` (HU -1024, label 0, probability 0 by default).
    """
    out_dims = tuple(int(n) for n in out_dims)
    if len(out_dims) != 3 or min(out_dims) < 1:
        raise ValidationError(f"out_dims must be three positive sizes, got {out_dims}")
    if not bbox.within(grid.dims):
        raise ValidationError(f"bounding box {bbox.ranges} outside grid dims {grid.dims}")
    if fill is None:
        fill = default_fill(grid)
    src_arr = grid.labels if isinstance(grid, RegionLabels) else grid.data
    out = np.full(out_dims, fill, dtype=src_arr.dtype)
    src_sl, dst_sl = [], []
    for (lo, hi), n_out in zip(bbox.ranges, out_dims):
        size = hi - lo + 1
        length = min(size, n_out)
        s0 = lo + max(0, (size - n_out) // 2)
        d0 = max(0, (n_out - size) // 2)
        src_sl.append(slice(s0, s0 + length))
        dst_sl.append(slice(d0, d0 + length))
    out[tuple(dst_sl)] = src_arr[tuple(src_sl)]
    if isinstance(grid, RegionLabels):
        return RegionLabels(out, grid.spacing)
    return VoxelVolume(out, grid.spacing, grid.kind)


def lung_bounding_box(lobes: RegionLabels) -> BoundingBox:
    lung = (lobes.labels >= 1) & (lobes.labels <= 5)
    if not lung.any():
        raise EmptySegmentationError("lung segmentation is empty")
    ranges = []
    for axis in range(3):
        other = tuple(a for a in range(3) if a != axis)
        hit = np.flatnonzero(lung.any(axis=other))
        ranges.append((int(hit[0]), int(hit[-1])))
    return BoundingBox(tuple(ranges))


def same_grid(*grids) -> None:
    """Raise unless all grids share dims (and spacing)."""
    first = grids[0]
    for g in grids[1:]:
        if g.dims != first.dims:
            raise ValidationError(f"grid dims mismatch: {first.dims} vs {g.dims}")
        if g.spacing != first.spacing:
            raise ValidationError(f"grid spacing mismatch: {first.spacing} vs {g.spacing}")


def ensure_dir(path) -> Path:
    p = Path(path)
    os.makedirs(p, exist_ok=True)
    return p
