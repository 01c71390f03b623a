"""Lesion extraction and the rind / core / periphery partitions of the lung."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import EmptySegmentationError, ValidationError
from .volgrid import RegionLabels, Spacing, VoxelVolume, same_grid

N_LOBES = 5
RIGHT_LOBES = (1, 2, 3)
LEFT_LOBES = (4, 5)

OUTSIDE, CORE, RIND = 0, 1, 2


@dataclass(frozen=True)
class RegionParams:
    """Geometry and lesion-definition knobs shared by metrics and phantoms."""

    connectivity: int = 26
    min_lesion_voxels: int = 5
    rind_depth_mm: float = 10.0
    apex_fraction: float = 0.05
    mediastinal_halfwidth_mm: float = 20.0

    def __post_init__(self):
        if self.connectivity not in (6, 18, 26):
            raise ValidationError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.min_lesion_voxels < 1:
            raise ValidationError("min_lesion_voxels must be >= 1")
        if not self.rind_depth_mm > 0:
            raise ValidationError("rind_depth_mm must be > 0")
        if not 0 <= self.apex_fraction < 0.5:
            raise ValidationError("apex_fraction must lie in [0, 0.5)")
        if self.mediastinal_halfwidth_mm < 0:
            raise ValidationError("mediastinal_halfwidth_mm must be >= 0")


@dataclass(frozen=True)
class Lesion:
    id: int
    voxel_count: int
    volume_mm3: float
    mean_hu: float = float("nan")
    lobe_voxel_counts: tuple[int, ...] = (0,) * N_LOBES
    intersects_periphery: bool = False
    intersects_rind: bool = False

    @property
    def lobes_touched(self) -> frozenset[int]:
        return frozenset(k + 1 for k, c in enumerate(self.lobe_voxel_counts) if c > 0)

    @property
    def in_right(self) -> bool:
        return any(self.lobe_voxel_counts[k - 1] > 0 for k in RIGHT_LOBES)

    @property
    def in_left(self) -> bool:
        return any(self.lobe_voxel_counts[k - 1] > 0 for k in LEFT_LOBES)


@dataclass(frozen=True, eq=False)
class LesionSet:
    lesions: list[Lesion]
    component_labels: np.ndarray  # int32, 0 = no lesion, i = lesions[i - 1]
    spacing: Spacing

    def __len__(self):
        return len(self.lesions)

    def without(self, lesion_id: int) -> "LesionSet":
        """Drop one lesion, renumbering the rest in order."""
        keep = [les for les in self.lesions if les.id != lesion_id]
        remap = np.zeros(len(self.lesions) + 1, np.int32)
        for new_id, les in enumerate(keep, start=1):
            remap[les.id] = new_id
        lesions = [replace(les, id=i) for i, les in enumerate(keep, start=1)]
        return LesionSet(lesions, remap[self.component_labels], self.spacing)


@dataclass(frozen=True, eq=False)
class RegionPartition:
    labels: np.ndarray  # uint8: 0 outside, 1 core, 2 rind
    periphery: np.ndarray  # bool
    rind_depth_mm: float

    @property
    def rind(self) -> np.ndarray:
        return self.labels == RIND

    @property
    def core(self) -> np.ndarray:
        return self.labels == CORE


def lung_mask(lobes: RegionLabels) -> np.ndarray:
    lab = lobes.labels
    return (lab >= 1) & (lab <= N_LOBES)


def connected_components(disease, connectivity: int = 26, min_lesion_voxels: int = 5) -> LesionSet:
    """Split a binary mask into lesions, dropping components below ``min_lesion_voxels``."""
    if isinstance(disease, RegionLabels):
        mask, spacing = disease.labels != 0, disease.spacing
    else:
        mask, spacing = np.asarray(disease) != 0, Spacing(1.0, 1.0, 1.0)
    comp, n = _kernels.label_components(mask, connectivity)
    counts = np.bincount(comp.ravel(), minlength=n + 1)
    keep = np.flatnonzero(counts[1:] >= min_lesion_voxels) + 1
    remap = np.zeros(n + 1, np.int32)
    remap[keep] = np.arange(1, len(keep) + 1, dtype=np.int32)
    comp = remap[comp]
    vv = spacing.voxel_volume
    lesions = [
        Lesion(id=i, voxel_count=int(counts[old]), volume_mm3=float(counts[old]) * vv)
        for i, old in enumerate(keep, start=1)
    ]
    return LesionSet(lesions, comp, spacing)


def surface_distance_field(lobes: RegionLabels, spacing=None) -> np.ndarray:
    """Distance in mm from each lung voxel centre to the nearest non-lung voxel centre.

    The grid is treated as surrounded by non-lung. Non-lung voxels get 0.
    """
    spacing = Spacing.of(spacing) if spacing is not None else lobes.spacing
    lung = lung_mask(lobes)
    if not lung.any():
        raise EmptySegmentationError("lung segmentation is empty")
    padded = np.pad(~lung, 1, constant_values=True)
    d2 = _kernels.squared_edt(padded, spacing.as_tuple())[1:-1, 1:-1, 1:-1]
    return np.where(lung, np.sqrt(d2), 0.0)


def partition_rind_core(lobes: RegionLabels, spacing=None, rind_depth_mm: float = 10.0,
                        distance: np.ndarray | None = None) -> np.ndarray:
    """Label grid: 0 outside lung, 1 core, 2 rind (within ``rind_depth_mm`` of the surface)."""
    if not rind_depth_mm > 0:
        raise ValidationError("rind_depth_mm must be > 0")
    if distance is None:
        distance = surface_distance_field(lobes, spacing)
    lung = lung_mask(lobes)
    out = np.zeros(lung.shape, np.uint8)
    out[lung] = CORE
    out[lung & (distance <= rind_depth_mm)] = RIND
    return out


def periphery_mask(lobes: RegionLabels, spacing=None, rind_depth_mm: float = 10.0,
                   apex_fraction: float = 0.05, mediastinal_halfwidth_mm: float = 20.0,
                   partition: np.ndarray | None = None) -> np.ndarray:
    """Rind minus each lung's apex slab and minus a band around the mid-plane between the lungs.

    The apex slab is the top ``apex_fraction`` of each lung's own z-extent
    (high z = cranial). The mid-plane sits halfway between the two lungs'
    x-centroids; rind voxels strictly closer than ``mediastinal_halfwidth_mm``
    to it are removed. With a single lung present the mediastinal rule is skipped.
    """
    if not 0 <= apex_fraction < 0.5:
        raise ValidationError("apex_fraction must lie in [0, 0.5)")
    spacing = Spacing.of(spacing) if spacing is not None else lobes.spacing
    if partition is None:
        partition = partition_rind_core(lobes, spacing, rind_depth_mm)
    periphery = partition == RIND
    lab = lobes.labels
    nz = lab.shape[0]
    z = np.arange(nz)
    centroids = []
    for side in (RIGHT_LOBES, LEFT_LOBES):
        side_mask = np.isin(lab, side)
        if not side_mask.any():
            continue
        zs = np.flatnonzero(side_mask.any(axis=(1, 2)))
        zmin, zmax = zs[0], zs[-1]
        extent = zmax - zmin + 1
        apex = (z - zmin) >= (1.0 - apex_fraction) * extent
        periphery &= ~(side_mask & apex[:, None, None])
        centroids.append(np.nonzero(side_mask)[2].mean() * spacing.dx)
    if len(centroids) == 2 and mediastinal_halfwidth_mm > 0:
        mid = 0.5 * (centroids[0] + centroids[1])
        x_mm = np.arange(lab.shape[2]) * spacing.dx
        band = np.abs(x_mm - mid) < mediastinal_halfwidth_mm
        periphery &= ~band[None, None, :]
    return periphery


def build_partition(lobes: RegionLabels, params: RegionParams) -> RegionPartition:
    dist = surface_distance_field(lobes)
    labels = partition_rind_core(lobes, rind_depth_mm=params.rind_depth_mm, distance=dist)
    periph = periphery_mask(lobes, apex_fraction=params.apex_fraction,
                            mediastinal_halfwidth_mm=params.mediastinal_halfwidth_mm,
                            partition=labels)
    return RegionPartition(labels, periph, params.rind_depth_mm)


def annotate_lesions(lesions: LesionSet, ct: VoxelVolume, lobes: RegionLabels,
                     partition: RegionPartition) -> LesionSet:
    """Fill in mean HU, per-lobe voxel counts and rind / periphery intersection flags."""
    same_grid(ct, lobes)
    comp = lesions.component_labels
    if comp.shape != ct.dims or partition.labels.shape != ct.dims or partition.periphery.shape != ct.dims:
        raise ValidationError("lesion, CT, lobe and partition grids must share dims")
    n = len(lesions)
    if n == 0:
        return lesions
    flat = comp.ravel().astype(np.int64)
    sel = flat > 0
    ids = flat[sel]
    hu = ct.data.ravel()[sel].astype(np.float64)
    counts = np.bincount(ids, minlength=n + 1)
    hu_sum = np.bincount(ids, weights=hu, minlength=n + 1)
    lobe = lobes.labels.ravel()[sel].astype(np.int64)
    lobe_counts = np.bincount(ids * (N_LOBES + 1) + lobe, minlength=(n + 1) * (N_LOBES + 1))
    lobe_counts = lobe_counts.reshape(n + 1, N_LOBES + 1)
    in_rind = np.bincount(ids, weights=partition.labels.ravel()[sel] == RIND, minlength=n + 1)
    in_periph = np.bincount(ids, weights=partition.periphery.ravel()[sel], minlength=n + 1)
    out = []
    for les in lesions.lesions:
        i = les.id
        out.append(replace(
            les,
            mean_hu=float(hu_sum[i] / counts[i]),
            lobe_voxel_counts=tuple(int(c) for c in lobe_counts[i, 1:]),
            intersects_rind=bool(in_rind[i] > 0),
            intersects_periphery=bool(in_periph[i] > 0),
        ))
    return LesionSet(out, comp, lesions.spacing)


def extract_lesions(ct: VoxelVolume, lobes: RegionLabels, disease: RegionLabels,
                    params: RegionParams = RegionParams()) -> tuple[LesionSet, RegionPartition]:
    """Components of the in-lung disease mask, annotated against the lung partitions."""
    same_grid(ct, lobes, disease)
    lung = lung_mask(lobes)
    if not lung.any():
        raise EmptySegmentationError("lung segmentation is empty")
    in_lung = RegionLabels((disease.labels != 0) & lung, disease.spacing)
    lesions = connected_components(in_lung, params.connectivity, params.min_lesion_voxels)
    partition = build_partition(lobes, params)
    return annotate_lesions(lesions, ct, lobes, partition), partition
