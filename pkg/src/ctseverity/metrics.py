"""The 32 airspace-disease severity metrics for one case."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .lesions import (
    LEFT_LOBES,
    N_LOBES,
    RIGHT_LOBES,
    LesionSet,
    RegionParams,
    extract_lesions,
    lung_mask,
)
from .volgrid import RegionLabels, VoxelVolume

LOBE_NAMES = ("right_upper", "right_middle", "right_lower", "left_upper", "left_lower")

# mean-HU class boundaries
HIGH_OPACITY_HU = -200.0
VESSEL_HU = 50.0

METRIC_NAMES = (
    ("po_lungs",) + tuple(f"po_{n}" for n in LOBE_NAMES)
    + ("pho_lungs",) + tuple(f"pho_{n}" for n in LOBE_NAMES)
    + ("phob_lungs",) + tuple(f"phob_{n}" for n in LOBE_NAMES)
    + (
        "lss",
        "lhos",
        "lhos_novessel",
        "bilaterality",
        "affected_lobes",
        "n_lesions",
        "n_peripheral",
        "n_rind",
        "n_core",
        "pct_peripheral_distribution",
        "pct_vol_peripheral",
        "pct_vol_rind",
        "pct_vol_core",
        "pct_ggo",
    )
)
assert len(METRIC_NAMES) == 32

COUNT_METRICS = (
    "lss", "lhos", "lhos_novessel", "bilaterality", "affected_lobes",
    "n_lesions", "n_peripheral", "n_rind", "n_core",
)
PERCENT_METRICS = tuple(n for n in METRIC_NAMES if n not in COUNT_METRICS)

# features selected on the clinical cohort; used as the default M1 input
CANONICAL_FEATURES = (
    "pct_ggo", "po_lungs", "pct_vol_peripheral", "pct_vol_rind", "po_right_lower", "po_left_lower",
)


@dataclass
class SeverityVector:
    """Metric values keyed by name, in table order, plus the voxel counts behind them.

    Absent metrics (a lobe missing from the segmentation) are ``nan``.
    """

    values: dict
    counts: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values[name]

    def as_list(self) -> list:
        return [self.values[n] for n in METRIC_NAMES]

    def as_array(self) -> np.ndarray:
        return np.array([float(v) for v in self.as_list()], dtype=np.float64)


def percent_opacity(affected: int, total: int) -> float:
    """``100 * affected / total``; ``nan`` marks an empty scope."""
    if total <= 0:
        return float("nan")
    return 100.0 * affected / total


def is_high_opacity(mean_hu: float) -> bool:
    return mean_hu > HIGH_OPACITY_HU


def is_high_opacity_novessel(mean_hu: float) -> bool:
    return HIGH_OPACITY_HU < mean_hu <= VESSEL_HU


def is_ggo(mean_hu: float) -> bool:
    # -200 itself counts as GGO so GGO and high opacity partition the disease
    return mean_hu <= HIGH_OPACITY_HU


def lobe_score(po: float) -> float:
    """Bucket a lobar percentage into 0..4 using (0,25], (25,50], (50,75], (75,100]."""
    if isinstance(po, float) and math.isnan(po):
        return float("nan")
    if po <= 0:
        return 0
    if po <= 25:
        return 1
    if po <= 50:
        return 2
    if po <= 75:
        return 3
    return 4


def _score_sum(per_lobe) -> float:
    scores = [lobe_score(p) for p in per_lobe]
    if any(isinstance(s, float) and math.isnan(s) for s in scores):
        return float("nan")
    return int(sum(scores))


def lung_scores(po_lobe, pho_lobe, phob_lobe):
    """``(lss, lhos, lhos_novessel)``; ``nan`` if any lobe is absent."""
    return _score_sum(po_lobe), _score_sum(pho_lobe), _score_sum(phob_lobe)


def _lesion_voxels(lesions, pred=None, lobe=None) -> int:
    total = 0
    for les in lesions:
        if pred is not None and not pred(les.mean_hu):
            continue
        total += les.voxel_count if lobe is None else les.lobe_voxel_counts[lobe - 1]
    return total


def percent_high_opacity(lesions, lung_voxels: int, lobe: int | None = None,
                         variant: str = "A") -> float:
    """Share of the scope covered by lesions whose mean HU marks them high opacity.

    Variant ``"A"`` uses mean HU > -200, ``"B"`` uses -200 < mean HU <= 50.
    For a lobe scope only the lesion's voxels inside that lobe count.
    """
    pred = is_high_opacity if variant == "A" else is_high_opacity_novessel
    return percent_opacity(_lesion_voxels(lesions, pred, lobe), lung_voxels)


def percent_ggo(lesions, lung_voxels: int, lobe: int | None = None) -> float:
    return percent_opacity(_lesion_voxels(lesions, is_ggo, lobe), lung_voxels)


def topology_metrics(lesions) -> dict:
    n = len(lesions)
    n_periph = sum(1 for les in lesions if les.intersects_periphery)
    n_rind = sum(1 for les in lesions if les.intersects_rind)
    right = any(les.in_right for les in lesions)
    left = any(les.in_left for les in lesions)
    touched = set()
    for les in lesions:
        touched |= les.lobes_touched
    return {
        "bilaterality": bool(right and left),
        "affected_lobes": len(touched),
        "n_lesions": n,
        "n_peripheral": n_periph,
        "n_rind": n_rind,
        "n_core": n - n_rind,
        "pct_peripheral_distribution": 100.0 * n_periph / n if n else 0.0,
    }


def region_volume_metrics(lesions, lung_voxels: int) -> dict:
    """Whole-lesion volume attributed by the periphery / rind / core flags."""
    periph = sum(les.voxel_count for les in lesions if les.intersects_periphery)
    rind = sum(les.voxel_count for les in lesions if les.intersects_rind)
    core = sum(les.voxel_count for les in lesions if not les.intersects_rind)
    return {
        "pct_vol_peripheral": percent_opacity(periph, lung_voxels),
        "pct_vol_rind": percent_opacity(rind, lung_voxels),
        "pct_vol_core": percent_opacity(core, lung_voxels),
    }


def severity_from_lesions(lesions, lobe_voxels) -> SeverityVector:
    """Assemble the full vector from annotated lesions and per-lobe lung voxel counts."""
    lesions = list(lesions)
    lobe_voxels = [int(c) for c in lobe_voxels]
    lung_voxels = sum(lobe_voxels)
    v = {}
    v["po_lungs"] = percent_opacity(_lesion_voxels(lesions), lung_voxels)
    for k, name in enumerate(LOBE_NAMES, start=1):
        v[f"po_{name}"] = percent_opacity(_lesion_voxels(lesions, lobe=k), lobe_voxels[k - 1])
    v["pho_lungs"] = percent_high_opacity(lesions, lung_voxels, variant="A")
    for k, name in enumerate(LOBE_NAMES, start=1):
        v[f"pho_{name}"] = percent_high_opacity(lesions, lobe_voxels[k - 1], lobe=k, variant="A")
    v["phob_lungs"] = percent_high_opacity(lesions, lung_voxels, variant="B")
    for k, name in enumerate(LOBE_NAMES, start=1):
        v[f"phob_{name}"] = percent_high_opacity(lesions, lobe_voxels[k - 1], lobe=k, variant="B")
    lss, lhos, lhos_nv = lung_scores(
        [v[f"po_{n}"] for n in LOBE_NAMES],
        [v[f"pho_{n}"] for n in LOBE_NAMES],
        [v[f"phob_{n}"] for n in LOBE_NAMES],
    )
    v["lss"], v["lhos"], v["lhos_novessel"] = lss, lhos, lhos_nv
    v.update(topology_metrics(lesions))
    v.update(region_volume_metrics(lesions, lung_voxels))
    v["pct_ggo"] = percent_ggo(lesions, lung_voxels)
    counts = {
        "lung_voxels": lung_voxels,
        "lobe_voxels": lobe_voxels,
        "disease_voxels": _lesion_voxels(lesions),
        "high_voxels": _lesion_voxels(lesions, is_high_opacity),
        "high_novessel_voxels": _lesion_voxels(lesions, is_high_opacity_novessel),
        "ggo_voxels": _lesion_voxels(lesions, is_ggo),
        "peripheral_voxels": sum(les.voxel_count for les in lesions if les.intersects_periphery),
        "rind_lesion_voxels": sum(les.voxel_count for les in lesions if les.intersects_rind),
        "core_lesion_voxels": sum(les.voxel_count for les in lesions if not les.intersects_rind),
    }
    return SeverityVector({n: v[n] for n in METRIC_NAMES}, counts)


def compute_all(ct: VoxelVolume, lobes: RegionLabels, disease: RegionLabels,
                params: RegionParams = RegionParams()) -> SeverityVector:
    lesions, partition = extract_lesions(ct, lobes, disease, params)
    lobe_voxels = np.bincount(lobes.labels[lung_mask(lobes)].ravel(), minlength=N_LOBES + 1)[1:]
    sv = severity_from_lesions(lesions.lesions, lobe_voxels)
    sv.counts["rind_voxels"] = int(partition.rind.sum())
    sv.counts["core_voxels"] = int(partition.core.sum())
    sv.counts["periphery_voxels"] = int(partition.periphery.sum())
    return sv


def format_value(value) -> str:
    """CSV cell text: ``NA`` for absent, ``0``/``1`` for booleans, ``repr`` for floats."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return "NA"
    return repr(value)
