"""Synthetic chest phantoms with exactly known region and lesion counts.

Lungs are axis-aligned ellipsoids split into z-slabs (three right lobes, two
left lobes, upper lobe at high z). Lesions are balls painted inside a lung.
The ground truth is enumerated directly from the generated grids with
scipy's labelling and distance transform, so it shares no code with the
measurement path in :mod:`ctseverity.lesions`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .lesions import N_LOBES, RegionParams
from .metrics import (
    HIGH_OPACITY_HU,
    LOBE_NAMES,
    METRIC_NAMES,
    VESSEL_HU,
    SeverityVector,
    lobe_score,
)
from .volgrid import RegionLabels, Spacing, VoxelVolume

AIR_HU = -1000
PARENCHYMA_HU = -850
TEXTURE_DEFAULT_HU = {"ggo": -500.0, "consolidation": -50.0}

_SIDE_LOBES = {"right": (1, 2, 3), "left": (4, 5)}


@dataclass(frozen=True)
class LungSpec:
    side: str
    center_mm: tuple[float, float, float]
    radii_mm: tuple[float, float, float]
    lobe_fractions: tuple[float, ...]  # upper lobe first

    def __post_init__(self):
        if self.side not in _SIDE_LOBES:
            raise ValidationError(f"lung side must be 'right' or 'left', got {self.side!r}")
        if len(self.lobe_fractions) != len(_SIDE_LOBES[self.side]):
            raise ValidationError(f"{self.side} lung needs {len(_SIDE_LOBES[self.side])} lobe fractions")
        if any(f <= 0 for f in self.lobe_fractions) or not math.isclose(sum(self.lobe_fractions), 1.0):
            raise ValidationError("lobe fractions must be positive and sum to 1")
        if any(r <= 0 for r in self.radii_mm):
            raise ValidationError("lung radii must be positive")


@dataclass(frozen=True)
class LesionSpec:
    center_mm: tuple[float, float, float]
    radius_mm: float
    texture: str = "ggo"
    mean_hu: float | None = None
    jitter_hu: float = 20.0

    def __post_init__(self):
        if self.texture not in TEXTURE_DEFAULT_HU:
            raise ValidationError(f"unknown texture {self.texture!r}")
        if self.radius_mm <= 0 or self.jitter_hu < 0:
            raise ValidationError("lesion radius must be positive and jitter non-negative")
        lo, hi = self.target_hu - self.jitter_hu, self.target_hu + self.jitter_hu
        # one HU of margin survives rounding to int16
        if self.texture == "ggo" and not hi <= HIGH_OPACITY_HU - 1:
            raise ValidationError("ggo lesion HU range must stay below -200")
        if self.texture == "consolidation" and not (lo >= HIGH_OPACITY_HU + 1 and hi <= VESSEL_HU):
            raise ValidationError("consolidation lesion HU range must stay within (-200, 50]")

    @property
    def target_hu(self) -> float:
        return TEXTURE_DEFAULT_HU[self.texture] if self.mean_hu is None else float(self.mean_hu)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int]
    spacing: Spacing
    lungs: tuple[LungSpec, ...]
    lesions: tuple[LesionSpec, ...] = ()
    parenchyma_jitter_hu: float = 40.0
    prob_blur_mm: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "spacing", Spacing.of(self.spacing))
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        object.__setattr__(self, "lungs", tuple(self.lungs))
        object.__setattr__(self, "lesions", tuple(self.lesions))
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValidationError(f"invalid phantom dims {self.dims}")
        sides = [lung.side for lung in self.lungs]
        if len(set(sides)) != len(sides):
            raise ValidationError("at most one lung per side")

    def to_json(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing_mm": list(self.spacing.as_tuple()),
            "lungs": [asdict(lung) for lung in self.lungs],
            "lesions": [asdict(les) for les in self.lesions],
            "parenchyma_jitter_hu": self.parenchyma_jitter_hu,
            "prob_blur_mm": self.prob_blur_mm,
        }

    @classmethod
    def from_json(cls, d: dict) -> "PhantomSpec":
        try:
            lungs = [LungSpec(lg["side"], tuple(lg["center_mm"]), tuple(lg["radii_mm"]),
                              tuple(lg["lobe_fractions"])) for lg in d["lungs"]]
            lesions = [LesionSpec(tuple(ls["center_mm"]), float(ls["radius_mm"]), ls.get("texture", "ggo"),
                                  ls.get("mean_hu"), float(ls.get("jitter_hu", 20.0)))
                       for ls in d.get("lesions", [])]
            return cls(tuple(d["dims"]), Spacing.of(d["spacing_mm"]), tuple(lungs), tuple(lesions),
                       float(d.get("parenchyma_jitter_hu", 40.0)), float(d.get("prob_blur_mm", 0.0)))
        except (KeyError, TypeError) as exc:
            raise ValidationError(f"malformed phantom spec: {exc}") from exc


@dataclass(frozen=True)
class TruthLesion:
    voxel_count: int
    lobe_voxel_counts: tuple[int, ...]
    mean_hu: float
    texture: str
    rind_voxels: int
    periphery_voxels: int


@dataclass(frozen=True)
class PhantomTruth:
    lobe_voxels: tuple[int, ...]
    lesions: tuple[TruthLesion, ...]
    rind_voxels: int
    core_voxels: int
    periphery_voxels: int
    lung_bbox: tuple[tuple[int, int], ...]
    params: RegionParams = field(default_factory=RegionParams)

    @property
    def lung_voxels(self) -> int:
        return sum(self.lobe_voxels)

    def to_json(self) -> dict:
        d = asdict(self)
        d["lung_voxels"] = self.lung_voxels
        return d


def _coords_mm(dims, spacing: Spacing):
    return [np.arange(n) * s for n, s in zip(dims, spacing.as_tuple())]


def _ellipsoid(dims, spacing, center, radii) -> np.ndarray:
    z, y, x = _coords_mm(dims, spacing)
    return (
        ((z - center[0]) / radii[0]) ** 2
    )[:, None, None] + (((y - center[1]) / radii[1]) ** 2)[None, :, None] + (
        ((x - center[2]) / radii[2]) ** 2
    )[None, None, :] <= 1.0


def _ball(dims, spacing, center, radius) -> np.ndarray:
    z, y, x = _coords_mm(dims, spacing)
    d2 = ((z - center[0]) ** 2)[:, None, None] + ((y - center[1]) ** 2)[None, :, None] + (
        (x - center[2]) ** 2)[None, None, :]
    return d2 <= radius * radius


def _lobe_grid(spec: PhantomSpec) -> np.ndarray:
    lobes = np.zeros(spec.dims, np.uint8)
    z_mm = _coords_mm(spec.dims, spec.spacing)[0]
    for lung in spec.lungs:
        mask = _ellipsoid(spec.dims, spec.spacing, lung.center_mm, lung.radii_mm)
        if (lobes[mask] != 0).any():
            raise ValidationError("lungs overlap")
        bottom = lung.center_mm[0] - lung.radii_mm[0]
        height = 2.0 * lung.radii_mm[0]
        labels = _SIDE_LOBES[lung.side]
        # walk from the lowest lobe upward
        upper_edge = bottom
        slab_of_z = np.full(len(z_mm), labels[0], np.uint8)
        for frac, lab in zip(reversed(lung.lobe_fractions), reversed(labels)):
            lo = upper_edge
            upper_edge = lo + frac * height
            slab_of_z[(z_mm >= lo) & (z_mm < upper_edge)] = lab
        slab_of_z[z_mm < bottom] = labels[-1]
        lobes[mask] = np.broadcast_to(slab_of_z[:, None, None], spec.dims)[mask]
    return lobes


def _structure(connectivity: int) -> np.ndarray:
    return ndimage.generate_binary_structure(3, {6: 1, 18: 2, 26: 3}[connectivity])


def _truth_regions(lobes: np.ndarray, spacing: Spacing, params: RegionParams):
    lung = lobes > 0
    padded = np.pad(lung, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=spacing.as_tuple())[1:-1, 1:-1, 1:-1]
    rind = lung & (dist <= params.rind_depth_mm)
    core = lung & ~rind
    periphery = rind.copy()
    centroid_x = []
    for side, labs in _SIDE_LOBES.items():
        side_mask = np.isin(lobes, labs)
        zz, _, xx = np.nonzero(side_mask)
        if zz.size == 0:
            continue
        zmin, zmax = int(zz.min()), int(zz.max())
        cutoff = zmin + (1.0 - params.apex_fraction) * (zmax - zmin + 1)
        for z in range(zmin, zmax + 1):
            if z >= cutoff:
                periphery[z][side_mask[z]] = False
        centroid_x.append(xx.mean() * spacing.dx)
    if len(centroid_x) == 2 and params.mediastinal_halfwidth_mm > 0:
        mid = (centroid_x[0] + centroid_x[1]) / 2.0
        for x in range(lobes.shape[2]):
            if abs(x * spacing.dx - mid) < params.mediastinal_halfwidth_mm:
                periphery[:, :, x] = False
    return rind, core, periphery


def generate_phantom(spec: PhantomSpec, seed: int, params: RegionParams = RegionParams()):
    """Build ``(ct, lobes, disease, prob, truth)`` for ``spec``; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    dims, spacing = spec.dims, spec.spacing
    lobes = _lobe_grid(spec)
    lung = lobes > 0
    ct = np.full(dims, AIR_HU, np.float64)
    jit = spec.parenchyma_jitter_hu
    ct[lung] = PARENCHYMA_HU + rng.uniform(-jit, jit, size=int(lung.sum()))

    disease = np.zeros(dims, bool)
    texture_of = np.zeros(dims, np.int8)  # 1 ggo, 2 consolidation
    for les in spec.lesions:
        ball = _ball(dims, spacing, les.center_mm, les.radius_mm)
        if not ball.any():
            raise ValidationError(f"lesion at {les.center_mm} covers no voxel centre")
        if not lung[ball].all():
            raise ValidationError(f"lesion at {les.center_mm} extends outside the lung")
        sides = {s for s, labs in _SIDE_LOBES.items() if np.isin(lobes[ball], labs).any()}
        if len(sides) != 1:
            raise ValidationError(f"lesion at {les.center_mm} spans both lungs")
        code = 1 if les.texture == "ggo" else 2
        if ((texture_of[ball] != 0) & (texture_of[ball] != code)).any():
            raise ValidationError("overlapping lesions of different texture")
        texture_of[ball] = code
        disease |= ball
        t, j = les.target_hu, les.jitter_hu
        ct[ball] = t + rng.uniform(-j, j, size=int(ball.sum()))
    ct = np.rint(ct).astype(np.int16)

    comp, n_comp = ndimage.label(disease, structure=_structure(params.connectivity))
    rind, core, periphery = _truth_regions(lobes, spacing, params)
    truth_lesions = []
    for i in range(1, n_comp + 1):
        m = comp == i
        textures = set(np.unique(texture_of[m]).tolist())
        if len(textures) != 1:
            raise ValidationError("lesions of different texture touch")
        truth_lesions.append(TruthLesion(
            voxel_count=int(m.sum()),
            lobe_voxel_counts=tuple(int((m & (lobes == k)).sum()) for k in range(1, N_LOBES + 1)),
            mean_hu=float(ct[m].astype(np.float64).sum() / m.sum()),
            texture="ggo" if textures == {1} else "consolidation",
            rind_voxels=int((m & rind).sum()),
            periphery_voxels=int((m & periphery).sum()),
        ))
    nz_idx = np.nonzero(lung)
    bbox = tuple((int(a.min()), int(a.max())) for a in nz_idx) if lung.any() else ()
    truth = PhantomTruth(
        lobe_voxels=tuple(int((lobes == k).sum()) for k in range(1, N_LOBES + 1)),
        lesions=tuple(truth_lesions),
        rind_voxels=int(rind.sum()),
        core_voxels=int(core.sum()),
        periphery_voxels=int(periphery.sum()),
        lung_bbox=bbox,
        params=params,
    )

    prob = disease.astype(np.float64)
    if spec.prob_blur_mm > 0:
        sigma = [spec.prob_blur_mm / s for s in spacing.as_tuple()]
        prob = np.clip(ndimage.gaussian_filter(prob, sigma), 0.0, 1.0)
    return (
        VoxelVolume(ct, spacing, "hounsfield"),
        RegionLabels(lobes, spacing),
        RegionLabels(disease.astype(np.uint8), spacing),
        VoxelVolume(prob.astype(np.float32), spacing, "probability"),
        truth,
    )


def truth_severity(truth: PhantomTruth) -> SeverityVector:
    """The 32 metrics computed straight from the enumerated truth counts."""
    keep = [les for les in truth.lesions if les.voxel_count >= truth.params.min_lesion_voxels]
    lung_n = truth.lung_voxels
    lobe_n = truth.lobe_voxels

    def pct(num, den):
        return 100.0 * num / den if den > 0 else float("nan")

    high = [les for les in keep if les.mean_hu > HIGH_OPACITY_HU]
    high_b = [les for les in keep if HIGH_OPACITY_HU < les.mean_hu <= VESSEL_HU]
    ggo = [les for les in keep if les.mean_hu <= HIGH_OPACITY_HU]
    v = {"po_lungs": pct(sum(les.voxel_count for les in keep), lung_n)}
    for prefix, group in (("po", keep), ("pho", high), ("phob", high_b)):
        if prefix != "po":
            v[f"{prefix}_lungs"] = pct(sum(les.voxel_count for les in group), lung_n)
        for k, name in enumerate(LOBE_NAMES):
            v[f"{prefix}_{name}"] = pct(sum(les.lobe_voxel_counts[k] for les in group), lobe_n[k])
    for key, prefix in (("lss", "po"), ("lhos", "pho"), ("lhos_novessel", "phob")):
        scores = [lobe_score(v[f"{prefix}_{name}"]) for name in LOBE_NAMES]
        v[key] = float("nan") if any(isinstance(s, float) and math.isnan(s) for s in scores) else int(sum(scores))
    right = any(sum(les.lobe_voxel_counts[:3]) > 0 for les in keep)
    left = any(sum(les.lobe_voxel_counts[3:]) > 0 for les in keep)
    v["bilaterality"] = right and left
    v["affected_lobes"] = sum(1 for k in range(N_LOBES) if any(les.lobe_voxel_counts[k] for les in keep))
    periph = [les for les in keep if les.periphery_voxels > 0]
    rind = [les for les in keep if les.rind_voxels > 0]
    core = [les for les in keep if les.rind_voxels == 0]
    v["n_lesions"] = len(keep)
    v["n_peripheral"] = len(periph)
    v["n_rind"] = len(rind)
    v["n_core"] = len(core)
    v["pct_peripheral_distribution"] = 100.0 * len(periph) / len(keep) if keep else 0.0
    v["pct_vol_peripheral"] = pct(sum(les.voxel_count for les in periph), lung_n)
    v["pct_vol_rind"] = pct(sum(les.voxel_count for les in rind), lung_n)
    v["pct_vol_core"] = pct(sum(les.voxel_count for les in core), lung_n)
    v["pct_ggo"] = pct(sum(les.voxel_count for les in ggo), lung_n)
    counts = {
        "lung_voxels": lung_n,
        "lobe_voxels": list(lobe_n),
        "disease_voxels": sum(les.voxel_count for les in keep),
        "high_voxels": sum(les.voxel_count for les in high),
        "ggo_voxels": sum(les.voxel_count for les in ggo),
        "rind_voxels": truth.rind_voxels,
        "core_voxels": truth.core_voxels,
        "periphery_voxels": truth.periphery_voxels,
    }
    return SeverityVector({n: v[n] for n in METRIC_NAMES}, counts)


# ---------------------------------------------------------------------------
# random specs and cohorts
# ---------------------------------------------------------------------------

def default_lungs(dims, spacing) -> tuple[LungSpec, LungSpec]:
    spacing = Spacing.of(spacing)
    ext = [n * s for n, s in zip(dims, spacing.as_tuple())]
    # centres sit on voxel-centre coordinates (index * spacing)
    cz = (dims[0] - 1) / 2 * spacing.dz
    cy = (dims[1] - 1) / 2 * spacing.dy
    radii = (0.42 * ext[0], 0.36 * ext[1], 0.19 * ext[2])
    right = LungSpec("right", (cz, cy, 0.27 * (dims[2] - 1) * spacing.dx), radii, (0.4, 0.2, 0.4))
    left = LungSpec("left", (cz, cy, 0.73 * (dims[2] - 1) * spacing.dx), radii, (0.5, 0.5))
    return right, left


def _place_lesions(rng, dims, spacing, lungs, requests, max_tries=200):
    """Rejection-sample balls fully inside a lung that do not touch a ball of another texture."""
    probe = PhantomSpec(dims, spacing, lungs)
    lobes = _lobe_grid(probe)
    lung = lobes > 0
    dist = ndimage.distance_transform_edt(np.pad(lung, 1), sampling=spacing.as_tuple())[1:-1, 1:-1, 1:-1]
    texture_of = np.zeros(dims, np.int8)
    placed = []
    for req in requests:
        cand = lung & np.isin(lobes, req["lobes"])
        if req.get("max_depth_mm") is not None:
            cand &= dist <= req["max_depth_mm"] + req["radius_mm"]
        if req.get("min_depth_mm") is not None:
            cand &= dist >= req["min_depth_mm"]
        cand_idx = np.flatnonzero(cand)
        code = 1 if req["texture"] == "ggo" else 2
        for _ in range(max_tries):
            if cand_idx.size == 0:
                break
            flat = int(cand_idx[rng.integers(cand_idx.size)])
            center = tuple(float(i * s) for i, s in zip(np.unravel_index(flat, dims), spacing.as_tuple()))
            ball = _ball(dims, spacing, center, req["radius_mm"])
            if not lung[ball].all():
                continue
            labs = set(np.unique(lobes[ball]).tolist())
            if labs & {1, 2, 3} and labs & {4, 5}:
                continue
            grown = ndimage.binary_dilation(ball, structure=np.ones((3, 3, 3), bool))
            if ((texture_of[grown] != 0) & (texture_of[grown] != code)).any():
                continue
            texture_of[ball] = code
            placed.append(LesionSpec(center, req["radius_mm"], req["texture"], req.get("mean_hu"),
                                     req.get("jitter_hu", 20.0)))
            break
    return tuple(placed)


COHORTS = ("covid", "pneumonia", "ild", "healthy")


def random_phantom_spec(rng, cohort: str, dims=(48, 48, 48), spacing=(4.0, 4.0, 4.0),
                        prob_blur_mm: float = 0.0) -> PhantomSpec:
    """Random case with cohort-typical lesion patterns.

    ``covid``: several peripheral, basal, bilateral GGO balls. ``pneumonia``:
    one to three unilateral consolidations. ``ild``: many small shallow
    lesions of mixed texture. ``healthy``: no lesions.
    """
    spacing = Spacing.of(spacing)
    lungs = default_lungs(dims, spacing)
    vox = max(spacing.as_tuple())
    requests = []
    if cohort == "covid":
        for _ in range(int(rng.integers(4, 10))):
            requests.append({
                "lobes": (3, 5) if rng.random() < 0.7 else (1, 2, 3, 4, 5),
                "radius_mm": float(rng.uniform(2.0, 3.5) * vox),
                "texture": "ggo" if rng.random() < 0.8 else "consolidation",
                "max_depth_mm": 2.0 * vox,
            })
    elif cohort == "pneumonia":
        side = (1, 2, 3) if rng.random() < 0.5 else (4, 5)
        for _ in range(int(rng.integers(1, 4))):
            requests.append({
                "lobes": side,
                "radius_mm": float(rng.uniform(2.0, 3.5) * vox),
                "texture": "consolidation" if rng.random() < 0.7 else "ggo",
            })
    elif cohort == "ild":
        for _ in range(int(rng.integers(6, 13))):
            requests.append({
                "lobes": (1, 2, 3, 4, 5),
                "radius_mm": float(rng.uniform(1.2, 2.0) * vox),
                "texture": "ggo" if rng.random() < 0.6 else "consolidation",
                "max_depth_mm": 1.5 * vox,
            })
    elif cohort != "healthy":
        raise ValidationError(f"unknown cohort {cohort!r}")
    lesions = _place_lesions(rng, tuple(dims), spacing, lungs, requests)
    return PhantomSpec(tuple(dims), spacing, lungs, lesions, prob_blur_mm=prob_blur_mm)


def write_phantom(out_dir, spec: PhantomSpec, seed: int, params: RegionParams = RegionParams()):
    """Generate and write ``ct``, ``lobes``, ``disease``, ``prob`` grids plus ``truth.json``."""
    from pathlib import Path

    from .volgrid import save_volume

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ct, lobes, disease, prob, truth = generate_phantom(spec, seed, params)
    for name, grid in (("ct", ct), ("lobes", lobes), ("disease", disease), ("prob", prob)):
        save_volume(grid, out / name)
    sv = truth_severity(truth)
    payload = truth.to_json()
    payload["seed"] = seed
    payload["spec"] = spec.to_json()
    payload["severity"] = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in sv.values.items()}
    (out / "truth.json").write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
    return ct, lobes, disease, prob, truth
