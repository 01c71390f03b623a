import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctseverity.lesions import Lesion, RegionParams, extract_lesions
from ctseverity.metrics import (
    COUNT_METRICS,
    LOBE_NAMES,
    METRIC_NAMES,
    PERCENT_METRICS,
    compute_all,
    format_value,
    is_ggo,
    is_high_opacity,
    is_high_opacity_novessel,
    lobe_score,
    lung_scores,
    percent_ggo,
    percent_high_opacity,
    percent_opacity,
    severity_from_lesions,
    topology_metrics,
    region_volume_metrics,
)
from ctseverity.phantom import truth_severity
from ctseverity.volgrid import RegionLabels, VoxelVolume

from helpers import ball, lungs_case, random_case, random_mask_case


def lesion(i, n, hu, lobe=1, periph=False, rind=False):
    counts = [0] * 5
    counts[lobe - 1] = n
    return Lesion(i, n, float(n), hu, tuple(counts), periph, rind)


def test_names_and_order():
    assert len(METRIC_NAMES) == 32 and len(set(METRIC_NAMES)) == 32
    assert METRIC_NAMES[0] == "po_lungs" and METRIC_NAMES[-1] == "pct_ggo"
    assert set(COUNT_METRICS) | set(PERCENT_METRICS) == set(METRIC_NAMES)


def test_percent_opacity():
    assert percent_opacity(100, 1000) == 10.0
    assert percent_opacity(0, 1000) == 0.0
    assert math.isnan(percent_opacity(0, 0))


def test_hu_rules():
    assert is_ggo(-200) and not is_high_opacity(-200)
    assert is_high_opacity(-199.5) and is_high_opacity_novessel(50) and not is_high_opacity_novessel(50.5)


@pytest.mark.parametrize("po,score", [(0, 0), (0.1, 1), (25, 1), (25.0001, 2), (30, 2), (50, 2), (75, 3), (75.1, 4), (100, 4)])
def test_lobe_score(po, score):
    assert lobe_score(po) == score


@given(st.floats(0, 100), st.floats(0, 100))
def test_lobe_score_monotone(a, b):
    lo, hi = sorted((a, b))
    assert lobe_score(lo) <= lobe_score(hi)


def test_lung_scores():
    assert lung_scores([100] * 5, [0] * 5, [0] * 5)[0] == 20
    assert lung_scores([10, 0, 0, 0, 0], [0] * 5, [0] * 5)[0] == 1


def test_high_opacity_variants():
    les = [lesion(1, 40, -50.0)]
    assert percent_high_opacity(les, 1000, variant="A") == 4.0
    assert percent_high_opacity(les, 1000, variant="B") == 4.0
    ggo = [lesion(1, 70, -500.0)]
    assert percent_high_opacity(ggo, 1000, variant="A") == 0.0
    assert percent_ggo(ggo, 1000) == 7.0
    vessel = [lesion(1, 10, 120.0)]
    assert percent_high_opacity(vessel, 1000, variant="A") == 1.0
    assert percent_high_opacity(vessel, 1000, variant="B") == 0.0


def test_topology():
    les = [lesion(1, 5, -500, 1, True, True), lesion(2, 5, -500, 3, True, True), lesion(3, 5, -500, 2)]
    t = topology_metrics(les)
    assert t["bilaterality"] is False and t["affected_lobes"] == 3 and t["n_lesions"] == 3
    assert t["pct_peripheral_distribution"] == pytest.approx(200 / 3, abs=1e-9)
    assert t["n_rind"] + t["n_core"] == 3
    assert topology_metrics([])["pct_peripheral_distribution"] == 0.0


def test_region_volume_all_core():
    les = [lesion(1, 30, -500), lesion(2, 20, -50)]
    r = region_volume_metrics(les, 1000)
    assert r["pct_vol_rind"] == 0 and r["pct_vol_core"] == 5.0 and r["pct_vol_peripheral"] == 0
    assert region_volume_metrics([], 1000) == {"pct_vol_peripheral": 0.0, "pct_vol_rind": 0.0, "pct_vol_core": 0.0}


def test_absent_lobe_is_nan():
    sv = severity_from_lesions([lesion(1, 10, -500)], [100, 0, 100, 100, 100])
    assert math.isnan(sv["po_right_middle"]) and math.isnan(sv["lss"])
    assert format_value(sv["po_right_middle"]) == "NA"
    assert sv["po_lungs"] == 2.5


def test_zero_disease():
    ct, lobes, disease, *_ = lungs_case()
    sv = compute_all(ct, lobes, disease)
    assert sv["bilaterality"] is False
    assert all(sv[n] == 0 for n in METRIC_NAMES)


def _assert_matches_truth(sv, ref):
    for n in METRIC_NAMES:
        a, b = sv[n], ref[n]
        if n in COUNT_METRICS:
            assert a == b, n
        elif math.isnan(b):
            assert math.isnan(a), n
        else:
            assert a == pytest.approx(b, rel=1e-9, abs=1e-12), n


@pytest.mark.parametrize("seed", range(12))
def test_compute_all_equals_truth(seed):
    ct, lobes, disease, _, truth = random_case(seed)
    _assert_matches_truth(compute_all(ct, lobes, disease), truth_severity(truth))


def test_costal_and_medial_metrics_match_truth():
    ct, lobes, disease, _, truth = lungs_case(lesions=(ball((16, 16, 4), 4.0), ball((16, 16, 13), 4.0, "consolidation")))
    sv = compute_all(ct, lobes, disease)
    _assert_matches_truth(sv, truth_severity(truth))
    assert sv["n_peripheral"] == 1 and sv["n_rind"] == 2


def test_uniform_spacing_scaling_leaves_percentages():
    ct, lobes, disease, *_ = random_case(0, "covid")
    sv = compute_all(ct, lobes, disease)
    sp2 = tuple(2 * s for s in ct.spacing.as_tuple())
    params = RegionParams(rind_depth_mm=20.0, mediastinal_halfwidth_mm=40.0)
    sv2 = compute_all(VoxelVolume(ct.data, sp2), RegionLabels(lobes.labels, sp2), RegionLabels(disease.labels, sp2), params)
    for n in PERCENT_METRICS:
        assert sv2[n] == pytest.approx(sv[n], rel=1e-12, abs=1e-12), n


@given(st.integers(0, 10_000))
def test_partition_identities_random_masks(seed):
    ct, lobes, disease = random_mask_case(seed, (12, 12, 12))
    sv = compute_all(ct, lobes, disease, RegionParams(min_lesion_voxels=1))
    c = sv.counts
    assert c["ggo_voxels"] + c["high_voxels"] == c["disease_voxels"]
    assert sv["pct_ggo"] + sv["pho_lungs"] == pytest.approx(sv["po_lungs"], rel=1e-12, abs=1e-12)
    assert sv["n_rind"] + sv["n_core"] == sv["n_lesions"]
    assert c["rind_voxels"] + c["core_voxels"] == c["lung_voxels"]
    assert 0 <= sv["lss"] <= 20


def test_whole_lung_po_is_volume_weighted():
    ct, lobes, disease, *_ = random_case(4, "ild")
    sv = compute_all(ct, lobes, disease)
    lv = sv.counts["lobe_voxels"]
    weighted = sum(sv[f"po_{n}"] * v for n, v in zip(LOBE_NAMES, lv)) / sum(lv)
    assert sv["po_lungs"] == pytest.approx(weighted, rel=1e-12)


@pytest.mark.parametrize("seed", range(4))
def test_removing_a_lesion_never_increases_metrics(seed):
    ct, lobes, disease, *_ = random_case(seed * 4, "covid")
    ls, _ = extract_lesions(ct, lobes, disease)
    base = compute_all(ct, lobes, disease)
    for les in ls.lesions:
        d = disease.labels.copy()
        d[ls.component_labels == les.id] = 0
        sv = compute_all(ct, lobes, RegionLabels(d, disease.spacing))
        for n in METRIC_NAMES:
            if n == "pct_peripheral_distribution":  # a ratio; excluded
                continue
            assert float(sv[n]) <= float(base[n]) + 1e-12, n


def test_format_value():
    assert format_value(True) == "1" and format_value(3) == "3"
    assert format_value(0.1) == "0.1" and format_value(float("nan")) == "NA"
