import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from volreg import (BinaryMask, DisplacementField, GridInfo, LandmarkSet, MetricsReport, VolumeError,
                    dice, full_report, landmark_distance, stsr, tsr)
from volreg.metrics import REPORT_KEYS


def mask_from_indices(grid, flat_idx):
    a = np.zeros(grid.size, dtype=np.uint8)
    a[list(flat_idx)] = 1
    return BinaryMask(grid, a.reshape(grid.shape))


G = GridInfo.cube(8)


def test_dice_examples():
    a = mask_from_indices(G, [0, 1, 2, 3])
    b = mask_from_indices(G, [2, 3, 4, 5])
    assert dice(a, a) == 1.0
    assert dice(a, mask_from_indices(G, [10, 11])) == 0.0
    assert dice(a, b) == 0.5
    empty = mask_from_indices(G, [])
    with pytest.raises(VolumeError):
        dice(empty, empty)


@settings(max_examples=40, deadline=None)
@given(st.sets(st.integers(0, 511), min_size=1), st.sets(st.integers(0, 511)))
def test_dice_symmetric_bounded(ia, ib):
    a, b = mask_from_indices(G, ia), mask_from_indices(G, ib)
    d = dice(a, b)
    assert d == dice(b, a)
    assert 0.0 <= d <= 1.0


def test_tsr_examples():
    organ = mask_from_indices(G, range(100))
    assert tsr(mask_from_indices(G, range(10)), organ) == pytest.approx(0.1)
    assert tsr(organ, organ) == 1.0
    with pytest.raises(VolumeError, match="undefined TSR"):
        tsr(mask_from_indices(G, []), organ)
    with pytest.raises(VolumeError):
        tsr(organ, mask_from_indices(G, []))


def test_tsr_warns_outside_organ():
    with pytest.warns(UserWarning):
        tsr(mask_from_indices(G, [200]), mask_from_indices(G, range(10)))


def test_stsr_examples():
    organ = mask_from_indices(G, range(100))
    tumor = mask_from_indices(G, range(20))
    assert stsr(tumor, organ, tumor, organ) == 1.0
    assert stsr(tumor, organ, mask_from_indices(G, range(10)), organ) == pytest.approx(4.0)
    assert stsr(tumor, organ, mask_from_indices(G, range(10)), mask_from_indices(G, range(50))) == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 50), st.integers(51, 200), st.integers(1, 50), st.integers(51, 200))
def test_stsr_at_least_one_and_swap_invariant(t1, o1, t2, o2):
    g = GridInfo.cube(8)
    m = [mask_from_indices(g, range(n)) for n in (t1, o1, t2, o2)]
    s = stsr(*m)
    assert s >= 1.0
    assert s == pytest.approx(stsr(m[2], m[3], m[0], m[1]), rel=1e-12)


def test_landmark_distance_examples():
    g = GridInfo.cube(16)
    zero = DisplacementField.zeros(g)
    same = LandmarkSet.from_pairs([(3, 4, 5)], [(3, 4, 5)])
    assert landmark_distance(same, zero) == 0.0
    off = LandmarkSet.from_pairs([(3, 4, 5)], [(6, 4, 5)])
    assert landmark_distance(off, zero) == pytest.approx(3.0)
    shifted = DisplacementField.constant(g, (1.0, 0.0, 0.0))
    exact = LandmarkSet.from_pairs([(3, 4, 5), (7, 7, 7)], [(4, 4, 5), (8, 7, 7)])
    assert landmark_distance(exact, shifted) == pytest.approx(0.0)
    with pytest.raises(VolumeError):
        landmark_distance(LandmarkSet([]), zero)


def test_landmark_distance_uses_spacing():
    g = GridInfo((16, 16, 16), (2.0, 1.0, 0.5))
    lms = LandmarkSet.from_pairs([(3, 3, 3)], [(4, 3, 3)])
    assert landmark_distance(lms, DisplacementField.zeros(g)) == pytest.approx(2.0)
    assert landmark_distance(lms, DisplacementField.zeros(g), (1.0, 1.0, 1.0)) == pytest.approx(1.0)


def test_landmark_distance_relabel_invariant(rng):
    g = GridInfo.cube(16)
    f = DisplacementField(g, rng.normal(scale=0.5, size=(3,) + g.shape))
    pf, pm = rng.uniform(1, 14, size=(5, 3)), rng.uniform(1, 14, size=(5, 3))
    a = LandmarkSet.from_pairs(pf, pm)
    b = LandmarkSet.from_pairs(pf, pm, ids=[f"q{i}" for i in (4, 2, 0, 3, 1)])
    assert landmark_distance(a, f) == pytest.approx(landmark_distance(b, f), rel=1e-14)


def test_full_report_identity(small_case):
    c = small_case
    zero = DisplacementField.zeros(c.grid)
    lms = LandmarkSet.from_pairs([p for _, p, _ in c.landmarks.pairs()], [p for _, p, _ in c.landmarks.pairs()])
    r = full_report(zero, c.organ_moving, c.organ_moving, c.tumor_moving, lms)
    assert r.dice_organ == 1.0
    assert r.landmark_distance_mm == 0.0
    assert r.folding_pct == 0.0
    assert r.jacobian_std == 0.0
    assert r.stsr == 1.0
    assert r.tsr_moving == r.tsr_warped


def test_full_report_gt_field(small_case):
    c = small_case
    r = full_report(c.gt_field, c.organ_moving, c.organ_fixed, c.tumor_moving, c.landmarks)
    assert r.dice_organ >= 0.97
    assert r.landmark_distance_mm < 0.05
    assert r.folding_pct == 0.0


def test_report_json_round_trip(small_case):
    c = small_case
    r = full_report(c.gt_field, c.organ_moving, c.organ_fixed, c.tumor_moving, c.landmarks, {"alpha_vp": 0.1})
    text = r.to_json()
    back = MetricsReport.from_json(text)
    assert back == r
    assert back.to_json() == text
    d = json.loads(text)
    assert set(REPORT_KEYS) <= set(d)
    assert set(d) == set(REPORT_KEYS) | {"config", "version"}
    assert d["stsr"] == pytest.approx(max(d["tsr_moving"] / d["tsr_warped"], d["tsr_warped"] / d["tsr_moving"]) ** 2)


def test_report_without_landmarks(small_case):
    c = small_case
    r = full_report(DisplacementField.zeros(c.grid), c.organ_moving, c.organ_fixed, c.tumor_moving)
    assert r.landmark_distance_mm is None
    assert json.loads(r.to_json())["landmark_distance_mm"] is None
