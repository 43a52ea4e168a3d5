import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scenegen.generator import plan_configs
from scenegen.metrics import MetricReport, chamfer_f, iou, nearest_distances, nearest_distances_brute, nfe_report


# iou


def test_iou_examples():
    a = np.array([1, 1, 0, 0], bool)
    assert iou(a, a) == 1.0
    assert iou(a, ~a) == 0.0
    assert iou(np.zeros(5, bool), np.zeros(5, bool)) == 1.0
    # equal-size sets sharing half their elements
    assert math.isclose(iou([1, 1, 0, 0], [0, 1, 1, 0]), 1 / 3)
    with pytest.raises(ValueError):
        iou(np.zeros(3, bool), np.zeros(4, bool))


@given(arrays(bool, 40), arrays(bool, 40))
def test_iou_properties(a, b):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == iou(b, a)
    assert iou(a, a) == 1.0
    if a.any() and b.any():
        assert v <= min(a.sum(), b.sum()) / max(a.sum(), b.sum()) + 1e-12


# chamfer / f-score


def test_identical_clouds():
    p = np.random.default_rng(0).random((50, 3))
    assert chamfer_f(p, p, 0.01) == (0.0, 1.0)


def test_threshold_is_inclusive():
    a = np.array([[0.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.04]])
    cd, f = chamfer_f(a, b, 0.04)
    assert f == 1.0
    assert math.isclose(cd, 0.08)
    assert chamfer_f(a, b, 0.0399)[1] == 0.0


def test_chamfer_hand_example():
    a = np.array([[0.0, 0, 0], [1.0, 0, 0]])
    b = np.array([[0.0, 0, 0]])
    cd, f = chamfer_f(a, b, 0.5)
    # a->b mean 0.5, b->a mean 0; precision 1/2, recall 1
    assert math.isclose(cd, 0.5)
    assert math.isclose(f, 2 * 0.5 * 1 / 1.5)


def test_empty_cloud_rejected():
    with pytest.raises(ValueError):
        chamfer_f(np.zeros((0, 3)), np.zeros((2, 3)), 0.1)


def test_kdtree_matches_brute_force():
    rng = np.random.default_rng(1)
    a, b = rng.random((500, 3)), rng.random((500, 3))
    assert np.abs(nearest_distances(a, b) - nearest_distances_brute(a, b, block=64)).max() < 1e-9
    kd = chamfer_f(a, b, 0.05)
    bf = chamfer_f(a, b, 0.05, brute=True)
    assert abs(kd[0] - bf[0]) < 1e-9 and kd[1] == bf[1]


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-1, 1)),
       arrays(np.float64, st.tuples(st.integers(1, 30), st.just(3)), elements=st.floats(-1, 1)))
def test_chamfer_symmetric(a, b):
    ab, ba = chamfer_f(a, b, 0.2), chamfer_f(b, a, 0.2)
    assert math.isclose(ab[0], ba[0], abs_tol=1e-12)
    assert math.isclose(ab[1], ba[1], abs_tol=1e-12)
    assert ab[0] >= 0 and 0 <= ab[1] <= 1


# reports


def test_report_json_round_trip():
    rows = [{"iou": 0.8, "cd": 0.1, "f_score": 0.9, "height_mae": 1.0},
            {"iou": 0.6, "cd": float("inf"), "f_score": 0.0, "height_mae": 3.0}]
    rep = MetricReport.from_chunks(rows, threshold=1 / 16, n_points=100, n_queries=40)
    assert math.isclose(rep.iou, 0.7) and math.isclose(rep.cd, 0.1) and math.isclose(rep.f_score, 0.45)
    doc = json.loads(rep.to_json())
    assert doc["header"]["fpd"] == "unavailable" and "unsquared" in doc["header"]["cd"]
    again = MetricReport.from_json(json.dumps({k: v for k, v in doc.items() if k != "per_chunk"}))
    assert again.iou == rep.iou and again.threshold == rep.threshold


def test_nfe_counts_for_sixteen_quads():
    trace = plan_configs(5, 5)
    explicit = nfe_report(trace, "explicit", 50)
    repaint = nfe_report(trace, "repaint", 50, resample_r=5)
    assert explicit["expected_calls"] == 800
    assert repaint["expected_calls"] == 16 * 246 == 3936
    assert round(repaint["expected_calls"] / explicit["expected_calls"], 2) == 4.92
    assert explicit["recorded_calls"] == 0  # plan only, nothing ran
