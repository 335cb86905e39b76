import numpy as np
import pytest
from hypothesis import given, settings, strategies as hs

from _oracles import brute_force_ap, brute_force_counts, greedy_match, random_instance
from aahead.evaluation import (Box, Detection, PRPoint, ap_small, average_precision, background_cells,
                               background_exceedance, extract_objects_from_map,
                               iou, match_detections, metrics_at_threshold, pr_curve, pr_curve_area,
                               read_pr_csv, write_pr_csv)


def test_iou_examples():
    assert iou(Box(1, 2, 3, 4), Box(1, 2, 3, 4)) == 1.0
    assert iou(Box(0, 0, 2, 2), Box(5, 5, 2, 2)) == 0.0
    assert iou(Box(0, 0, 2, 2), Box(2, 0, 2, 2)) == 0.0  # touching edges
    assert iou(Box(0, 0, 2, 2), Box(1, 0, 2, 2)) == pytest.approx(1 / 3, rel=1e-15)


def test_match_single():
    m = match_detections([Detection(0, 0, 4, 4, 0.9)], [Box(0, 0, 4, 4)])
    assert (m.tp, m.fp, m.fn) == (1, 0, 0)


def test_match_two_dets_one_gt():
    dets = [Detection(0, 0, 4, 4, 0.3), Detection(0, 0, 4, 4, 0.8)]
    m = match_detections(dets, [Box(0, 0, 4, 4)])
    assert m.det_gt == [None, 0]


def test_match_iou_threshold():
    # 1x1 box inside a 5x5 GT: IoU 0.04
    m = match_detections([Detection(0, 0, 1, 1, 0.9)], [Box(0, 0, 5, 5)])
    assert m.fp == 1 and m.fn == 1
    m = match_detections([Detection(0, 0, 1, 1, 0.9)], [Box(0, 0, 4, 5)])  # IoU 0.05
    assert m.tp == 1


def test_match_equal_score_permutation():
    dets = [Detection(0, 0, 4, 4, 0.5), Detection(1, 0, 4, 4, 0.5), Detection(8, 8, 2, 2, 0.5)]
    gts = [Box(0, 0, 4, 4)]
    a = match_detections(dets, gts)
    b = match_detections(dets[::-1], gts)
    assert a.det_gt == b.det_gt[::-1]


def test_metrics_perfect():
    gts = [[Box(0, 0, 4, 4)], [Box(3, 3, 2, 2), Box(10, 10, 5, 5)]]
    preds = [[Detection(*b.as_list(), 0.9) for b in g] for g in gts]
    r = metrics_at_threshold(preds, gts)
    assert (r.precision, r.recall, r.f1, r.fa_per_image) == (1.0, 1.0, 1.0, 0.0)
    assert r.ap == 1.0


def test_metrics_empty_predictions():
    r = metrics_at_threshold([[]], [[Box(0, 0, 4, 4)]])
    assert (r.precision, r.recall, r.f1) == (0.0, 0.0, 0.0)


def test_metrics_hand_case():
    # image 1: one TP; image 2: one TP and one missed GT; image 3: one FP on an empty image
    gts = [[Box(0, 0, 4, 4)], [Box(10, 10, 3, 3), Box(30, 30, 3, 3)], []]
    preds = [[Detection(0, 0, 4, 4, 0.9)], [Detection(10, 10, 3, 3, 0.5)], [Detection(5, 5, 3, 3, 0.7)]]
    r = metrics_at_threshold(preds, gts)
    assert (r.tp, r.fp, r.fn) == (2, 1, 1)
    assert r.precision == pytest.approx(2 / 3)
    assert r.recall == pytest.approx(2 / 3)
    assert r.f1 == pytest.approx(2 / 3)
    assert r.fa_per_image == pytest.approx(1 / 3)


def test_metrics_misaligned():
    with pytest.raises(ValueError):
        metrics_at_threshold([[]], [[], []])


def test_ap_single():
    assert average_precision([[Detection(0, 0, 4, 4, 0.9)]], [[Box(0, 0, 4, 4)]]) == 1.0


def test_ap_fp_above_tp():
    preds = [[Detection(20, 20, 4, 4, 0.9), Detection(0, 0, 4, 4, 0.5)]]
    assert average_precision(preds, [[Box(0, 0, 4, 4)]]) == pytest.approx(0.5)


def test_ap_hand_case_five_dets_three_gts():
    gts = [[Box(0, 0, 4, 4), Box(10, 0, 4, 4)], [Box(0, 10, 4, 4)]]
    preds = [[Detection(0, 0, 4, 4, 0.9), Detection(30, 30, 2, 2, 0.8), Detection(10, 0, 4, 4, 0.4)],
             [Detection(20, 20, 3, 3, 0.7), Detection(0, 10, 4, 4, 0.3)]]
    # ranked: TP FP FP TP TP -> (r, p): (1/3, 1), (2/3, 1/2), (1, 3/5)
    expected = 1 / 3 * 1 + 1 / 3 * 0.6 + 1 / 3 * 0.6
    assert average_precision(preds, gts) == pytest.approx(expected, rel=1e-12)
    assert average_precision(preds, gts) == brute_force_ap(preds, gts, 0.05)


def test_ap_requires_gt():
    with pytest.raises(ValueError):
        average_precision([[]], [[]])


def test_ap_small_rules():
    small = [[Box(0, 0, 3, 3)], [Box(0, 0, 4, 4)]]
    preds = [[Detection(0, 0, 3, 3, 0.6), Detection(9, 9, 2, 2, 0.7)], [Detection(0, 0, 4, 4, 0.4)]]
    assert ap_small(preds, small) == average_precision(preds, small)
    assert ap_small(preds, [[Box(0, 0, 6, 6)], [Box(0, 0, 8, 8)]]) is None


def test_ap_small_mixed_case():
    gts = [[Box(0, 0, 3, 3), Box(20, 20, 8, 8)], [Box(0, 0, 2, 2)]]
    preds = [[Detection(20, 20, 8, 8, 0.95), Detection(0, 0, 3, 3, 0.5), Detection(40, 40, 2, 2, 0.6)],
             [Detection(0, 0, 2, 2, 0.3)]]
    # large-target TP at 0.95 is ignored: FP(0.6) TP(0.5) TP(0.3) over 2 small GTs
    # -> (r, p) = (1/2, 1/2), (1, 2/3); the envelope lifts the first step to 2/3
    assert ap_small(preds, gts) == pytest.approx(2 / 3, rel=1e-12)
    assert ap_small(preds, gts) == brute_force_ap(preds, gts, 0.05, small_area=25)


@pytest.mark.parametrize("seed", range(25))
def test_against_brute_force(seed):
    rng = np.random.default_rng(seed)
    preds, gts = random_instance(rng)
    for dets, boxes in zip(preds, gts):
        m = match_detections(dets, boxes)
        assert {i: j for i, j in enumerate(m.det_gt) if j is not None} == greedy_match(dets, boxes, 0.05)
    assert average_precision(preds, gts) == brute_force_ap(preds, gts, 0.05)
    small = ap_small(preds, gts)
    oracle = brute_force_ap(preds, gts, 0.05, small_area=25)
    assert small == oracle


def test_pr_curve_perfect():
    gts = [[Box(0, 0, 4, 4), Box(10, 10, 4, 4)]]
    preds = [[Detection(0, 0, 4, 4, 0.9), Detection(10, 10, 4, 4, 0.6)]]
    curve = pr_curve(preds, gts)
    assert [(p.precision, p.recall) for p in curve] == [(1.0, 1.0), (1.0, 0.5)]


def test_pr_curve_constant_score():
    gts = [[Box(0, 0, 4, 4), Box(10, 10, 4, 4)]]
    preds = [[Detection(0, 0, 4, 4, 0.5), Detection(30, 30, 4, 4, 0.5)]]
    assert pr_curve(preds, gts) == [PRPoint(0.5, 0.5, 0.5)]


@pytest.mark.parametrize("seed", range(10))
def test_pr_curve_pointwise_oracle(seed):
    preds, gts = random_instance(np.random.default_rng(100 + seed))
    n_gt = sum(map(len, gts))
    for pt in pr_curve(preds, gts):
        tp, fp, fn = brute_force_counts(preds, gts, pt.threshold, 0.05)
        r = metrics_at_threshold(preds, gts, pt.threshold, with_ap=False)
        assert (r.tp, r.fp, r.fn) == (tp, fp, fn)
        assert pt.precision == pytest.approx(tp / (tp + fp), abs=1e-15)
        assert pt.recall == pytest.approx(tp / n_gt, abs=1e-15)


@given(hs.integers(0, 10 ** 6))
@settings(max_examples=60, deadline=None)
def test_ap_equals_curve_area(seed):
    preds, gts = random_instance(np.random.default_rng(seed), max_dets=40)
    assert abs(average_precision(preds, gts) - pr_curve_area(pr_curve(preds, gts))) <= 1e-9


@given(hs.integers(0, 10 ** 6), hs.floats(0, 1), hs.floats(0, 1))
@settings(max_examples=60, deadline=None)
def test_recall_monotone_in_threshold(seed, t1, t2):
    preds, gts = random_instance(np.random.default_rng(seed))
    lo, hi = sorted((t1, t2))
    assert metrics_at_threshold(preds, gts, lo, with_ap=False).recall >= \
        metrics_at_threshold(preds, gts, hi, with_ap=False).recall


@given(hs.integers(0, 10 ** 6), hs.floats(0.01, 1))
@settings(max_examples=60, deadline=None)
def test_zero_score_padding_keeps_f1(seed, threshold):
    preds, gts = random_instance(np.random.default_rng(seed))
    padded = [dets + [Detection(1, 1, 3, 3, 0.0)] for dets in preds]
    assert metrics_at_threshold(padded, gts, threshold, with_ap=False).f1 == \
        metrics_at_threshold(preds, gts, threshold, with_ap=False).f1


def test_pr_csv_round_trip(tmp_path):
    curve = [PRPoint(0.1, 0.5, 1.0), PRPoint(0.7, 1 / 3, 0.25)]
    write_pr_csv(curve, tmp_path / "pr.csv")
    assert read_pr_csv(tmp_path / "pr.csv") == curve


def test_extract_objects():
    m = np.zeros((8, 8))
    assert extract_objects_from_map(m, 0.5) == []
    m[2:4, 3:5] = [[0.6, 0.9], [0.7, 0.8]]
    (d,) = extract_objects_from_map(m, 0.5)
    assert (d.x, d.y, d.w, d.h, d.score) == (3, 2, 2, 2, 0.9)


def test_extract_diagonal_connectivity():
    m = np.zeros((5, 5))
    m[1, 1] = m[2, 2] = 1.0
    assert len(extract_objects_from_map(m, 0.5)) == 1
    assert len(extract_objects_from_map(m, 0.5, connectivity=4)) == 2
    with pytest.raises(ValueError):
        extract_objects_from_map(m, 0.5, connectivity=6)


def test_background_cells():
    bg = background_cells([[Box(9, 9, 2, 2)], []], (8, 8), stride=4, margin=2)
    # the box lies inside cell (2, 2); two rings of dilation cover rows and cols 0..4
    assert not bg[0, :5, :5].any()
    assert bg[0, 5:, :].all() and bg[0, :, 5:].all()
    assert bg[1].all()


def test_background_exceedance():
    obj = np.zeros((1, 8, 8))
    obj[0, 7, 7] = 0.5
    obj[0, 2, 2] = 0.9  # on the target, not counted
    frac = background_exceedance(obj, [[Box(9, 9, 2, 2)]], stride=4)
    assert frac == pytest.approx(1 / (64 - 25))
