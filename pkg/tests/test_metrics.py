import json

import numpy as np
import pytest

from conftest import disk
from strokex.exceptions import DatasetException, EstimationException, ShapeException
from strokex.metrics import (
    EMPTY_DISTANCE,
    SegmentationScore,
    StrokeMetricsReport,
    bounding_box,
    box_iou,
    build_report,
    centroid,
    centroid_distance,
    evaluate_extraction,
    evaluate_registration,
    m_biou,
    m_dis,
    m_iou_m,
    m_iou_um,
    max_cross,
    segmentation_iou,
    write_report,
)


def _strokes():

    masks = np.zeros((3, 64, 64), dtype=bool)
    masks[0, 10:14, 5:50] = True
    masks[1, 5:60, 30:34] = True
    masks[2] = disk(64, (50, 50), 5)
    return masks


def test_identical_sets_are_perfect():

    truth = _strokes()
    assert m_dis(truth, truth) == 0.0
    assert m_biou(truth, truth) == 1.0
    assert m_iou_m(truth, truth) == 1.0
    assert m_iou_um(truth, truth) == 1.0


def test_translation_moves_distance_exactly():

    truth = _strokes()
    moved = np.roll(truth, shift=(3, 4), axis=(1, 2))

    assert m_dis(moved, truth) == pytest.approx(5.0)
    assert m_dis(np.roll(moved, 2, axis=2), np.roll(truth, 2, axis=2)) == pytest.approx(5.0)


def test_empty_extraction_is_penalised():

    truth = _strokes()
    empty = np.zeros_like(truth)

    assert m_dis(empty, truth) == EMPTY_DISTANCE
    assert m_biou(empty, truth) == 0.0
    assert m_iou_m(empty, truth) == 0.0
    assert m_iou_um(empty, truth) == 0.0


def test_box_overlap_closed_form():

    a = np.zeros((1, 32, 32), dtype=bool)
    b = np.zeros_like(a)
    a[0, 0:10, 0:10] = True
    b[0, 5:15, 5:15] = True

    assert bounding_box(a[0]) == (0, 0, 10, 10)
    assert m_biou(a, b) == pytest.approx(25 / 175)
    assert box_iou((0, 0, 2, 2), (5, 5, 8, 8)) == 0.0
    assert box_iou(None, (0, 0, 1, 1)) == 0.0


def test_centroid_of_empty_mask():

    with pytest.raises(EstimationException):
        centroid(np.zeros((8, 8)))
    assert centroid_distance(np.zeros((8, 8)), np.ones((8, 8))) == EMPTY_DISTANCE


def test_length_mismatch():

    truth = _strokes()
    with pytest.raises(ShapeException):
        m_iou_m(truth[:2], truth)


def test_swapped_strokes_break_matching_only():

    truth = np.zeros((2, 32, 32), dtype=bool)
    truth[0, 2:6, 2:30] = True
    truth[1, 10:30, 14:18] = True
    swapped = truth[::-1]

    assert m_iou_m(swapped, truth) < 1.0
    assert m_iou_um(swapped, truth) == 1.0


def test_max_cross_prefers_lowest_index_on_ties():

    truth = np.zeros((3, 8, 8), dtype=bool)
    truth[1, :2] = True
    truth[2, :2] = True
    stroke = np.zeros((8, 8), dtype=bool)
    stroke[0] = True

    assert max_cross(stroke, truth) == 1
    assert max_cross(np.zeros((8, 8), dtype=bool), truth) == 0


def test_max_cross_ranks_by_intersection_not_iou():

    truth = np.zeros((2, 40, 40), dtype=bool)
    stroke = np.zeros((40, 40), dtype=bool)
    stroke[0, :10] = True
    truth[0, 0, :4] = True
    truth[1, 1:, :] = True
    truth[1, 0, 4:] = True

    assert max_cross(stroke, truth) == 1

    # the positional partner would score 0.4, the largest overlap scores far less
    extracted = np.stack([stroke, np.zeros_like(stroke)])
    assert m_iou_m(extracted, truth) == pytest.approx(0.2)
    assert m_iou_um(extracted, truth) == pytest.approx(3 / 1600)


def test_unmatched_iou_is_permutation_invariant(rng):

    for _ in range(1000):
        truth = rng.random((4, 12, 12)) < 0.3
        extracted = rng.random((4, 12, 12)) < 0.3
        order = rng.permutation(4)
        assert m_iou_um(extracted[order], truth) == pytest.approx(m_iou_um(extracted, truth))


def test_unmatched_iou_dominates_for_partial_strokes(rng):

    for _ in range(1000):
        labels = rng.integers(0, 5, size=(12, 12))
        truth = np.stack([labels == k for k in range(1, 5)])
        extracted = truth & (rng.random(truth.shape) < 0.7)
        assert m_iou_um(extracted, truth) >= m_iou_m(extracted, truth) - 1e-12


def test_report_rows_average_to_sample_values():

    truth = _strokes()
    extracted = truth.copy()
    extracted[2] = False

    report = StrokeMetricsReport.compute("s0", extracted, truth)
    assert report.mIOU_m == pytest.approx(np.mean([r["iou"] for r in report.strokes]))
    assert report.mIOU_m == pytest.approx(2 / 3)
    assert report.strokes[2]["distance"] == EMPTY_DISTANCE

    with pytest.raises(DatasetException, match="s0"):
        StrokeMetricsReport.compute("s0", extracted[:2], truth)


def test_dataset_evaluation():

    truth = _strokes()
    truths = {"a": truth, "b": truth[:2]}

    registration = evaluate_registration(truths, truths, baseline={"a": np.zeros_like(truth), "b": truth[:2]})
    assert registration["mDis"] == 0.0
    assert registration["mBIou"] == 1.0
    assert registration["baseline"]["mBIou"] == pytest.approx(0.5)

    extraction = evaluate_extraction(truths, truths)
    assert extraction["mIOU_m"] == extraction["mIOU_um"] == 1.0
    assert [row["sample_id"] for row in extraction["per_sample"]] == ["a", "b"]

    with pytest.raises(DatasetException, match="'b'"):
        evaluate_extraction({"a": truth}, truths)


def test_report_document(tmp_path):

    truth = _strokes()
    report = build_report(
        "data", "run", evaluate_registration({"a": truth}, {"a": truth}), evaluate_extraction({"a": truth}, {"a": truth})
    )
    assert {"mDis", "mBIou", "mIOU_m", "mIOU_um"} <= report.keys()
    assert report["per_sample"][0]["sample_id"] == "a"
    assert len(report["per_sample"][0]["strokes"]) == 3

    path = tmp_path / "out" / "report.json"
    write_report(path, report)
    assert json.loads(path.read_text())["mIOU_m"] == 1.0


def test_report_rows_keep_prior_and_extraction_apart():

    truth = np.zeros((2, 128, 128), dtype=bool)
    truth[0, 10:20, 10:20] = True
    truth[1, 60:70, 60:70] = True
    prior = np.roll(truth, 30, axis=1)

    report = build_report(
        "data",
        "run",
        evaluate_registration({"a": prior}, {"a": truth}),
        evaluate_extraction({"a": truth}, {"a": truth}),
    )
    row = report["per_sample"][0]

    assert report["mDis"] == pytest.approx(30.0)
    assert row["mDis"] == pytest.approx(report["mDis"])
    assert row["mBIou"] == report["mBIou"] == 0.0
    assert row["mIOU_m"] == report["mIOU_m"] == 1.0
    assert {"distance", "box_iou"}.isdisjoint(row["strokes"][0])


def test_segmentation_scores():

    label = np.zeros((7, 8, 8), dtype=bool)
    label[0, :4] = True
    label[1, :, :4] = True
    pred = label.copy()
    pred[1] = False

    per_category = segmentation_iou(pred, label)
    assert per_category[0] == 1.0
    assert per_category[1] == 0.0
    assert np.isnan(per_category[2])

    score = SegmentationScore(7)
    score.update(pred[None], label[None])
    score.update(label[None], label[None])
    assert score.per_category()[1] == pytest.approx(0.5)
    assert score.mean() == pytest.approx(0.75)
