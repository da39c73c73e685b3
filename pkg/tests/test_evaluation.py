import csv
import io

import numpy as np
import pytest
from pydantic import ValidationError

from voxfuse.config import EvalConfig
from voxfuse.errors import ContractError
from voxfuse.evaluation import (
    RESULT_COLUMNS,
    Detection,
    Difficulty,
    PRCurve,
    SceneTruth,
    assign_difficulty,
    average_precision,
    evaluate_scenes,
    match_detections,
    merge_curves,
    nms_3d,
    recall_anchors,
    roi_recall,
    write_result_table,
)
from voxfuse.geometry import Box2D, Box3D, project_box3d_to_2d
from voxfuse.kitti import LabelRecord, box3d_to_label, label_to_box3d, parse_label_line
from voxfuse.synthetic import synthetic_scene

IMAGE_SIZE = (1242, 375)


def car(x, y=0.0, yaw=0.0):
    return Box3D((x, y, -0.95), (3.9, 1.6, 1.56), yaw)


def label(height=50.0, occlusion=0, truncation=0.0, class_name="Car"):
    return LabelRecord(
        class_name=class_name,
        truncation=truncation,
        occlusion_level=occlusion,
        alpha=0.0,
        bbox2d=Box2D(100, 100, 150, 100 + height),
        dims=(1.5, 1.6, 3.9),
        location=(0.0, 1.5, 10.0),
        yaw=0.0,
    )


# --- matching and AP ----------------------------------------------------------------


def test_detections_equal_to_gts():
    gts = [car(10), car(20, 3), car(30, -4)]
    curve = match_detections([(g, 1.0) for g in gts], gts, 0.7)
    assert curve.entries == [(1.0, True)] * 3
    assert average_precision(curve) == pytest.approx(1.0)
    assert average_precision(curve, 40) == pytest.approx(1.0)


def test_no_detections():
    curve = match_detections([], [car(10), car(20)], 0.7)
    assert curve.entries == []
    assert curve.gt_count == 2
    assert average_precision(curve) == 0.0


def test_one_gt_matches_once():
    curve = match_detections([(car(10), 0.9), (car(10.1), 0.8)], [car(10)], 0.7)
    assert curve.entries == [(0.9, True), (0.8, False)]


def test_best_iou_gt_is_taken():
    gts = [car(10.3), car(10.05)]
    curve = match_detections([(car(10), 0.9), (car(10.35), 0.8)], gts, 0.5)
    # the first detection takes the closer GT, so the second still finds one
    assert curve.entries == [(0.9, True), (0.8, True)]


def test_hand_curve():
    curve = PRCurve([(0.9, True), (0.8, False), (0.7, True)], gt_count=2)
    assert average_precision(curve, 11) == pytest.approx(28 / 33, abs=1e-9)
    assert average_precision(curve, 40) == pytest.approx(5 / 6, abs=1e-9)


def test_hand_curve_from_matching():
    gts = [car(10), car(20, 3)]
    dets = [(car(20, 3), 0.7), (car(10), 0.9), (car(40, -5), 0.8)]
    assert average_precision(match_detections(dets, gts, 0.7)) == pytest.approx(28 / 33, abs=1e-9)


def test_undefined_without_ground_truth():
    assert average_precision(PRCurve([(0.5, False)], gt_count=0)) is None


def test_ignored_ground_truth():
    gts = [car(10), car(20, 3)]
    curve = match_detections([(car(10), 0.9), (car(20, 3), 0.8)], gts, 0.7, gt_ignored=[False, True])
    # the detection on the ignored GT is neither TP nor FP
    assert curve.entries == [(0.9, True)]
    assert curve.gt_count == 1


def test_ignored_detection_only_when_unmatched():
    gts = [car(10)]
    curve = match_detections([(car(10), 0.9), (car(30), 0.8)], gts, 0.7, det_ignored=[True, True])
    assert curve.entries == [(0.9, True)]


def test_contract_errors():
    with pytest.raises(ContractError):
        PRCurve([(0.9, True), (0.8, True)], gt_count=1)
    with pytest.raises(ContractError):
        match_detections([(car(10), float("nan"))], [car(10)], 0.7)
    with pytest.raises(ContractError):
        recall_anchors(20)
    with pytest.raises(ContractError):
        nms_3d([(car(10), float("inf"))], 0.5)


def test_recall_anchors():
    assert recall_anchors(11).tolist() == pytest.approx([i / 10 for i in range(11)])
    assert recall_anchors(40)[0] == pytest.approx(1 / 40)
    assert recall_anchors(40)[-1] == 1.0


def test_ties_keep_input_order():
    curve = PRCurve.from_scores([0.5, 0.9, 0.5], [False, True, True])
    assert curve.entries == [(0.9, True), (0.5, False), (0.5, True)]


def test_merge_curves():
    a = PRCurve([(0.9, True), (0.3, False)], gt_count=2)
    b = PRCurve([(0.5, True)], gt_count=1)
    merged = merge_curves([a, b])
    assert merged.entries == [(0.9, True), (0.5, True), (0.3, False)]
    assert merged.gt_count == 3


def test_adding_a_true_positive_never_lowers_ap():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n = int(rng.integers(1, 30))
        scores = rng.uniform(size=n).tolist()
        is_tp = (rng.uniform(size=n) < 0.5).tolist()
        gt_count = sum(is_tp) + int(rng.integers(1, 5))
        before = PRCurve.from_scores(scores, is_tp, gt_count)
        after = PRCurve.from_scores(scores + [float(rng.uniform())], is_tp + [True], gt_count)
        for positions in (11, 40):
            assert average_precision(after, positions) >= average_precision(before, positions) - 1e-12


def test_11_and_40_point_agree_on_dense_curves():
    rng = np.random.default_rng(11)
    for _ in range(10):
        n = 2000
        is_tp = (rng.uniform(size=n) < 1.0 - 0.6 * np.arange(n) / n).tolist()
        scores = np.linspace(1.0, 0.0, n).tolist()
        curve = PRCurve.from_scores(scores, is_tp)
        assert abs(average_precision(curve, 11) - average_precision(curve, 40)) <= 0.02


def test_ap_invariant_under_monotone_score_transform():
    rng = np.random.default_rng(3)
    gts = [car(10 + 8 * i, rng.uniform(-5, 5)) for i in range(5)]
    dets = []
    for g in gts:
        for _ in range(3):
            x, y, _ = g.center
            dets.append((car(x + rng.normal(0, 0.4), y + rng.normal(0, 0.2)), float(rng.uniform())))
    transformed = [(box, 2.0 * np.exp(score) + 1.0) for box, score in dets]
    for positions in (11, 40):
        assert average_precision(match_detections(dets, gts, 0.7), positions) == average_precision(
            match_detections(transformed, gts, 0.7), positions
        )


# --- difficulty, RoI recall and NMS ----------------------------------------------------


@pytest.mark.parametrize(
    "kwargs, expected",
    [
        ({"height": 50, "occlusion": 0, "truncation": 0.0}, Difficulty.easy),
        ({"height": 30, "occlusion": 1, "truncation": 0.2}, Difficulty.moderate),
        ({"height": 50, "occlusion": 2, "truncation": 0.4}, Difficulty.hard),
        ({"height": 10}, Difficulty.ignored),
        ({"height": 50, "occlusion": 3}, Difficulty.ignored),
        ({"height": 50, "truncation": 0.6}, Difficulty.ignored),
    ],
)
def test_assign_difficulty(kwargs, expected):
    assert assign_difficulty(label(**kwargs)) == expected


def test_dontcare_difficulty():
    dontcare = parse_label_line("DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10")
    assert assign_difficulty(dontcare) == Difficulty.ignored


def test_roi_recall_examples():
    gts = [car(10), car(25, 4)]
    assert roi_recall(gts, gts, 0.7) == 1.0
    assert roi_recall([], gts, 0.5) == 0.0
    assert roi_recall([car(10)], gts, 0.5) == 0.5
    assert roi_recall([car(10)], [], 0.5) is None
    with pytest.raises(ContractError):
        roi_recall(gts, gts, 0.0)


def test_roi_recall_monotone():
    rng = np.random.default_rng(8)
    gts = [car(10 + 6 * i, rng.uniform(-3, 3)) for i in range(6)]
    rois = [car(g.center[0] + rng.normal(0, 0.5), g.center[1] + rng.normal(0, 0.3)) for g in gts for _ in range(2)]
    taus = [0.1, 0.3, 0.5, 0.7, 0.9]
    by_tau = [roi_recall(rois, gts, tau) for tau in taus]
    assert all(b <= a for a, b in zip(by_tau, by_tau[1:]))
    by_size = [roi_recall(rois[:k], gts, 0.5) for k in range(len(rois) + 1)]
    assert all(b >= a for a, b in zip(by_size, by_size[1:]))


def test_nms_examples():
    assert nms_3d([(car(10), 0.5)], 0.5) == [(car(10), 0.5)]
    assert nms_3d([(car(10), 0.8), (car(10), 0.9)], 0.5) == [(car(10), 0.9)]
    disjoint = [(car(10), 0.2), (car(20), 0.9), (car(30), 0.5)]
    assert [score for _, score in nms_3d(disjoint, 0.5)] == [0.9, 0.5, 0.2]
    assert nms_3d([], 0.5) == []


def test_eval_config_ranges():
    with pytest.raises(ValidationError):
        EvalConfig(iou_threshold={"Car": 0.0})
    with pytest.raises(ValidationError):
        EvalConfig(recall_positions=20)
    with pytest.raises(ValidationError):
        EvalConfig(roi_recall_taus=(0.5, 1.5))


# --- scene-level evaluation -------------------------------------------------------------


def truth_from_boxes(scene_id, calib, boxes, extra_labels=()):
    labels = [box3d_to_label(box, calib, name, IMAGE_SIZE) for name, box in boxes]
    return SceneTruth(scene_id, tuple(labels) + tuple(extra_labels), calib, IMAGE_SIZE)


def ap_cell(rows, class_name="Car", difficulty="easy"):
    [row] = [
        r for r in rows if r["class"] == class_name and r["difficulty"] == difficulty and r["metric"] == "AP_3D"
    ]
    return row["value"]


def test_scene_hand_case(calib):
    truth = truth_from_boxes("a", calib, [("Car", car(10, -2)), ("Car", car(12, 3))])
    dets = [
        Detection("a", "Car", car(10, -2), 0.9),
        Detection("a", "Car", car(15, 0), 0.8),
        Detection("a", "Car", car(12, 3), 0.7),
    ]
    rows = evaluate_scenes([truth], dets)
    for difficulty in ("easy", "moderate", "hard"):
        assert ap_cell(rows, difficulty=difficulty) == pytest.approx(28 / 33, abs=1e-9)
    assert ap_cell(rows, "Pedestrian") is None


def test_scene_labels_verbatim():
    scenes = [synthetic_scene(f"{i:06d}", seed=i) for i in range(3)]
    truths = [SceneTruth(s.id, s.labels, s.calib, s.image_size) for s in scenes]
    dets = [
        Detection(s.id, lab.class_name, label_to_box3d(lab, s.calib), 1.0)
        for s in scenes
        for lab in s.labels
    ]
    rows = evaluate_scenes(truths, dets)
    values = [r["value"] for r in rows if r["metric"] == "AP_3D" and r["value"] is not None]
    assert values
    assert all(v == pytest.approx(1.0) for v in values)
    recalls = [r["value"] for r in rows if r["metric"].startswith("recall@") and r["value"] is not None]
    assert all(v == pytest.approx(1.0) for v in recalls)
    empty = evaluate_scenes(truths, [])
    assert all(r["value"] in (0.0, None) for r in empty)
    assert any(r["value"] == 0.0 for r in empty if r["metric"] == "AP_3D")


def test_neighbor_class_is_not_a_false_positive(calib):
    truth = truth_from_boxes("a", calib, [("Car", car(10, -2)), ("Van", car(14, 3))])
    dets = [Detection("a", "Car", car(14, 3), 0.95), Detection("a", "Car", car(10, -2), 0.9)]
    assert ap_cell(evaluate_scenes([truth], dets)) == pytest.approx(1.0)
    strict = EvalConfig(neighbor_classes={})
    assert ap_cell(evaluate_scenes([truth], dets, strict)) < 1.0


def test_detection_in_dontcare_region_is_dropped(calib):
    fp = car(16, 0)
    region = project_box3d_to_2d(fp, calib, IMAGE_SIZE)
    dontcare = LabelRecord("DontCare", -1, -1, -10, region, (-1, -1, -1), (-1000, -1000, -1000), -10)
    truth = truth_from_boxes("a", calib, [("Car", car(10, -2))], [dontcare])
    dets = [Detection("a", "Car", fp, 0.95), Detection("a", "Car", car(10, -2), 0.9)]
    assert ap_cell(evaluate_scenes([truth], dets)) == pytest.approx(1.0)
    without = truth_from_boxes("a", calib, [("Car", car(10, -2))])
    assert ap_cell(evaluate_scenes([without], dets)) < 1.0


def test_unknown_scene_detections_are_skipped(calib):
    truth = truth_from_boxes("a", calib, [("Car", car(10, -2))])
    rows = evaluate_scenes([truth], [Detection("b", "Car", car(10, -2), 0.9)])
    assert ap_cell(rows) == 0.0


def test_rows_and_table(calib):
    truth = truth_from_boxes("a", calib, [("Car", car(10, -2))])
    rows = evaluate_scenes([truth], [Detection("a", "Car", car(10, -2), 0.9)], EvalConfig(recall_positions=40))
    assert len(rows) == 3 * 3 * 3
    text = write_result_table(rows)
    table = list(csv.DictReader(io.StringIO(text)))
    assert tuple(table[0]) == RESULT_COLUMNS
    assert table[0] == {"class": "Car", "difficulty": "easy", "metric": "AP_3D", "positions": "40", "value": "1.000000"}
    assert table[1]["metric"] == "recall@0.5"
    assert table[1]["positions"] == ""
    pedestrian = [row for row in table if row["class"] == "Pedestrian"]
    assert all(row["value"] == "" for row in pedestrian)
