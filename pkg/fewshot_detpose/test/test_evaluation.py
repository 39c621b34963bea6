# Copyright (C) 2024  fewshot_detpose contributors

# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.

# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.

# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.


import json

import numpy as np
import pytest

from fewshot_detpose.evaluation import DetectionRecord
from fewshot_detpose.evaluation import GroundTruth
from fewshot_detpose.evaluation import average_precision
from fewshot_detpose.evaluation import coco_metrics
from fewshot_detpose.evaluation import detection_report
from fewshot_detpose.evaluation import joint_eval
from fewshot_detpose.evaluation import match_detections
from fewshot_detpose.evaluation import summarize_errors
from fewshot_detpose.evaluation import viewpoint_metrics
from fewshot_detpose.evaluation import viewpoint_report
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import box_iou


def box(x1, y1, x2, y2):
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def det(image_id, b, confidence, cls=0, viewpoint=None):
    return DetectionRecord(image_id, cls, b, confidence, viewpoint)


def gt(image_id, b, cls=0, viewpoint=None):
    return GroundTruth(image_id, cls, b, viewpoint)


def reference_matching(dets, gts, iou_thresh):
    """TP flags in ranked order, by plain loops over every candidate GT."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = set()
    flags = []
    for i in order:
        best, best_iou = None, -1.0
        for g, truth in enumerate(gts):
            if g in taken or truth.image_id != dets[i].image_id or truth.cls != dets[i].cls:
                continue
            iou = box_iou(dets[i].box, truth.box)
            if iou > best_iou:
                best, best_iou = g, iou
        if best is not None and best_iou >= iou_thresh:
            taken.add(best)
            flags.append(True)
        else:
            flags.append(False)
    return flags


def reference_envelope_ap(tp_flags, num_gt):
    """Sum over recall steps of the best precision at any recall at or beyond the step."""
    tp = fp = 0
    points = []
    for flag in tp_flags:
        tp, fp = tp + flag, fp + (not flag)
        points.append((tp / num_gt, tp / (tp + fp)))
    ap, previous = 0.0, 0.0
    for recall in sorted({r for r, _ in points}):
        ap += (recall - previous) * max(p for r, p in points if r >= recall)
        previous = recall
    return ap


def test_match_single_exact_detection():
    matches = match_detections([det("a", box(0, 0, 10, 10), 0.9)], [gt("a", box(0, 0, 10, 10))])
    assert (matches.num_tp, matches.num_fp, matches.num_fn) == (1, 0, 0)


def test_match_duplicate_detections():
    dets = [det("a", box(0, 0, 10, 10), 0.6), det("a", box(0, 0, 10, 10), 0.8)]
    matches = match_detections(dets, [gt("a", box(0, 0, 10, 10))])
    assert matches.order.tolist() == [1, 0]
    assert matches.tp.tolist() == [True, False]
    assert matches.gt_index.tolist() == [0, -1]


def test_match_respects_image_and_class():
    gts = [gt("a", box(0, 0, 10, 10))]
    dets = [det("b", box(0, 0, 10, 10), 0.9), det("a", box(0, 0, 10, 10), 0.8, cls=1)]
    assert match_detections(dets, gts).num_tp == 0


def test_match_agrees_with_reference():
    rng = np.random.default_rng(0)
    for _ in range(50):
        gts = []
        for _ in range(10):
            x, y = rng.uniform(0, 60, size=2)
            gts.append(gt(str(rng.integers(2)), box(x, y, x + 20, y + 20), int(rng.integers(2))))
        dets = []
        for _ in range(20):
            source = gts[rng.integers(len(gts))]
            jitter = rng.normal(0, 4, size=4)
            b = source.box.as_array() + jitter
            b[2:] = np.maximum(b[2:], b[:2] + 1)
            dets.append(det(source.image_id, BoundingBox.from_array(b), float(rng.random()),
                            cls=source.cls if rng.random() < 0.8 else 1 - source.cls))
        matches = match_detections(dets, gts, 0.5)
        assert matches.tp.tolist() == reference_matching(dets, gts, 0.5)


def test_average_precision_examples():
    gts = [gt("a", box(0, 0, 10, 10)), gt("a", box(20, 20, 30, 30))]
    perfect = [det("a", box(0, 0, 10, 10), 0.9), det("a", box(20, 20, 30, 30), 0.8)]
    assert average_precision(match_detections(perfect, gts)) == 1.0
    assert average_precision(match_detections(perfect, gts), interpolation="voc11") == 1.0

    wrong = [det("a", box(40, 40, 50, 50), 0.9)]
    assert average_precision(match_detections(wrong, gts)) == 0.0

    assert average_precision(match_detections([], [])) is None
    assert average_precision(match_detections(wrong, [])) == 0.0
    with pytest.raises(ValueError):
        average_precision(match_detections(perfect, gts), interpolation="trapezoid")


def test_average_precision_five_detections():
    gts = [gt("a", box(0, 0, 10, 10)), gt("a", box(20, 0, 30, 10)), gt("a", box(40, 0, 50, 10))]
    dets = [det("a", box(0, 0, 10, 10), 0.9), det("a", box(0, 30, 10, 40), 0.8),
            det("a", box(20, 0, 30, 10), 0.7), det("a", box(20, 30, 30, 40), 0.6),
            det("a", box(40, 0, 50, 10), 0.5)]
    matches = match_detections(dets, gts)
    assert matches.tp.tolist() == [True, False, True, False, True]
    ap = average_precision(matches)
    assert ap == pytest.approx(34 / 45)
    assert ap == pytest.approx(reference_envelope_ap(matches.tp.tolist(), 3))


def test_average_precision_ignores_monotone_rescaling():
    rng = np.random.default_rng(1)
    gts = [gt("a", box(10 * i, 0, 10 * i + 8, 8)) for i in range(6)]
    dets = [det("a", box(10 * i + rng.uniform(-3, 3), 0, 10 * i + 8, 8), float(rng.random()))
            for i in rng.integers(0, 6, size=12)]
    rescaled = [det(d.image_id, d.box, float(np.exp(3 * d.confidence) + 1)) for d in dets]
    assert average_precision(match_detections(dets, gts)) == \
        average_precision(match_detections(rescaled, gts))


def test_coco_metrics_perfect():
    gts = [gt("a", box(0, 0, 10, 10)), gt("b", box(5, 5, 25, 25))]
    dets = [det("a", box(0, 0, 10, 10), 0.9), det("b", box(5, 5, 25, 25), 0.7)]
    metrics = coco_metrics(dets, gts)
    for name in ("AP", "AP50", "AP75", "AR1", "AR10", "AR100"):
        assert metrics[name] == pytest.approx(1.0)
    assert coco_metrics([], [])["AR1"] is None


def test_detection_report_means_skip_missing_classes(tmp_path):
    gts = [gt("a", box(0, 0, 10, 10), cls=0), gt("a", box(20, 20, 30, 30), cls=1)]
    dets = [det("a", box(0, 0, 10, 10), 0.9, cls=0), det("a", box(50, 50, 60, 60), 0.9, cls=1)]
    report = detection_report(dets, gts, {0: "bar_0", 1: "lshape_1", 2: "pyramid_2"},
                              config={"iou": 0.5})
    assert report.metrics[0] == "AP50"
    assert report.value(0, "AP50") == 1.0
    assert report.value(1, "AP50") == 0.0
    assert report.value(2, "AP50") is None
    assert report.means["AP50"] == 0.5
    assert report.counts == {"classes": 3, "gt": 2, "detections": 2}

    report.save(tmp_path, "detection")
    for suffix in ("json", "csv", "md"):
        assert (tmp_path / f"detection.{suffix}").exists()
    with open(tmp_path / "detection.json") as f:
        saved = json.load(f)
    assert saved["means"]["AP50"] == 0.5
    assert saved["config"] == {"iou": 0.5}
    assert "MEAN" in (tmp_path / "detection.md").read_text()


def test_viewpoint_metrics_examples():
    exact = [Viewpoint(10.0, 20.0, 30.0), Viewpoint(200.0, -45.0, 90.0)]
    acc, med = viewpoint_metrics(exact, exact)
    assert acc == 1.0
    assert med == pytest.approx(0.0, abs=1e-6)

    zero = Viewpoint(0.0, 0.0, 0.0)
    acc, med = viewpoint_metrics([Viewpoint(10.0, 0.0, 0.0), Viewpoint(50.0, 0.0, 0.0)],
                                 [zero, zero])
    assert acc == 0.5
    assert med == pytest.approx(30.0)

    assert summarize_errors([30.0]) == (0.0, 30.0)
    assert summarize_errors([29.9, 30.0, 31.0, 5.0]) == (0.5, pytest.approx(29.95))
    assert viewpoint_metrics([], []) is None
    with pytest.raises(ValueError):
        viewpoint_metrics([zero], [])


def test_viewpoint_metrics_ignore_order():
    rng = np.random.default_rng(2)
    preds = [Viewpoint(*rng.uniform(-90, 90, size=3)) for _ in range(9)]
    gts = [Viewpoint(*rng.uniform(-90, 90, size=3)) for _ in range(9)]
    order = rng.permutation(9)
    assert viewpoint_metrics(preds, gts) == \
        viewpoint_metrics([preds[i] for i in order], [gts[i] for i in order])


def test_viewpoint_report_groups():
    zero = Viewpoint(0.0, 0.0, 0.0)
    preds = {0: [zero], 1: [Viewpoint(10.0, 0.0, 0.0), Viewpoint(50.0, 0.0, 0.0)]}
    gts = {0: [zero], 1: [zero, zero]}
    report = viewpoint_report(preds, gts, {0: "bar_0", 1: "lshape_1"}, {0: True, 1: False})
    assert report.metrics == ["Acc30", "MedErr"]
    assert report.means["Acc30"] == pytest.approx(0.75)

    total, symmetric, other = report.summary_rows
    assert total["name"] == "TOTAL"
    assert total["Acc30"] == pytest.approx(0.75)
    assert total["MedErr"] == pytest.approx(10.0)
    assert total["count"] == 3
    assert symmetric["Acc30"] == 1.0
    assert other["MedErr"] == pytest.approx(30.0)


def joint_scenario():
    """Six GT objects of one class; one is missed and one viewpoint is 90 degrees off."""
    good = Viewpoint(40.0, 10.0, 0.0)
    gts, dets = [], []
    for i in range(6):
        image_id = "img_a" if i < 3 else "img_b"
        b = box(20 * (i % 3), 0, 20 * (i % 3) + 15, 15)
        gts.append(gt(image_id, b, viewpoint=good))
        if i == 5:
            continue
        predicted = Viewpoint(130.0, 10.0, 0.0) if i == 4 else good
        dets.append(det(image_id, b, 0.9 - 0.1 * i, viewpoint=predicted))
    return dets, gts


def test_joint_eval_hand_case():
    dets, gts = joint_scenario()
    report = joint_eval(dets, gts, {0: "bar_0"})
    assert report.value(0, "Joint30") == pytest.approx(4 / 6)
    assert report.value(0, "recall") == pytest.approx(5 / 6)
    assert report.value(0, "Joint30") <= report.value(0, "recall")


def test_joint_eval_extremes():
    dets, gts = joint_scenario()
    perfect = [det(g.image_id, g.box, 0.5, viewpoint=g.viewpoint) for g in gts]
    assert joint_eval(perfect, gts, {0: "bar_0"}).value(0, "Joint30") == 1.0

    flipped = [det(d.image_id, d.box, d.confidence, viewpoint=Viewpoint(220.0, 10.0, 0.0))
               for d in perfect]
    assert joint_eval(flipped, gts, {0: "bar_0"}).value(0, "Joint30") == 0.0

    with pytest.raises(ValueError):
        joint_eval([det("img_a", gts[0].box, 0.5)], gts, {0: "bar_0"})


def test_detection_record_rejects_nan_confidence():
    with pytest.raises(ValueError):
        det("a", box(0, 0, 1, 1), float("nan"))
