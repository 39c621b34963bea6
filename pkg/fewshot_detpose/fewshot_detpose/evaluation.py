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


import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from fewshot_detpose.dataset_io import write_json
from fewshot_detpose.exceptions import InvalidArgumentError
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import box_iou_matrix
from fewshot_detpose.geometry import rotation_error_deg
from fewshot_detpose.synthdata import SceneSample


INTERPOLATIONS = ("all_point", "voc11")
COCO_IOUS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))
COCO_MAX_DETS = (1, 10, 100)


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    cls: int
    box: BoundingBox
    confidence: float
    viewpoint: Optional[Viewpoint] = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.confidence):
            raise InvalidArgumentError(f"confidence must be finite, got {self.confidence}")

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "cls": self.cls,
            "box": self.box.as_list(),
            "confidence": self.confidence,
            "viewpoint": None if self.viewpoint is None else self.viewpoint.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "DetectionRecord":
        viewpoint = data.get("viewpoint")
        return cls(str(data["image_id"]), int(data["cls"]), BoundingBox.from_array(data["box"]),
                   float(data["confidence"]),
                   None if viewpoint is None else Viewpoint.from_dict(viewpoint))


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    cls: int
    box: BoundingBox
    viewpoint: Optional[Viewpoint] = None


def ground_truth_from_scenes(scenes: Iterable[SceneSample]) -> List[GroundTruth]:
    return [GroundTruth(scene.image_id, obj.cls, obj.box, obj.viewpoint)
            for scene in scenes for obj in scene.objects]


@dataclass
class MatchResult:
    """Detections in ranked order with their TP flag and matched GT index."""

    order: np.ndarray  # detection indices, confidence descending
    confidences: np.ndarray
    tp: np.ndarray
    gt_index: np.ndarray  # -1 for false positives
    num_gt: int

    @property
    def num_tp(self) -> int:
        return int(self.tp.sum())

    @property
    def num_fp(self) -> int:
        return int(len(self.tp) - self.tp.sum())

    @property
    def num_fn(self) -> int:
        return self.num_gt - self.num_tp


def rank_detections(dets: Sequence[DetectionRecord]) -> np.ndarray:
    """Confidence descending, equal confidences in input order."""
    confidences = np.array([d.confidence for d in dets], dtype=np.float64)
    return np.argsort(-confidences, kind="stable")


def match_detections(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    iou_thresh: float = 0.5
) -> MatchResult:
    """Greedy one-to-one matching per image and class.

    In confidence order every detection takes the unmatched GT of its image
    and class with the highest IoU, provided it reaches iou_thresh.
    """
    order = rank_detections(dets)
    by_key: Dict[Tuple[str, int], List[int]] = defaultdict(list)
    for g, gt in enumerate(gts):
        by_key[(gt.image_id, gt.cls)].append(g)
    gt_boxes = np.array([gt.box.as_list() for gt in gts]).reshape(-1, 4)
    taken = np.zeros(len(gts), dtype=bool)

    tp = np.zeros(len(order), dtype=bool)
    gt_index = np.full(len(order), -1, dtype=np.int64)
    for rank, d in enumerate(order):
        det = dets[d]
        candidates = [g for g in by_key.get((det.image_id, det.cls), ()) if not taken[g]]
        if not candidates:
            continue
        ious = box_iou_matrix(det.box.as_array(), gt_boxes[candidates])[0]
        best = int(np.argmax(ious))
        if ious[best] >= iou_thresh:
            taken[candidates[best]] = True
            tp[rank] = True
            gt_index[rank] = candidates[best]

    confidences = np.array([dets[d].confidence for d in order], dtype=np.float64)
    return MatchResult(order, confidences, tp, gt_index, len(gts))


def average_precision(
    matches: MatchResult,
    num_gt: Optional[int] = None,
    interpolation: str = "all_point"
) -> Optional[float]:
    """Area under the precision envelope of the ranked matches.

    Returns None when there is nothing to evaluate (no GT, no detection);
    detections without any GT give 0.
    """
    if interpolation not in INTERPOLATIONS:
        raise InvalidArgumentError(
            f"unknown interpolation '{interpolation}', expected {INTERPOLATIONS}")
    num_gt = matches.num_gt if num_gt is None else num_gt
    if num_gt < 0:
        raise InvalidArgumentError(f"num_gt must be >= 0, got {num_gt}")
    if num_gt == 0:
        return None if len(matches.tp) == 0 else 0.0
    if len(matches.tp) == 0:
        return 0.0

    tp = np.cumsum(matches.tp)
    fp = np.cumsum(~matches.tp)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).eps)

    if interpolation == "voc11":
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0.0, 1.0, 11)]))

    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _split_by_class(items, class_ids):
    grouped = {c: [] for c in class_ids}
    for item in items:
        if item.cls in grouped:
            grouped[item.cls].append(item)
    return grouped


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return float(np.mean(present)) if present else None


def _top_k_per_image(dets: Sequence[DetectionRecord], k: int) -> List[DetectionRecord]:
    kept, seen = [], defaultdict(int)
    for d in rank_detections(dets):
        if seen[dets[d].image_id] < k:
            seen[dets[d].image_id] += 1
            kept.append(dets[d])
    return kept


def coco_metrics(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    interpolation: str = "all_point"
) -> Dict[str, Optional[float]]:
    """AP averaged over IoU 0.5:0.05:0.95, AP50, AP75 and AR@{1, 10, 100} of one class."""
    aps = {iou: average_precision(match_detections(dets, gts, iou), interpolation=interpolation)
           for iou in COCO_IOUS}
    metrics = {
        "AP": None if aps[0.5] is None else float(np.mean([aps[t] for t in COCO_IOUS])),
        "AP50": aps[0.5],
        "AP75": aps[0.75],
    }
    for k in COCO_MAX_DETS:
        if not gts:
            metrics[f"AR{k}"] = None
            continue
        top = _top_k_per_image(dets, k)
        metrics[f"AR{k}"] = float(np.mean([match_detections(top, gts, iou).num_tp / len(gts)
                                           for iou in COCO_IOUS]))
    return metrics


@dataclass
class EvalReport:
    """Per-class metric rows, their means and optional summary rows."""

    title: str
    metrics: List[str]
    rows: List[dict]
    config: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    summary_rows: List[dict] = field(default_factory=list)
    means: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.means = {m: _mean(row.get(m) for row in self.rows) for m in self.metrics}

    def value(self, class_id: int, metric: str) -> Optional[float]:
        for row in self.rows:
            if row["class_id"] == class_id:
                return row[metric]
        raise KeyError(class_id)

    def to_frame(self) -> pd.DataFrame:
        mean_row = {"class_id": None, "name": "MEAN", **self.means}
        frame = pd.DataFrame(self.rows + [mean_row] + self.summary_rows)
        return frame.reindex(columns=["class_id", "name", *self.metrics,
                                      *[c for c in frame.columns
                                        if c not in ("class_id", "name", *self.metrics)]])

    def to_dict(self) -> dict:
        return {"title": self.title, "metrics": self.metrics, "rows": self.rows,
                "means": self.means, "summary_rows": self.summary_rows,
                "counts": self.counts, "config": self.config}

    def to_markdown(self) -> str:
        return f"## {self.title}\n\n" + self.to_frame().to_markdown(index=False, floatfmt=".4f")

    def save(self, out_dir: Union[str, Path], stem: str) -> None:
        """<stem>.json, <stem>.csv and <stem>.md under out_dir."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / f"{stem}.json", self.to_dict())
        self.to_frame().to_csv(out_dir / f"{stem}.csv", index=False)
        (out_dir / f"{stem}.md").write_text(self.to_markdown() + "\n")


def detection_report(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    class_names: Mapping[int, str],
    iou_thresh: float = 0.5,
    interpolation: str = "all_point",
    config: Optional[dict] = None
) -> EvalReport:
    det_by_class = _split_by_class(dets, class_names)
    gt_by_class = _split_by_class(gts, class_names)

    rows = []
    for c, name in class_names.items():
        coco = coco_metrics(det_by_class[c], gt_by_class[c], interpolation)
        ap = average_precision(match_detections(det_by_class[c], gt_by_class[c], iou_thresh),
                               interpolation=interpolation)
        rows.append({"class_id": c, "name": name, f"AP{int(round(iou_thresh * 100))}": ap,
                     **{k: v for k, v in coco.items() if k != "AP50"},
                     "num_gt": len(gt_by_class[c]), "num_dets": len(det_by_class[c])})

    ap_name = f"AP{int(round(iou_thresh * 100))}"
    metrics = [ap_name] + [m for m in ("AP", "AP75", "AR1", "AR10", "AR100") if m != ap_name]
    return EvalReport("detection", metrics, rows, config or {},
                      {"classes": len(rows), "gt": sum(r["num_gt"] for r in rows),
                       "detections": sum(r["num_dets"] for r in rows)})


def viewpoint_errors(preds: Sequence[Viewpoint], gts: Sequence[Viewpoint]) -> np.ndarray:
    if len(preds) != len(gts):
        raise InvalidArgumentError(f"{len(preds)} predictions for {len(gts)} ground truths")
    return np.array([rotation_error_deg(p, g) for p, g in zip(preds, gts)], dtype=np.float64)


def viewpoint_metrics(
    preds: Sequence[Viewpoint],
    gts: Sequence[Viewpoint],
    angle_thresh: float = 30.0
) -> Optional[Tuple[float, float]]:
    """(Acc30, MedErr): share of errors strictly below angle_thresh and median error.

    None for empty input.
    """
    return summarize_errors(viewpoint_errors(preds, gts), angle_thresh)


def summarize_errors(
    errors: Sequence[float],
    angle_thresh: float = 30.0
) -> Optional[Tuple[float, float]]:
    errors = np.asarray(errors, dtype=np.float64)
    if len(errors) == 0:
        return None
    return float(np.mean(errors < angle_thresh)), float(np.median(errors))


def viewpoint_report(
    preds: Mapping[int, Sequence[Viewpoint]],
    gts: Mapping[int, Sequence[Viewpoint]],
    class_names: Mapping[int, str],
    symmetric: Optional[Mapping[int, bool]] = None,
    angle_thresh: float = 30.0,
    config: Optional[dict] = None,
    title: str = "viewpoint"
) -> EvalReport:
    """Per-class Acc30 / MedErr plus TOTAL and symmetric / non-symmetric rows.

    TOTAL and group rows average Acc30 over classes and take the median of
    all their errors.
    """
    acc_name = f"Acc{int(round(angle_thresh))}"
    rows, errors = [], {}
    for c, name in class_names.items():
        errors[c] = viewpoint_errors(preds.get(c, []), gts.get(c, []))
        result = viewpoint_metrics(preds.get(c, []), gts.get(c, []), angle_thresh)
        rows.append({"class_id": c, "name": name,
                     acc_name: None if result is None else result[0],
                     "MedErr": None if result is None else result[1],
                     "count": len(errors[c])})

    def summary(label: str, members: List[int]) -> dict:
        accs = [r[acc_name] for r in rows if r["class_id"] in members]
        pooled = np.concatenate([errors[c] for c in members]) if members else np.zeros(0)
        return {"class_id": None, "name": label, acc_name: _mean(accs),
                "MedErr": float(np.median(pooled)) if len(pooled) else None,
                "count": int(len(pooled))}

    summaries = [summary("TOTAL", list(class_names))]
    if symmetric is not None:
        summaries.append(summary("symmetric", [c for c in class_names if symmetric.get(c)]))
        summaries.append(summary("non-symmetric",
                                 [c for c in class_names if not symmetric.get(c)]))

    return EvalReport(title, [acc_name, "MedErr"], rows, config or {},
                      {"classes": len(rows), "objects": sum(r["count"] for r in rows)},
                      summaries)


def joint_eval(
    dets: Sequence[DetectionRecord],
    gts: Sequence[GroundTruth],
    class_names: Mapping[int, str],
    iou_thresh: float = 0.5,
    angle_thresh: float = 30.0,
    config: Optional[dict] = None,
    title: str = "joint"
) -> EvalReport:
    """Share of GT objects found by a correct detection (class and IoU, greedy
    by confidence) whose viewpoint error is below angle_thresh."""
    det_by_class = _split_by_class(dets, class_names)
    gt_by_class = _split_by_class(gts, class_names)
    name = f"Joint{int(round(angle_thresh))}"

    rows = []
    for c, class_name in class_names.items():
        class_dets, class_gts = det_by_class[c], gt_by_class[c]
        matches = match_detections(class_dets, class_gts, iou_thresh)
        correct = 0
        for rank in np.nonzero(matches.tp)[0]:
            det = class_dets[matches.order[rank]]
            gt = class_gts[matches.gt_index[rank]]
            if det.viewpoint is None or gt.viewpoint is None:
                raise InvalidArgumentError(
                    "joint evaluation needs viewpoints on detections and GT")
            if rotation_error_deg(det.viewpoint, gt.viewpoint) < angle_thresh:
                correct += 1
        recall = matches.num_tp / len(class_gts) if class_gts else None
        rows.append({"class_id": c, "name": class_name,
                     name: correct / len(class_gts) if class_gts else None,
                     "recall": recall, "num_gt": len(class_gts)})

    return EvalReport(title, [name, "recall"], rows, config or {},
                      {"classes": len(rows), "gt": sum(r["num_gt"] for r in rows)})
