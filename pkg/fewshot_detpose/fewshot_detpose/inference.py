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


from typing import Dict, List, Optional, Sequence, Tuple

from fewshot_detpose.detector import FewShotDetector
from fewshot_detpose.evaluation import DetectionRecord
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.synthdata import SceneSample
from fewshot_detpose.viewpoint import FewShotViewpointNet


def detect_scenes(
    detector: FewShotDetector,
    scenes: Sequence[SceneSample],
    class_ids: Optional[Sequence[int]] = None,
    score_threshold: Optional[float] = None
) -> List[DetectionRecord]:
    detector.eval()
    records = []
    for scene in scenes:
        for det in detector.detect(scene.image, class_ids=class_ids,
                                   score_threshold=score_threshold):
            records.append(DetectionRecord(scene.image_id, det.class_id, det.box, det.score))
    return records


def gt_box_records(
    scenes: Sequence[SceneSample],
    class_ids: Sequence[int]
) -> List[DetectionRecord]:
    """Ground-truth boxes as confidence-1 detections."""
    wanted = set(class_ids)
    return [DetectionRecord(scene.image_id, obj.cls, obj.box, 1.0)
            for scene in scenes for obj in scene.objects if obj.cls in wanted]


def attach_viewpoints(
    net: FewShotViewpointNet,
    scenes: Sequence[SceneSample],
    records: Sequence[DetectionRecord]
) -> List[DetectionRecord]:
    """Viewpoint of every detection, conditioned on its (predicted) class."""
    net.eval()
    by_image: Dict[str, List[int]] = {}
    for i, record in enumerate(records):
        by_image.setdefault(record.image_id, []).append(i)

    out = list(records)
    for scene in scenes:
        indices = by_image.get(scene.image_id, [])
        if not indices:
            continue
        viewpoints = net.estimate(scene.image,
                                  [records[i].box for i in indices],
                                  [records[i].cls for i in indices])
        for i, v in zip(indices, viewpoints):
            r = records[i]
            out[i] = DetectionRecord(r.image_id, r.cls, r.box, r.confidence, v)
    return out


def estimate_gt_viewpoints(
    net: FewShotViewpointNet,
    scenes: Sequence[SceneSample],
    class_ids: Sequence[int]
) -> Tuple[Dict[int, List[Viewpoint]], Dict[int, List[Viewpoint]]]:
    """Predicted and true viewpoints per class with ground-truth boxes and classes."""
    net.eval()
    preds: Dict[int, List[Viewpoint]] = {c: [] for c in class_ids}
    gts: Dict[int, List[Viewpoint]] = {c: [] for c in class_ids}
    for scene in scenes:
        objects = [o for o in scene.objects if o.cls in preds]
        if not objects:
            continue
        viewpoints = net.estimate(scene.image, [o.box for o in objects], [o.cls for o in objects])
        for obj, v in zip(objects, viewpoints):
            preds[obj.cls].append(v)
            gts[obj.cls].append(obj.viewpoint)
    return preds, gts
