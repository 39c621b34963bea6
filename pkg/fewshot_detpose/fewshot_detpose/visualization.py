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


from typing import Mapping, Sequence, Tuple

import cv2
import numpy as np
from ultralytics.utils.plotting import colors

from fewshot_detpose.evaluation import DetectionRecord
from fewshot_detpose.geometry import euler_to_rotation


AXIS_COLORS = ((255, 0, 0), (0, 255, 0), (0, 0, 255))


def to_canvas(image: np.ndarray, scale: int) -> np.ndarray:
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    return cv2.resize(image, None, fx=scale, fy=scale, interpolation=cv2.INTER_NEAREST)


def draw_box(
    canvas: np.ndarray,
    record: DetectionRecord,
    label: str,
    color: Tuple[int, int, int],
    scale: int
) -> np.ndarray:

    min_pt = (round(record.box.x1 * scale), round(record.box.y1 * scale))
    max_pt = (round(record.box.x2 * scale), round(record.box.y2 * scale))

    # draw box
    cv2.rectangle(canvas, min_pt, max_pt, color, 1)

    # write text
    text = "{} ({:.2f})".format(label, record.confidence)
    pos = (min_pt[0] + 2, max(min_pt[1] - 4, 10))
    cv2.putText(canvas, text, pos, cv2.FONT_HERSHEY_SIMPLEX, 0.35, color, 1, cv2.LINE_AA)

    if record.viewpoint is not None:
        v = record.viewpoint
        text = "{:.0f}/{:.0f}/{:.0f}".format(v.azi, v.ele, v.inp)
        pos = (min_pt[0] + 2, min(max_pt[1] + 12, canvas.shape[0] - 2))
        cv2.putText(canvas, text, pos, cv2.FONT_HERSHEY_SIMPLEX, 0.35, color, 1, cv2.LINE_AA)

    return canvas


def draw_axes(
    canvas: np.ndarray,
    record: DetectionRecord,
    scale: int,
    length: float = 0.4
) -> np.ndarray:
    """Object x/y/z axes at the box centre, projected like the renderer does."""
    if record.viewpoint is None:
        return canvas

    cx, cy = record.box.center
    size = min(record.box.width, record.box.height) * scale
    axes = euler_to_rotation(record.viewpoint) @ (np.eye(3) * length)
    origin = (round(cx * scale), round(cy * scale))
    for k, color in enumerate(AXIS_COLORS):
        tip = (round(cx * scale + size * axes[0, k]), round(cy * scale - size * axes[1, k]))
        cv2.arrowedLine(canvas, origin, tip, color, 1, cv2.LINE_AA, tipLength=0.2)
    return canvas


def draw_predictions(
    image: np.ndarray,
    records: Sequence[DetectionRecord],
    class_names: Mapping[int, str],
    scale: int = 4
) -> np.ndarray:
    """RGB uint8 overlay of labelled boxes and predicted viewpoints."""
    canvas = to_canvas(image, scale)
    for record in records:
        color = colors(record.cls)
        canvas = draw_box(canvas, record, class_names.get(record.cls, str(record.cls)),
                          color, scale)
        canvas = draw_axes(canvas, record, scale)
    return canvas
