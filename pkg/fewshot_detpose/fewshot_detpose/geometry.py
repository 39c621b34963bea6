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
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from fewshot_detpose.exceptions import DegenerateBoxError
from fewshot_detpose.exceptions import InvalidCodeError


NUM_BINS = 24
BIN_SIZE = 360.0 / NUM_BINS
OFFSET_TOLERANCE = 1e-12

# largest log-scale change accepted when decoding box deltas
BBOX_XFORM_CLIP = math.log(1000.0 / 16)


def _wrap(angle: float, low: float, period: float = 360.0) -> float:
    # values already in range are returned untouched, keeps normalize idempotent
    if low <= angle < low + period:
        return float(angle)
    wrapped = (angle - low) % period
    if wrapped >= period:
        wrapped -= period
    return float(wrapped + low)


def angle_difference(a: float, b: float) -> float:
    """Signed smallest difference a - b in degrees, in [-180, 180)."""
    return _wrap(a - b, -180.0)


@dataclass(frozen=True)
class Viewpoint:
    """Euler triple in degrees: azimuth, elevation and in-plane rotation."""

    azi: float
    ele: float
    inp: float

    def normalized(self) -> "Viewpoint":
        return normalize_viewpoint(self)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.azi, self.ele, self.inp)

    def to_dict(self) -> dict:
        return {"azi": self.azi, "ele": self.ele, "inp": self.inp}

    @classmethod
    def from_dict(cls, data: dict) -> "Viewpoint":
        return cls(float(data["azi"]), float(data["ele"]), float(data["inp"]))


def normalize_viewpoint(v: Viewpoint) -> Viewpoint:
    azi, ele, inp = v.azi, _wrap(v.ele, -180.0), v.inp

    # fold elevation back into [-90, 90], same rotation under Rz·Rx·Ry
    if ele > 90.0:
        azi, ele, inp = azi + 180.0, 180.0 - ele, inp + 180.0
    elif ele < -90.0:
        azi, ele, inp = azi + 180.0, -180.0 - ele, inp + 180.0

    return Viewpoint(_wrap(azi, 0.0), float(ele), _wrap(inp, -180.0))


def _rot_x(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[1.0, 0.0, 0.0],
                     [0.0, c, -s],
                     [0.0, s, c]])


def _rot_y(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, 0.0, s],
                     [0.0, 1.0, 0.0],
                     [-s, 0.0, c]])


def _rot_z(deg: float) -> np.ndarray:
    c, s = math.cos(math.radians(deg)), math.sin(math.radians(deg))
    return np.array([[c, -s, 0.0],
                     [s, c, 0.0],
                     [0.0, 0.0, 1.0]])


def euler_to_rotation(v: Viewpoint) -> np.ndarray:
    """Rotation R = Rz(inp) · Rx(ele) · Ry(azi).

    Azimuth turns the object about the world up axis (y), elevation tilts
    it about the camera x axis and the in-plane angle spins it about the
    camera viewing axis (z).
    """
    return _rot_z(v.inp) @ _rot_x(v.ele) @ _rot_y(v.azi)


def rotation_error_deg(a: Viewpoint, b: Viewpoint) -> float:
    """Geodesic distance between the two rotations, in degrees."""
    m = euler_to_rotation(a).T @ euler_to_rotation(b)

    # atan2 of the skew and trace parts stays accurate near 0 and 180
    cos_angle = (np.trace(m) - 1.0) / 2.0
    sin_angle = np.linalg.norm(m - m.T) / (2.0 * math.sqrt(2.0))
    return math.degrees(math.atan2(sin_angle, cos_angle))


@dataclass(frozen=True)
class AngleBinCode:
    bin_index: int
    offset: float


def encode_angle(theta: float) -> AngleBinCode:
    theta = _wrap(theta, 0.0)
    scaled = theta / BIN_SIZE
    bin_index = min(int(math.floor(scaled)), NUM_BINS - 1)
    return AngleBinCode(bin_index, scaled - bin_index - 0.5)


def decode_angle(code: AngleBinCode) -> float:
    if not (isinstance(code.bin_index, (int, np.integer))
            and 0 <= code.bin_index < NUM_BINS):
        raise InvalidCodeError(
            f"bin index {code.bin_index} outside [0, {NUM_BINS})")
    if not abs(code.offset) <= 0.5 + OFFSET_TOLERANCE:
        raise InvalidCodeError(f"offset {code.offset} outside [-0.5, 0.5]")
    return (int(code.bin_index) + 0.5 + float(code.offset)) * BIN_SIZE


def encode_angle_bins(
    v: Viewpoint
) -> Tuple[AngleBinCode, AngleBinCode, AngleBinCode]:
    v = normalize_viewpoint(v)
    return tuple(encode_angle(theta) for theta in v.as_tuple())


def decode_angle_bins(codes: Sequence[AngleBinCode]) -> Viewpoint:
    if len(codes) != 3:
        raise InvalidCodeError(f"expected 3 angle codes, got {len(codes)}")
    azi, ele, inp = (decode_angle(code) for code in codes)
    return normalize_viewpoint(Viewpoint(azi, ele, inp))


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in pixels, (x1, y1) top-left and (x2, y2) bottom-right."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBoxError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x1 + 0.5 * self.width, self.y1 + 0.5 * self.height)

    def as_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "BoundingBox":
        x1, y1, x2, y2 = (float(v) for v in values)
        return cls(x1, y1, x2, y2)

    def clip(self, width: float, height: float) -> "BoundingBox":
        return BoundingBox(min(max(self.x1, 0.0), width),
                           min(max(self.y1, 0.0), height),
                           min(max(self.x2, 0.0), width),
                           min(max(self.y2, 0.0), height))

    def pixel_bounds(self, width: int, height: int) -> Tuple[int, int, int, int]:
        """Pixel-rounded box [floor(x1), ceil(x2)) x [floor(y1), ceil(y2)), clipped."""
        x1 = min(max(int(math.floor(self.x1)), 0), width)
        y1 = min(max(int(math.floor(self.y1)), 0), height)
        x2 = min(max(int(math.ceil(self.x2)), 0), width)
        y2 = min(max(int(math.ceil(self.y2)), 0), height)
        return x1, y1, x2, y2


def box_iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def box_iou_matrix(boxes_a: np.ndarray, boxes_b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of (N, 4) and (M, 4) xyxy arrays."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 4)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 4)

    lt = np.maximum(boxes_a[:, None, :2], boxes_b[None, :, :2])
    rb = np.minimum(boxes_a[:, None, 2:], boxes_b[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]

    area_a = (boxes_a[:, 2] - boxes_a[:, 0]) * (boxes_a[:, 3] - boxes_a[:, 1])
    area_b = (boxes_b[:, 2] - boxes_b[:, 0]) * (boxes_b[:, 3] - boxes_b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def apply_box_deltas(boxes: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    """Vectorized (dx, dy, dw, dh) decoding of (N, 4) boxes."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)

    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    ctr_x = boxes[:, 0] + 0.5 * widths
    ctr_y = boxes[:, 1] + 0.5 * heights

    dw = np.minimum(deltas[:, 2], BBOX_XFORM_CLIP)
    dh = np.minimum(deltas[:, 3], BBOX_XFORM_CLIP)

    pred_ctr_x = ctr_x + deltas[:, 0] * widths
    pred_ctr_y = ctr_y + deltas[:, 1] * heights
    pred_w = widths * np.exp(dw)
    pred_h = heights * np.exp(dh)

    return np.stack([pred_ctr_x - 0.5 * pred_w,
                     pred_ctr_y - 0.5 * pred_h,
                     pred_ctr_x + 0.5 * pred_w,
                     pred_ctr_y + 0.5 * pred_h], axis=1)


def compute_box_deltas(boxes: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Inverse of apply_box_deltas: deltas mapping boxes onto targets."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)

    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    ctr_x = boxes[:, 0] + 0.5 * widths
    ctr_y = boxes[:, 1] + 0.5 * heights

    t_widths = targets[:, 2] - targets[:, 0]
    t_heights = targets[:, 3] - targets[:, 1]
    t_ctr_x = targets[:, 0] + 0.5 * t_widths
    t_ctr_y = targets[:, 1] + 0.5 * t_heights

    return np.stack([(t_ctr_x - ctr_x) / widths,
                     (t_ctr_y - ctr_y) / heights,
                     np.log(t_widths / widths),
                     np.log(t_heights / heights)], axis=1)


def apply_box_delta(
    box: BoundingBox,
    delta: Sequence[float],
    clip_to: Optional[Tuple[float, float]] = None
) -> BoundingBox:
    """Decode one delta; clip_to is (width, height) of the image."""
    x1, y1, x2, y2 = apply_box_deltas(box.as_array(), np.asarray(delta))[0]
    if clip_to is not None:
        width, height = clip_to
        x1, x2 = np.clip([x1, x2], 0.0, width)
        y1, y2 = np.clip([y1, y2], 0.0, height)
    return BoundingBox(float(x1), float(y1), float(x2), float(y2))


def compute_box_delta(box: BoundingBox, target: BoundingBox) -> np.ndarray:
    return compute_box_deltas(box.as_array(), target.as_array())[0]
