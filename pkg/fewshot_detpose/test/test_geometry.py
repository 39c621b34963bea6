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

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from fewshot_detpose.exceptions import DegenerateBoxError
from fewshot_detpose.exceptions import InvalidCodeError
from fewshot_detpose.geometry import AngleBinCode
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import angle_difference
from fewshot_detpose.geometry import apply_box_delta
from fewshot_detpose.geometry import box_iou
from fewshot_detpose.geometry import box_iou_matrix
from fewshot_detpose.geometry import compute_box_delta
from fewshot_detpose.geometry import decode_angle
from fewshot_detpose.geometry import decode_angle_bins
from fewshot_detpose.geometry import encode_angle
from fewshot_detpose.geometry import encode_angle_bins
from fewshot_detpose.geometry import euler_to_rotation
from fewshot_detpose.geometry import normalize_viewpoint
from fewshot_detpose.geometry import rotation_error_deg


def random_viewpoints(n, seed=0):
    rng = np.random.default_rng(seed)
    return [normalize_viewpoint(Viewpoint(rng.uniform(0, 360), rng.uniform(-90, 90),
                                          rng.uniform(-180, 180)))
            for _ in range(n)]


def quaternion(v):
    # intrinsic composition about z, x, y: Rz(inp) Rx(ele) Ry(azi)
    return Rotation.from_euler("ZXY", [v.inp, v.ele, v.azi], degrees=True)


def angle_gap(a, b, period=360.0):
    d = abs(a - b) % period
    return min(d, period - d)


def test_normalize_ranges_and_idempotence():
    rng = np.random.default_rng(1)
    for _ in range(500):
        v = Viewpoint(*rng.uniform(-720, 720, size=3))
        n = normalize_viewpoint(v)
        assert 0.0 <= n.azi < 360.0
        assert -90.0 <= n.ele <= 90.0
        assert -180.0 <= n.inp < 180.0
        assert normalize_viewpoint(n) == n
        assert rotation_error_deg(n, n) == pytest.approx(0.0, abs=1e-6)
        np.testing.assert_allclose(euler_to_rotation(v), euler_to_rotation(n), atol=1e-9)


def test_angle_difference():
    assert angle_difference(10.0, 350.0) == pytest.approx(20.0)
    assert angle_difference(350.0, 10.0) == pytest.approx(-20.0)
    assert angle_difference(180.0, 0.0) == pytest.approx(-180.0)


def test_rotation_examples():
    np.testing.assert_allclose(euler_to_rotation(Viewpoint(0, 0, 0)), np.eye(3), atol=1e-12)
    half = euler_to_rotation(Viewpoint(180, 0, 0))
    assert np.trace(half) == pytest.approx(-1.0, abs=1e-12)

    v = Viewpoint(40, 20, 10)
    np.testing.assert_allclose(euler_to_rotation(v), quaternion(v).as_matrix(), atol=1e-9)


def test_rotation_is_orthonormal():
    for v in random_viewpoints(1000, seed=2):
        r = euler_to_rotation(v)
        np.testing.assert_allclose(r.T @ r, np.eye(3), atol=1e-9)
        assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_rotation_error_examples():
    a = Viewpoint(40, 20, 10)
    assert rotation_error_deg(a, a) == pytest.approx(0.0, abs=1e-6)
    assert rotation_error_deg(Viewpoint(30, 0, 0), Viewpoint(0, 0, 0)) == pytest.approx(30.0)

    qa = quaternion(a).as_quat()
    qb = quaternion(Viewpoint(0, 0, 0)).as_quat()
    expected = math.degrees(2.0 * math.acos(min(abs(float(np.dot(qa, qb))), 1.0)))
    assert rotation_error_deg(a, Viewpoint(0, 0, 0)) == pytest.approx(expected, abs=1e-6)


def test_rotation_error_matches_quaternion_oracle():
    views = random_viewpoints(200, seed=3)
    for a, b in zip(views[::2], views[1::2]):
        expected = np.degrees((quaternion(a).inv() * quaternion(b)).magnitude())
        assert rotation_error_deg(a, b) == pytest.approx(expected, abs=1e-6)


def test_rotation_error_metric_axioms():
    views = random_viewpoints(1000, seed=4)
    rng = np.random.default_rng(5)
    for _ in range(1000):
        a, b, c = (views[i] for i in rng.integers(len(views), size=3))
        ab = rotation_error_deg(a, b)
        assert 0.0 <= ab <= 180.0
        assert ab == pytest.approx(rotation_error_deg(b, a), abs=1e-9)
        assert ab <= rotation_error_deg(a, c) + rotation_error_deg(c, b) + 1e-6


def test_encode_angle_examples():
    assert encode_angle(7.5) == AngleBinCode(0, 0.0)
    assert encode_angle(0.0) == AngleBinCode(0, -0.5)
    code = encode_angle(190.5)
    assert code.bin_index == 12
    assert code.offset == pytest.approx(0.2, abs=1e-12)
    assert decode_angle(AngleBinCode(0, 0.0)) == 7.5


def test_decode_boundary_wraps_into_range():
    v = decode_angle_bins([AngleBinCode(23, 0.4999999), AngleBinCode(0, 0.0),
                           AngleBinCode(0, 0.0)])
    assert 0.0 <= v.azi < 360.0
    assert v.azi == pytest.approx(360.0 - 15.0 * 1e-7, abs=1e-9)


def test_angle_codec_round_trip():
    for v in random_viewpoints(1000, seed=6):
        codes = encode_angle_bins(v)
        for code in codes:
            assert 0 <= code.bin_index < 24
            assert -0.5 <= code.offset < 0.5
        decoded = decode_angle_bins(codes)
        assert angle_gap(decoded.azi, v.azi) < 1e-9
        assert abs(decoded.ele - v.ele) < 1e-9
        assert angle_gap(decoded.inp, v.inp) < 1e-9


@pytest.mark.parametrize("code", [AngleBinCode(24, 0.0), AngleBinCode(-1, 0.0),
                                  AngleBinCode(3, 0.75)])
def test_decode_rejects_invalid_codes(code):
    with pytest.raises(InvalidCodeError):
        decode_angle(code)
    with pytest.raises(InvalidCodeError):
        decode_angle_bins([code, code])


def test_box_iou_examples():
    a = BoundingBox(0, 0, 10, 10)
    assert box_iou(a, a) == 1.0
    assert box_iou(a, BoundingBox(20, 20, 30, 30)) == 0.0
    assert box_iou(a, BoundingBox(5, 5, 15, 15)) == pytest.approx(1.0 / 7.0)


def test_box_iou_matches_rasterization():
    rng = np.random.default_rng(7)
    for _ in range(200):
        boxes = []
        for _ in range(2):
            x1, y1 = rng.integers(0, 40, size=2)
            w, h = rng.integers(1, 11, size=2)
            boxes.append(BoundingBox(float(x1), float(y1), float(x1 + w), float(y1 + h)))
        a, b = boxes

        grid_a = np.zeros((50, 50), dtype=bool)
        grid_b = np.zeros((50, 50), dtype=bool)
        grid_a[int(a.y1):int(a.y2), int(a.x1):int(a.x2)] = True
        grid_b[int(b.y1):int(b.y2), int(b.x1):int(b.x2)] = True
        expected = (grid_a & grid_b).sum() / (grid_a | grid_b).sum()

        iou = box_iou(a, b)
        assert 0.0 <= iou <= 1.0
        assert iou == pytest.approx(box_iou(b, a))
        assert abs(iou - expected) <= 1.0 / min(a.area, b.area)
        assert box_iou_matrix(a.as_array(), b.as_array())[0, 0] == pytest.approx(iou)


def test_degenerate_box_rejected():
    with pytest.raises(DegenerateBoxError):
        BoundingBox(5, 0, 5, 10)
    with pytest.raises(DegenerateBoxError):
        apply_box_delta(BoundingBox(0, 0, 10, 10), [10.0, 0.0, 0.0, 0.0], clip_to=(20, 20))


def test_box_delta_examples():
    box = BoundingBox(0, 0, 10, 10)
    assert apply_box_delta(box, [0, 0, 0, 0]) == box
    assert apply_box_delta(box, [0.5, 0, 0, 0]) == BoundingBox(5, 0, 15, 10)


def test_box_delta_inverse():
    rng = np.random.default_rng(8)
    box = BoundingBox(3.0, 4.0, 20.0, 12.0)
    for _ in range(100):
        delta = rng.uniform(-1.0, 1.0, size=4)
        recovered = compute_box_delta(box, apply_box_delta(box, delta))
        np.testing.assert_allclose(recovered, delta, atol=1e-9)
