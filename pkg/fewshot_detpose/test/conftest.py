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


import os
from typing import Callable, Sequence

import numpy as np
import pytest
import torch

from fewshot_detpose.detector import DetectorConfig
from fewshot_detpose.detector import FewShotDetector
from fewshot_detpose.synthdata import LayoutSpec
from fewshot_detpose.synthdata import generate_dataset
from fewshot_detpose.viewpoint import FewShotViewpointNet
from fewshot_detpose.viewpoint import ViewpointConfig


BENCHMARK_ENV = "FEWSHOT_DETPOSE_BENCHMARK"

TINY_BASE = (0, 1)
TINY_NOVEL = (2, 3)


def pytest_collection_modifyitems(config, items):
    if os.environ.get(BENCHMARK_ENV) == "1":
        return
    skip = pytest.mark.skip(reason=f"set {BENCHMARK_ENV}=1 to run reference-size benchmarks")
    for item in items:
        if "benchmark" in item.keywords:
            item.add_marker(skip)


def tiny_layouts():
    common = dict(image_size=(64, 64), scale_range=(14.0, 20.0), max_tries=200, noise=0.0)
    return {
        "base_train": (LayoutSpec(num_objects=(1, 2), class_ids=TINY_BASE, **common), 12),
        "support": (LayoutSpec(num_objects=(1, 1), **common), 40),
        "test": (LayoutSpec(num_objects=(1, 2), **common), 6),
    }


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(4, tiny_layouts(), shape_variants=(2, 3),
                            points_per_shape=64, seed=7)


def small_detector_config(**overrides) -> DetectorConfig:
    values = dict(widths=(4, 8, 8, 8), groups=2, pool_size=2, predictor_hidden=16,
                  train_top_n=20, eval_top_n=10, rpn_batch=16, roi_batch=8,
                  num_meta_classes=4)
    values.update(overrides)
    return DetectorConfig(**values)


def small_viewpoint_config(**overrides) -> ViewpointConfig:
    values = dict(widths=(4, 8, 8, 8), groups=2, crop_size=16, point_hidden=8, hidden=(16, 8))
    values.update(overrides)
    return ViewpointConfig(**values)


@pytest.fixture
def small_detector():
    torch.manual_seed(0)
    return FewShotDetector(small_detector_config())


@pytest.fixture
def small_viewpoint_net():
    torch.manual_seed(0)
    return FewShotViewpointNet(small_viewpoint_config())


def finite_difference_probe(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor],
    num_probes: int = 20,
    h: float = 1e-5,
    seed: int = 0
) -> float:
    """Largest relative error between autograd and central differences over
    randomly chosen scalar entries of `params` (double precision)."""
    params = [p for p in params if p.requires_grad]
    for p in params:
        p.grad = None
    loss_fn().backward()

    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for _ in range(num_probes):
            p = params[int(rng.integers(len(params)))]
            flat = p.view(-1)
            i = int(rng.integers(flat.numel()))
            analytic = float(p.grad.view(-1)[i])

            original = float(flat[i])
            flat[i] = original + h
            plus = float(loss_fn())
            flat[i] = original - h
            minus = float(loss_fn())
            flat[i] = original
            numeric = (plus - minus) / (2.0 * h)

            scale = max(abs(analytic), abs(numeric), 1e-4)
            worst = max(worst, abs(analytic - numeric) / scale)
    return worst
