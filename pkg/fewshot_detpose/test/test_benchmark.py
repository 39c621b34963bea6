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


import numpy as np
import pytest

from fewshot_detpose.cli import main
from fewshot_detpose.dataset_io import read_json


pytestmark = pytest.mark.benchmark

SUPPORT_DRAWS = 5


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def reference_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("reference")
    common = ("--output", out, "--quiet")
    assert run("gen-data", *common) == 0
    for task in ("detection", "viewpoint"):
        assert run("train", "--task", task, *common) == 0
    return out


def test_novel_detection_ap50(reference_run):
    values = []
    for draw in range(SUPPORT_DRAWS):
        tuned = reference_run / "detection" / f"draw_{draw}"
        assert run("finetune", "--checkpoint", reference_run / "detection" / "base",
                   "--seed", 1000 + draw, "--output", reference_run, "--out", tuned,
                   "--quiet") == 0
        out = reference_run / "eval" / f"detection_{draw}"
        assert run("eval", "--mode", "detection", "--detector", tuned,
                   "--output", reference_run, "--out", out, "--quiet") == 0
        values.append(read_json(out / "detection.json")["means"]["AP50"])
    assert np.mean(values) >= 0.40


def test_novel_viewpoint_accuracy(reference_run):
    tuned = reference_run / "viewpoint" / "finetune"
    assert run("finetune", "--task", "viewpoint",
               "--checkpoint", reference_run / "viewpoint" / "base",
               "--output", reference_run, "--out", tuned, "--quiet") == 0
    out = reference_run / "eval" / "viewpoint"
    assert run("eval", "--mode", "viewpoint-gt", "--viewpoint", tuned,
               "--output", reference_run, "--out", out, "--quiet") == 0
    rows = {row["name"]: row for row in read_json(out / "viewpoint_gt.json")["summary_rows"]}
    assert rows["non-symmetric"]["Acc30"] >= 0.60


def test_full_scheme_beats_product_only(reference_run):
    out = reference_run / "ablation"
    assert run("ablate", "--schemes", "rw", "full", "--output", reference_run,
               "--out", out, "--quiet") == 0
    rows = {row["scheme"]: row for row in read_json(out / "ablation.json")}
    assert rows["full"]["mean"] >= rows["rw"]["mean"]
    assert rows["full"]["std"] <= rows["rw"]["std"]
