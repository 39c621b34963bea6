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

import pandas as pd
import pytest
import yaml

from fewshot_detpose.cli import OUTPUT_ENV
from fewshot_detpose.cli import build_parser
from fewshot_detpose.cli import config_overrides
from fewshot_detpose.cli import main
from fewshot_detpose.dataset_io import read_json


TINY_CONFIG = {
    "seed": 0,
    "dataset": {
        "num_classes": 4,
        "image_size": [64, 64],
        "objects_per_scene": [1, 2],
        "scale_range": [14.0, 20.0],
        "max_tries": 200,
        "noise": 0.0,
        "scenes": {"base_train": 8, "support": 40, "test": 4},
        "shape_variants": [2, 3],
        "points_per_shape": 64,
    },
    "split": {"base_classes": [0, 1], "novel_classes": [2, 3]},
    "detector": {"widths": [4, 8, 8, 8], "groups": 2, "pool_size": 2, "predictor_hidden": 16,
                 "train_top_n": 20, "eval_top_n": 10, "rpn_batch": 16, "roi_batch": 8},
    "viewpoint": {"widths": [4, 8, 8, 8], "groups": 2, "crop_size": 16, "point_hidden": 8,
                  "hidden": [16, 8]},
    "train": {
        task: {phase: {"epochs": 1, "milestones": [], "batch_size": 4, "pool_size": 5}
               for phase in ("base", "finetune")}
        for task in ("detection", "viewpoint")
    },
}
TINY_CONFIG["train"]["detection"]["finetune"]["shots"] = 2
TINY_CONFIG["train"]["viewpoint"]["finetune"]["shots"] = 2


@pytest.fixture(scope="module")
def tiny_config(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_CONFIG))
    return str(path)


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def pipeline(tiny_config, tmp_path_factory):
    """Output root after gen-data, both trainings, both fine-tunings and a joint eval."""
    out = tmp_path_factory.mktemp("runs")
    common = ("--config", tiny_config, "--output", out, "--quiet")
    assert run("gen-data", *common) == 0
    for task in ("detection", "viewpoint"):
        assert run("train", "--task", task, *common) == 0
        assert run("finetune", "--task", task, "--checkpoint", out / task / "base", *common) == 0
    assert run("eval", "--mode", "joint",
               "--detector", out / "detection" / "finetune_k2",
               "--viewpoint", out / "viewpoint" / "finetune_k2", *common) == 0
    return out


def test_parser_requires_a_command():
    with pytest.raises(SystemExit) as info:
        build_parser().parse_args([])
    assert info.value.code == 2


def test_eval_without_checkpoint_is_a_usage_error(tiny_config):
    with pytest.raises(SystemExit) as info:
        main(["eval", "--mode", "joint", "--detector", "somewhere", "--config", tiny_config])
    assert info.value.code == 2


def test_overrides_from_flags():
    args = build_parser().parse_args(["finetune", "--task", "viewpoint", "--checkpoint", "c",
                                      "--shots", "3", "--lr", "0.01", "--seed", "4"])
    assert config_overrides(args) == {"seed": 4, "train.viewpoint.finetune.lr": 0.01,
                                      "train.viewpoint.finetune.shots": 3}


def test_unknown_config_key_fails(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text(yaml.safe_dump({"dataset": {"num_clases": 4}}))
    assert run("gen-data", "--config", path, "--output", tmp_path, "--quiet") == 2
    assert not (tmp_path / "data").exists()


def test_gen_data_is_idempotent(tiny_config, tmp_path, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path))
    assert run("gen-data", "--config", tiny_config, "--quiet") == 0
    manifest = read_json(tmp_path / "data" / "manifest.json")
    assert manifest["num_classes"] == 4
    assert (tmp_path / "data" / "run.json").exists()
    assert "run.json" not in manifest["files"]

    assert run("gen-data", "--config", tiny_config, "--quiet") == 0
    assert read_json(tmp_path / "data" / "manifest.json")["dataset_hash"] == \
        manifest["dataset_hash"]

    # same directory, other seed
    assert run("gen-data", "--config", tiny_config, "--seed", 1, "--quiet") == 2

    # a damaged file is regenerated
    image = next((tmp_path / "data" / "images" / "test").glob("*.png"))
    image.write_bytes(b"broken")
    assert run("gen-data", "--config", tiny_config, "--quiet") == 0
    assert read_json(tmp_path / "data" / "manifest.json")["dataset_hash"] == \
        manifest["dataset_hash"]


@pytest.mark.slow
def test_pipeline_outputs(pipeline):
    base = read_json(pipeline / "detection" / "base" / "manifest.json")
    assert base["phase"] == "base"
    assert base["class_ids"] == [0, 1]

    tuned = read_json(pipeline / "detection" / "finetune_k2" / "manifest.json")
    assert tuned["phase"] == "finetune"
    assert tuned["class_ids"] == [0, 1, 2, 3]
    assert {c: len(refs) for c, refs in tuned["audit"].items()} == \
        {"0": 2, "1": 2, "2": 2, "3": 2}
    assert tuned["dataset_hash"] == read_json(pipeline / "data" / "manifest.json")["dataset_hash"]

    joint = pipeline / "eval" / "joint"
    for stem in ("joint_gt_boxes", "joint_pred_boxes"):
        report = read_json(joint / f"{stem}.json")
        assert [row["class_id"] for row in report["rows"]] == [2, 3]
        assert report["metrics"] == ["Joint30", "recall"]
    gt_boxes = read_json(joint / "joint_gt_boxes.json")
    for row in gt_boxes["rows"]:
        if row["num_gt"]:
            assert row["recall"] == 1.0
    assert (joint / "joint.md").exists()
    assert read_json(joint / "run.json")["command"] == "eval"


@pytest.mark.slow
def test_eval_viewpoint_on_ground_truth_boxes(pipeline, tiny_config):
    out = pipeline / "eval_vp"
    assert run("eval", "--mode", "viewpoint-gt", "--classes", "all",
               "--viewpoint", pipeline / "viewpoint" / "finetune_k2",
               "--config", tiny_config, "--output", pipeline, "--out", out, "--quiet") == 0
    report = read_json(out / "viewpoint_gt.json")
    assert [row["name"] for row in report["summary_rows"]] == \
        ["TOTAL", "symmetric", "non-symmetric"]
    frame = pd.read_csv(out / "viewpoint_gt.csv")
    assert list(frame.columns[:4]) == ["class_id", "name", "Acc30", "MedErr"]


@pytest.mark.slow
def test_joint_report_agrees_with_viewpoint_report(pipeline, tiny_config):
    out = pipeline / "eval_vp_novel"
    assert run("eval", "--mode", "viewpoint-gt",
               "--viewpoint", pipeline / "viewpoint" / "finetune_k2",
               "--config", tiny_config, "--output", pipeline, "--out", out, "--quiet") == 0
    accuracy = {row["class_id"]: row["Acc30"]
                for row in read_json(out / "viewpoint_gt.json")["rows"]}

    joint = pipeline / "eval" / "joint"
    gt_rows = read_json(joint / "joint_gt_boxes.json")["rows"]
    pred_rows = read_json(joint / "joint_pred_boxes.json")["rows"]
    assert sorted(accuracy) == [row["class_id"] for row in gt_rows]
    for gt_row, pred_row in zip(gt_rows, pred_rows):
        expected = accuracy[gt_row["class_id"]]
        if expected is None:
            assert gt_row["Joint30"] is None and pred_row["Joint30"] is None
            continue
        assert gt_row["Joint30"] == pytest.approx(expected, rel=0, abs=1e-9)
        assert pred_row["Joint30"] <= gt_row["Joint30"]


@pytest.mark.slow
def test_finetune_rejects_finetuned_checkpoint(pipeline, tiny_config):
    assert run("finetune", "--checkpoint", pipeline / "detection" / "finetune_k2",
               "--config", tiny_config, "--output", pipeline,
               "--out", pipeline / "again", "--quiet") == 2


@pytest.mark.slow
def test_predict(pipeline, tiny_config):
    images = sorted((pipeline / "data" / "images" / "test").glob("*.png"))[:2]
    out = pipeline / "predict"
    assert run("predict", "--detector", pipeline / "detection" / "finetune_k2",
               "--viewpoint", pipeline / "viewpoint" / "finetune_k2",
               "--threshold", 0.0, "--overlay", "--config", tiny_config,
               "--output", pipeline, "--out", out, "--quiet", *images) == 0

    registry = read_json(pipeline / "data" / "manifest.json")["classes"]
    names = {c["id"]: c["name"] for c in registry}
    with open(out / "predictions.json") as f:
        predictions = json.load(f)
    for p in predictions:
        assert p["cls"] in (0, 1, 2, 3)
        assert p["viewpoint"] is not None
        assert p["name"] == names[p["cls"]]
    for image in images:
        assert (out / "overlays" / f"{image.stem}.png").exists()


@pytest.mark.slow
def test_ablation_table(pipeline, tiny_config):
    out = pipeline / "ablation"
    assert run("ablate", "--schemes", "rw", "full", "--shots", 1, "--trials", 2,
               "--config", tiny_config, "--output", pipeline, "--out", out, "--quiet") == 0
    table = pd.read_csv(out / "ablation.csv")
    assert list(table["scheme"]) == ["rw", "full"]
    assert list(table["trials"]) == [2, 2]
    assert ((table["mean"] >= 0.0) & (table["mean"] <= 1.0)).all()
    rows = read_json(out / "ablation.json")
    assert rows[0]["seeds"] == [1000, 1001]
    assert (out / "rw" / "base" / "manifest.json").exists()
