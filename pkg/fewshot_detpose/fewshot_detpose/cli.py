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


import argparse
import copy
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch

from fewshot_detpose import __version__
from fewshot_detpose.aggregation import AggregationScheme
from fewshot_detpose.checkpoint import check_registry
from fewshot_detpose.checkpoint import code_version
from fewshot_detpose.checkpoint import load_checkpoint
from fewshot_detpose.checkpoint import save_checkpoint
from fewshot_detpose.config import load_run_config
from fewshot_detpose.config import to_dict
from fewshot_detpose.dataset_io import MANIFEST_NAME
from fewshot_detpose.dataset_io import RUN_NAME
from fewshot_detpose.dataset_io import class_registry
from fewshot_detpose.dataset_io import load_dataset
from fewshot_detpose.dataset_io import read_image
from fewshot_detpose.dataset_io import read_json
from fewshot_detpose.dataset_io import save_dataset
from fewshot_detpose.dataset_io import verify_dataset
from fewshot_detpose.dataset_io import write_image
from fewshot_detpose.dataset_io import write_json
from fewshot_detpose.detector import DetectorConfig
from fewshot_detpose.detector import FewShotDetector
from fewshot_detpose.evaluation import DetectionRecord
from fewshot_detpose.evaluation import INTERPOLATIONS
from fewshot_detpose.evaluation import detection_report
from fewshot_detpose.evaluation import ground_truth_from_scenes
from fewshot_detpose.evaluation import joint_eval
from fewshot_detpose.evaluation import viewpoint_report
from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.exceptions import FewShotError
from fewshot_detpose.inference import attach_viewpoints
from fewshot_detpose.inference import detect_scenes
from fewshot_detpose.inference import estimate_gt_viewpoints
from fewshot_detpose.inference import gt_box_records
from fewshot_detpose.node import LOGGING_NAME
from fewshot_detpose.node import Node
from fewshot_detpose.node import set_verbosity
from fewshot_detpose.synthdata import SPLITS
from fewshot_detpose.synthdata import EpisodeSpec
from fewshot_detpose.synthdata import LayoutSpec
from fewshot_detpose.synthdata import SyntheticDataset
from fewshot_detpose.synthdata import generate_dataset
from fewshot_detpose.training import TrainConfig
from fewshot_detpose.training import run_phase
from fewshot_detpose.viewpoint import FewShotViewpointNet
from fewshot_detpose.viewpoint import ViewpointConfig


OUTPUT_ENV = "FEWSHOT_DETPOSE_OUTPUT"
TASKS = ("detection", "viewpoint")
EVAL_MODES = ("detection", "viewpoint-gt", "joint")
CLASS_SETS = ("novel", "base", "all")


def dataset_layouts(cfg) -> Dict[str, tuple]:
    """{split: (LayoutSpec, scene count)} from the dataset and split sections."""
    d = cfg.dataset
    common = dict(image_size=tuple(d.image_size),
                  scale_range=tuple(d.scale_range),
                  max_iou=d.max_iou,
                  max_tries=d.max_tries,
                  ele_range=tuple(d.ele_range),
                  inp_range=tuple(d.inp_range),
                  background=tuple(d.background),
                  noise=d.noise)
    return {
        "base_train": (LayoutSpec(num_objects=tuple(d.objects_per_scene),
                                  class_ids=tuple(cfg.split.base_classes), **common),
                       d.scenes.base_train),
        "support": (LayoutSpec(num_objects=tuple(d.support_objects_per_scene), **common),
                    d.scenes.support),
        "test": (LayoutSpec(num_objects=tuple(d.objects_per_scene), **common),
                 d.scenes.test),
    }


def episode_spec(cfg, shots: int, seed: int) -> EpisodeSpec:
    return EpisodeSpec(tuple(cfg.split.base_classes), tuple(cfg.split.novel_classes),
                       shots=shots, seed=seed)


def evaluation_classes(cfg, dataset: SyntheticDataset, which: str) -> Dict[int, str]:
    if which not in CLASS_SETS:
        raise ConfigurationError(f"eval.classes must be one of {CLASS_SETS}, got '{which}'")
    names = dataset.class_names
    ids = {"novel": cfg.split.novel_classes,
           "base": cfg.split.base_classes,
           "all": sorted(names)}[which]
    return {c: names[c] for c in ids}


class CommandNode(Node):
    """Shared plumbing of every subcommand: resolved config, output root
    and the run manifest written next to the outputs."""

    def __init__(self, name: str, cfg, args: argparse.Namespace) -> None:
        super().__init__(name)
        self.cfg = cfg
        self.args = args

        # params
        self.declare_parameter("output", cfg.output)
        self.declare_parameter("seed", cfg.seed)
        self.declare_parameter("workers", cfg.workers)

        self.output = Path(self.get_parameter("output").value)
        self.seed = self.get_parameter("seed").value
        self.workers = self.get_parameter("workers").value

        self.get_logger().info(f"{name} node started")

    def out_dir(self, *default: str) -> Path:
        out = getattr(self.args, "out", None)
        return Path(out) if out else self.output.joinpath(*default)

    def data_dir(self) -> Path:
        data = getattr(self.args, "data", None)
        return Path(data) if data else self.output / "data"

    def load_data(self) -> SyntheticDataset:
        data_dir = self.data_dir()
        self.get_logger().info(f"loading dataset from '{data_dir}'")
        return load_dataset(data_dir)

    def write_run_manifest(self, out_dir: Path, inputs: Optional[Dict[str, Any]] = None) -> None:
        write_json(out_dir / RUN_NAME, {
            "command": self.get_name(),
            "argv": sys.argv[1:],
            "config": to_dict(self.cfg),
            "seed": self.seed,
            "inputs": inputs or {},
            "code_version": code_version(),
        })

    def run(self) -> Any:
        raise NotImplementedError


class GenDataNode(CommandNode):

    def __init__(self, cfg, args) -> None:
        super().__init__("gen_data", cfg, args)

    def run(self) -> dict:
        out_dir = self.out_dir("data")
        layouts = dataset_layouts(self.cfg)
        d = self.cfg.dataset

        if (out_dir / MANIFEST_NAME).is_file():
            manifest = read_json(out_dir / MANIFEST_NAME)
            requested = {"seed": self.seed, "num_classes": d.num_classes,
                         "shape_variants": list(d.shape_variants),
                         "points_per_shape": d.points_per_shape,
                         "splits": {k: {"scenes": n, "layout": lay.to_dict()}
                                    for k, (lay, n) in layouts.items()}}
            stored = {k: manifest.get(k) for k in requested}
            if stored != requested:
                raise ConfigurationError(
                    f"'{out_dir}' holds a dataset generated with other parameters")
            mismatched = verify_dataset(out_dir)
            if not mismatched:
                self.get_logger().info(
                    f"dataset in '{out_dir}' verified, hash {manifest['dataset_hash']}")
                return manifest
            self.get_logger().warning(
                f"{len(mismatched)} files differ from the manifest, regenerating")

        dataset = generate_dataset(d.num_classes, layouts,
                                   shape_variants=tuple(d.shape_variants),
                                   points_per_shape=d.points_per_shape,
                                   seed=self.seed, workers=self.workers)
        manifest = save_dataset(dataset, out_dir)
        self.write_run_manifest(out_dir, {"dataset_hash": manifest["dataset_hash"]})

        counts = {split: len(scenes) for split, scenes in dataset.splits.items()}
        self.get_logger().info(
            f"{d.num_classes} classes (base {list(self.cfg.split.base_classes)}, "
            f"novel {list(self.cfg.split.novel_classes)}), scenes {counts}")
        self.get_logger().info(f"dataset written to '{out_dir}', hash {manifest['dataset_hash']}")
        return manifest


def new_model(cfg, task: str, num_classes: int, scheme: str):
    torch.manual_seed(cfg.seed)
    if task == "detection":
        return FewShotDetector(DetectorConfig.from_config(cfg.detector, num_classes, scheme))
    return FewShotViewpointNet(ViewpointConfig.from_config(cfg.viewpoint, scheme))


def train_base(cfg, dataset: SyntheticDataset, task: str, out_dir: Path):
    """Base phase from scratch; returns (model, phase result, manifest)."""
    model = new_model(cfg, task, len(dataset.models), cfg.train.aggregation)
    train_cfg = TrainConfig.from_config(cfg, task, "base")
    spec = episode_spec(cfg, shots=1, seed=cfg.seed)
    result = run_phase(model, dataset, train_cfg, spec, out_dir)
    manifest = save_checkpoint(model, out_dir, "base", class_registry(dataset.models),
                               dataset.manifest.get("dataset_hash"),
                               {"config": to_dict(cfg), "train": train_cfg.to_dict()})
    return model, result, manifest


def finetune(cfg, dataset: SyntheticDataset, ckpt_dir: Path, task: str, shots: int,
             seed: int, out_dir: Optional[Path]):
    model, base_manifest = load_checkpoint(ckpt_dir, task)
    check_registry(base_manifest, class_registry(dataset.models))
    if base_manifest["phase"] != "base":
        raise ConfigurationError(f"'{ckpt_dir}' is not a base-phase checkpoint")

    train_cfg = TrainConfig.from_config(cfg, task, "finetune", seed=seed, shots=shots)
    train_cfg.scheme = model.scheme
    result = run_phase(model, dataset, train_cfg, episode_spec(cfg, shots, seed), out_dir)

    audit = {str(c): [[r.split, r.scene_index, r.object_index] for r in refs]
             for c, refs in result.episode.audit.items()}
    manifest = None
    if out_dir is not None:
        manifest = save_checkpoint(model, out_dir, "finetune", class_registry(dataset.models),
                                   dataset.manifest.get("dataset_hash"),
                                   {"config": to_dict(cfg), "train": train_cfg.to_dict(),
                                    "shots": shots, "audit": audit,
                                    "base_checkpoint": str(ckpt_dir)})
    return model, result, manifest


class TrainNode(CommandNode):

    def __init__(self, cfg, args) -> None:
        super().__init__("train", cfg, args)
        self.declare_parameter("task", args.task)
        self.task = self.get_parameter("task").value

    def run(self) -> dict:
        dataset = self.load_data()
        out_dir = self.out_dir(self.task, "base")
        _, result, manifest = train_base(self.cfg, dataset, self.task, out_dir)
        self.write_run_manifest(out_dir, {"dataset_hash": manifest["dataset_hash"]})
        self.get_logger().info(f"per-epoch losses\n{result.epoch_table().to_string()}")
        self.get_logger().info(f"checkpoint written to '{out_dir}'")
        return manifest


class FinetuneNode(CommandNode):

    def __init__(self, cfg, args) -> None:
        super().__init__("finetune", cfg, args)
        self.declare_parameter("task", args.task)
        self.declare_parameter("shots", getattr(cfg.train, args.task).finetune.shots)
        self.task = self.get_parameter("task").value
        self.shots = self.get_parameter("shots").value

    def run(self) -> dict:
        dataset = self.load_data()
        out_dir = self.out_dir(self.task, f"finetune_k{self.shots}")
        _, result, manifest = finetune(self.cfg, dataset, Path(self.args.checkpoint), self.task,
                                       self.shots, self.seed, out_dir)
        self.write_run_manifest(out_dir, {"dataset_hash": manifest["dataset_hash"],
                                          "checkpoint": str(self.args.checkpoint)})
        self.get_logger().info(f"per-epoch losses\n{result.epoch_table().to_string()}")
        self.get_logger().info(
            f"audit: {result.episode.instance_counts()} instances per class, "
            f"checkpoint written to '{out_dir}'")
        return manifest


def detection_ap(cfg, dataset: SyntheticDataset, detector: FewShotDetector,
                 classes: Dict[int, str]):
    scenes = dataset.splits[cfg.eval.split]
    records = detect_scenes(detector, scenes, class_ids=detector.class_ids)
    return detection_report(records, ground_truth_from_scenes(scenes), classes,
                            cfg.eval.iou_threshold, cfg.eval.interpolation,
                            {"split": cfg.eval.split})


class EvalNode(CommandNode):

    def __init__(self, cfg, args) -> None:
        super().__init__("eval", cfg, args)
        self.declare_parameter("mode", args.mode)
        self.declare_parameter("classes", cfg.eval.classes)
        self.mode = self.get_parameter("mode").value
        self.classes = self.get_parameter("classes").value

    def _check_models(self, dataset: SyntheticDataset, *pairs) -> None:
        for _, manifest in pairs:
            check_registry(manifest, class_registry(dataset.models))

    def run(self) -> List:
        cfg = self.cfg
        if cfg.eval.interpolation not in INTERPOLATIONS:
            raise ConfigurationError(
                f"eval.interpolation must be one of {INTERPOLATIONS}, got "
                f"'{cfg.eval.interpolation}'")
        dataset = self.load_data()
        out_dir = self.out_dir("eval", self.mode)
        classes = evaluation_classes(cfg, dataset, self.classes)
        scenes = dataset.splits[cfg.eval.split]
        echo = {"mode": self.mode, "split": cfg.eval.split, "classes": self.classes,
                "iou_threshold": cfg.eval.iou_threshold,
                "angle_threshold": cfg.eval.angle_threshold,
                "interpolation": cfg.eval.interpolation}

        reports = []
        if self.mode == "detection":
            detector = load_checkpoint(self.args.detector, "detection")
            self._check_models(dataset, detector)
            report = detection_ap(cfg, dataset, detector[0], classes)
            report.config.update(echo)
            reports.append(("detection", report))

        elif self.mode == "viewpoint-gt":
            net = load_checkpoint(self.args.viewpoint, "viewpoint")
            self._check_models(dataset, net)
            preds, gts = estimate_gt_viewpoints(net[0], scenes, list(classes))
            symmetric = {m.class_id: m.symmetric for m in dataset.models}
            reports.append(("viewpoint_gt", viewpoint_report(
                preds, gts, classes, symmetric, cfg.eval.angle_threshold, echo)))

        else:
            detector = load_checkpoint(self.args.detector, "detection")
            net = load_checkpoint(self.args.viewpoint, "viewpoint")
            self._check_models(dataset, detector, net)
            gts = ground_truth_from_scenes(scenes)

            gt_records = attach_viewpoints(net[0], scenes, gt_box_records(scenes, list(classes)))
            reports.append(("joint_gt_boxes", joint_eval(
                gt_records, gts, classes, cfg.eval.iou_threshold, cfg.eval.angle_threshold,
                echo, title="joint (ground-truth boxes)")))

            detections = [r for r in detect_scenes(detector[0], scenes,
                                                   class_ids=detector[0].class_ids)
                          if r.cls in classes]
            pred_records = attach_viewpoints(net[0], scenes, detections)
            reports.append(("joint_pred_boxes", joint_eval(
                pred_records, gts, classes, cfg.eval.iou_threshold, cfg.eval.angle_threshold,
                echo, title="joint (predicted boxes)")))

        for stem, report in reports:
            report.save(out_dir, stem)
            self.get_logger().info(f"\n{report.to_markdown()}")
        if len(reports) > 1:
            (out_dir / "joint.md").write_text(
                "\n\n".join(report.to_markdown() for _, report in reports) + "\n")

        self.write_run_manifest(out_dir, {
            "dataset_hash": dataset.manifest.get("dataset_hash"),
            "detector": self.args.detector, "viewpoint": self.args.viewpoint})
        return [report for _, report in reports]


class AblateNode(CommandNode):
    """Novel-class AP50 of every aggregation scheme over random support draws."""

    def __init__(self, cfg, args) -> None:
        super().__init__("ablate", cfg, args)
        shots = cfg.ablation.shot_sweep if args.sweep else cfg.ablation.shots
        self.declare_parameter("schemes", cfg.ablation.schemes)
        self.declare_parameter("shots", shots)
        self.declare_parameter("trials", cfg.ablation.trials)
        self.declare_parameter("trial_seed", cfg.ablation.seed)
        self.schemes = [AggregationScheme.parse(s) for s in self.get_parameter("schemes").value]
        self.shots = list(self.get_parameter("shots").value)
        self.trials = self.get_parameter("trials").value
        self.trial_seed = self.get_parameter("trial_seed").value

    def run(self) -> pd.DataFrame:
        dataset = self.load_data()
        out_dir = self.out_dir("ablation")
        novel = evaluation_classes(self.cfg, dataset, "novel")

        rows = []
        for scheme in self.schemes:
            cfg = copy.deepcopy(self.cfg)
            cfg.train.aggregation = scheme.value
            base_dir = out_dir / scheme.value / "base"
            if not (base_dir / "manifest.json").is_file():
                self.get_logger().info(f"{scheme.value}: base training")
                train_base(cfg, dataset, "detection", base_dir)

            for shots in self.shots:
                seeds = [self.trial_seed + r for r in range(self.trials)]
                values = []
                for seed in seeds:
                    detector, _, _ = finetune(cfg, dataset, base_dir, "detection", shots,
                                              seed, None)
                    report = detection_ap(cfg, dataset, detector, novel)
                    values.append(report.means[report.metrics[0]] or 0.0)
                    self.get_logger().info(
                        f"{scheme.value} K={shots} seed {seed}: AP50 {values[-1]:.4f}")
                rows.append({"scheme": scheme.value, "shots": shots,
                             "mean": float(np.mean(values)),
                             "std": float(np.std(values, ddof=0)),
                             "trials": len(values), "seeds": seeds, "values": values})

        table = pd.DataFrame(rows)
        out_dir.mkdir(parents=True, exist_ok=True)
        table.drop(columns=["seeds", "values"]).to_csv(out_dir / "ablation.csv", index=False)
        (out_dir / "ablation.md").write_text(
            table.drop(columns=["seeds", "values"]).to_markdown(index=False, floatfmt=".4f")
            + "\n")
        write_json(out_dir / "ablation.json", rows)
        self.write_run_manifest(out_dir, {"dataset_hash": dataset.manifest.get("dataset_hash")})
        self.get_logger().info(f"\n{table.drop(columns=['seeds', 'values']).to_string()}")
        return table


class PredictNode(CommandNode):

    def __init__(self, cfg, args) -> None:
        super().__init__("predict", cfg, args)
        self.declare_parameter("threshold", cfg.predict.threshold)
        self.declare_parameter("overlay", args.overlay)
        self.threshold = self.get_parameter("threshold").value
        self.overlay = self.get_parameter("overlay").value

    def run(self) -> List[dict]:
        from fewshot_detpose.visualization import draw_predictions

        detector, manifest = load_checkpoint(self.args.detector, "detection")
        net = load_checkpoint(self.args.viewpoint, "viewpoint")[0] \
            if self.args.viewpoint else None
        names = {c["id"]: c["name"] for c in manifest["class_registry"]}
        out_dir = self.out_dir("predict")

        predictions = []
        for path in self.args.images:
            path = Path(path)
            image = read_image(path)
            detections = detector.detect(image, score_threshold=self.threshold)
            records = [DetectionRecord(path.stem, d.class_id, d.box, d.score)
                       for d in detections]
            if net is not None and records:
                viewpoints = net.estimate(image, [r.box for r in records],
                                          [r.cls for r in records])
                records = [DetectionRecord(r.image_id, r.cls, r.box, r.confidence, v)
                           for r, v in zip(records, viewpoints)]

            for r in records:
                predictions.append({"image": str(path), "name": names.get(r.cls), **r.to_dict()})
            if self.overlay:
                write_image(out_dir / "overlays" / f"{path.stem}.png",
                            draw_predictions(image, records, names))
            self.get_logger().info(f"{path}: {len(records)} detections")

        write_json(out_dir / "predictions.json", predictions)
        self.write_run_manifest(out_dir, {"detector": self.args.detector,
                                          "viewpoint": self.args.viewpoint,
                                          "images": [str(p) for p in self.args.images]})
        return predictions


COMMANDS = {
    "gen-data": GenDataNode,
    "train": TrainNode,
    "finetune": FinetuneNode,
    "eval": EvalNode,
    "ablate": AblateNode,
    "predict": PredictNode,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fewshot_detpose",
        description="Few-shot object detection and viewpoint estimation on synthetic scenes.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config YAML, merged over the defaults")
    common.add_argument("--output", help=f"output root (default: ${OUTPUT_ENV} or 'runs')")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int,
                        help="parallel workers, results do not depend on it")
    common.add_argument("--out", help="output directory of this command")
    verbosity = common.add_mutually_exclusive_group()
    verbosity.add_argument("--verbose", dest="verbose", action="store_true", default=True)
    verbosity.add_argument("--quiet", dest="verbose", action="store_false")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate the synthetic dataset")
    p.add_argument("--num-classes", type=int)

    p = sub.add_parser("train", parents=[common], help="base-class training")
    p.add_argument("--task", choices=TASKS, default="detection")
    p.add_argument("--data", help="dataset directory (default: <output>/data)")
    p.add_argument("--agg", choices=[s.value for s in AggregationScheme])
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze-backbone", action="store_true", default=None)

    p = sub.add_parser("finetune", parents=[common], help="few-shot fine-tuning")
    p.add_argument("--task", choices=TASKS, default="detection")
    p.add_argument("--data")
    p.add_argument("--checkpoint", required=True, help="base-phase checkpoint directory")
    p.add_argument("--shots", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--freeze-backbone", action="store_true", default=None)

    p = sub.add_parser("eval", parents=[common], help="evaluate checkpoints")
    p.add_argument("--mode", choices=EVAL_MODES, default="detection")
    p.add_argument("--data")
    p.add_argument("--detector", help="detection checkpoint directory")
    p.add_argument("--viewpoint", help="viewpoint checkpoint directory")
    p.add_argument("--classes", choices=CLASS_SETS)
    p.add_argument("--split", choices=SPLITS)
    p.add_argument("--interpolation", choices=INTERPOLATIONS)

    p = sub.add_parser("ablate", parents=[common], help="aggregation scheme ablation")
    p.add_argument("--data")
    p.add_argument("--schemes", nargs="+", choices=[s.value for s in AggregationScheme])
    p.add_argument("--shots", nargs="+", type=int)
    p.add_argument("--sweep", action="store_true", help="use the configured K sweep")
    p.add_argument("--trials", type=int)

    p = sub.add_parser("predict", parents=[common], help="predict boxes and viewpoints")
    p.add_argument("--detector", required=True)
    p.add_argument("--viewpoint")
    p.add_argument("--threshold", type=float)
    p.add_argument("--overlay", action="store_true")
    p.add_argument("images", nargs="+")

    return parser


def config_overrides(args: argparse.Namespace) -> Dict[str, Any]:
    """CLI flags as dotted config keys; unset flags are skipped."""
    get = lambda name: getattr(args, name, None)  # noqa: E731
    overrides = {"seed": get("seed"), "workers": get("workers"), "output": get("output")}

    if args.command == "gen-data":
        overrides["dataset.num_classes"] = get("num_classes")
    elif args.command in ("train", "finetune"):
        phase = "base" if args.command == "train" else "finetune"
        section = f"train.{args.task}.{phase}"
        overrides.update({f"{section}.epochs": get("epochs"),
                          f"{section}.lr": get("lr"),
                          f"{section}.freeze_backbone": get("freeze_backbone"),
                          "train.aggregation": get("agg")})
        if phase == "finetune":
            overrides[f"{section}.shots"] = get("shots")
    elif args.command == "eval":
        overrides.update({"eval.classes": get("classes"), "eval.split": get("split"),
                          "eval.interpolation": get("interpolation")})
    elif args.command == "ablate":
        overrides.update({"ablation.schemes": get("schemes"), "ablation.shots": get("shots"),
                          "ablation.trials": get("trials")})
    elif args.command == "predict":
        overrides["predict.threshold"] = get("threshold")

    return {k: v for k, v in overrides.items() if v is not None}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    set_verbosity(args.verbose)

    if args.command == "eval":
        needed = {"detection": ["detector"], "viewpoint-gt": ["viewpoint"],
                  "joint": ["detector", "viewpoint"]}[args.mode]
        missing = [f"--{n}" for n in needed if not getattr(args, n)]
        if missing:
            parser.error(f"eval --mode {args.mode} requires {' and '.join(missing)}")

    logger = logging.getLogger(LOGGING_NAME)
    try:
        overrides = config_overrides(args)
        if "output" not in overrides and os.environ.get(OUTPUT_ENV):
            overrides["output"] = os.environ[OUTPUT_ENV]
        cfg = load_run_config(args.config, overrides)
        COMMANDS[args.command](cfg, args).run()
    except FewShotError as e:
        logger.error(f"{args.command} failed: {e}")
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
