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
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
import torch.nn.functional as F

from fewshot_detpose.aggregation import AggregationScheme
from fewshot_detpose.aggregation import average_class_features
from fewshot_detpose.detector import DetectionTrainOutputs
from fewshot_detpose.detector import FewShotDetector
from fewshot_detpose.detector import TrainingTargets
from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.exceptions import DivergenceError
from fewshot_detpose.exceptions import EmptyClassError
from fewshot_detpose.exceptions import InvalidArgumentError
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import encode_angle_bins
from fewshot_detpose.node import Node
from fewshot_detpose.synthdata import Episode
from fewshot_detpose.synthdata import EpisodeItem
from fewshot_detpose.synthdata import EpisodeSpec
from fewshot_detpose.synthdata import InstanceRef
from fewshot_detpose.synthdata import SyntheticDataset
from fewshot_detpose.synthdata import build_detection_class_data
from fewshot_detpose.synthdata import build_episode
from fewshot_detpose.viewpoint import ANGLES
from fewshot_detpose.viewpoint import FewShotViewpointNet
from fewshot_detpose.viewpoint import ViewpointOutput


TASKS = ("detection", "viewpoint")
PHASES = ("base", "finetune")
OPTIMIZERS = ("sgd", "adam")

Model = Union[FewShotDetector, FewShotViewpointNet]


#
# losses
#
def smooth_l1(x, beta: float = 1.0):
    """0.5 x^2 / beta below beta, |x| - 0.5 beta above; floats or tensors."""
    if beta <= 0.0:
        raise InvalidArgumentError(f"beta must be > 0, got {beta}")
    if isinstance(x, torch.Tensor):
        absolute = x.abs()
        return torch.where(absolute < beta, 0.5 * x * x / beta, absolute - 0.5 * beta)
    x = float(x)
    return 0.5 * x * x / beta if abs(x) < beta else abs(x) - 0.5 * beta


@dataclass
class LossBreakdown:
    """Named loss terms and their float64 sum, the scalar that is optimized."""

    terms: Dict[str, torch.Tensor]
    total: torch.Tensor

    @classmethod
    def from_terms(cls, terms: Dict[str, torch.Tensor]) -> "LossBreakdown":
        total = None
        for value in terms.values():
            value = value.double()
            total = value if total is None else total + value
        return cls(dict(terms), total)

    @classmethod
    def mean(cls, items: Sequence["LossBreakdown"]) -> "LossBreakdown":
        names = list(items[0].terms)
        return cls.from_terms({k: sum(b.terms[k] for b in items) / len(items) for k in names})

    def as_dict(self) -> Dict[str, float]:
        values = {k: float(v) for k, v in self.terms.items()}
        values["total"] = float(self.total)
        return values

    def term_sum(self) -> float:
        total = 0.0
        for value in self.terms.values():
            total += float(value.double())
        return total


def _zero(like: torch.Tensor) -> torch.Tensor:
    return like.sum() * 0.0


def detection_loss(
    outputs: DetectionTrainOutputs,
    targets: TrainingTargets,
    counters: Optional[Counter] = None
) -> LossBreakdown:
    """rpn (BCE on sampled anchors + smooth-L1 on positives), cls, loc and meta terms.

    Terms without samples are exactly 0 and counted in `counters`.
    """
    counters = Counter() if counters is None else counters
    det = outputs.detection

    if len(targets.anchor_indices):
        logits = outputs.rpn_objectness[targets.anchor_indices]
        rpn = F.binary_cross_entropy_with_logits(logits, targets.anchor_labels.to(logits.dtype))
    else:
        rpn = _zero(outputs.rpn_objectness)
    if len(targets.positive_anchors):
        residual = outputs.rpn_deltas[targets.positive_anchors] - targets.anchor_deltas
        rpn = rpn + smooth_l1(residual).sum(dim=1).mean()
    else:
        counters["no_positive_anchors"] += 1

    if len(targets.roi_labels):
        cls = F.cross_entropy(det.logits, targets.roi_labels)
    else:
        cls = _zero(det.logits)

    foreground = torch.nonzero(targets.roi_labels > 0).flatten()
    if len(foreground):
        deltas = det.deltas[foreground, targets.roi_labels[foreground] - 1]
        loc = smooth_l1(deltas - targets.roi_deltas[foreground]).sum(dim=1).mean()
    else:
        counters["no_positive_rois"] += 1
        loc = _zero(det.deltas)

    if len(targets.meta_labels):
        meta = F.cross_entropy(outputs.meta_logits, targets.meta_labels)
    else:
        meta = _zero(outputs.meta_logits)

    return LossBreakdown.from_terms({"rpn": rpn, "cls": cls, "loc": loc, "meta": meta})


def viewpoint_loss(
    out: ViewpointOutput,
    target: Union[Viewpoint, Sequence[Viewpoint]]
) -> LossBreakdown:
    """Per angle: bin cross-entropy plus smooth-L1 on the ground-truth bin's offset."""
    targets = [target] if isinstance(target, Viewpoint) else list(target)
    logits, offsets = out.logits, out.offsets
    if logits.dim() == 2:
        logits, offsets = logits[None], offsets[None]
    if logits.shape[0] != len(targets):
        raise InvalidArgumentError(f"{logits.shape[0]} outputs for {len(targets)} targets")

    codes = [encode_angle_bins(v) for v in targets]
    bins = torch.tensor([[c.bin_index for c in code] for code in codes], dtype=torch.long)
    target_offsets = torch.tensor([[c.offset for c in code] for code in codes],
                                  dtype=offsets.dtype)
    rows = torch.arange(len(targets))

    terms = {}
    for a, name in enumerate(ANGLES):
        terms[f"{name}_cls"] = F.cross_entropy(logits[:, a], bins[:, a])
        predicted = offsets[rows, a, bins[:, a]]
        terms[f"{name}_reg"] = smooth_l1(predicted - target_offsets[:, a]).mean()
    return LossBreakdown.from_terms(terms)


#
# configuration
#
@dataclass
class TrainConfig:
    task: str = "detection"
    phase: str = "base"
    optimizer: str = "sgd"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4
    epochs: int = 20
    milestones: Tuple[int, ...] = (5, 10, 15)
    gamma: float = 0.1
    batch_size: int = 4
    pool_size: int = 50
    freeze_backbone: bool = False
    shots: int = 10
    seed: int = 0
    scheme: AggregationScheme = AggregationScheme.FULL
    schedule_divisor: int = 1
    deterministic: bool = True

    def __post_init__(self) -> None:
        self.scheme = AggregationScheme.parse(self.scheme)
        self.milestones = tuple(int(m) for m in self.milestones)
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task '{self.task}', expected one of {TASKS}")
        if self.phase not in PHASES:
            raise ConfigurationError(f"unknown phase '{self.phase}', expected one of {PHASES}")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(
                f"unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if not self.lr > 0.0:
            raise ConfigurationError(f"learning rate must be > 0, got {self.lr}")
        if self.epochs < 1 or self.scaled_epochs < 1:
            raise ConfigurationError(
                f"epochs must be >= 1 after dividing by {self.schedule_divisor}, "
                f"got {self.epochs}")
        if self.pool_size < 1:
            raise ConfigurationError(f"pool size must be >= 1, got {self.pool_size}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch size must be >= 1, got {self.batch_size}")

    @property
    def scaled_epochs(self) -> int:
        return max(self.epochs // max(self.schedule_divisor, 1), 0)

    @property
    def scaled_milestones(self) -> List[int]:
        return [m // max(self.schedule_divisor, 1) for m in self.milestones]

    @classmethod
    def from_config(
        cls,
        cfg,
        task: str,
        phase: str,
        seed: Optional[int] = None,
        shots: Optional[int] = None
    ) -> "TrainConfig":
        """From a run config namespace, section train.<task>.<phase>."""
        section = getattr(getattr(cfg.train, task), phase)
        values = {k: v for k, v in vars(section).items() if k in cls.__dataclass_fields__}
        if shots is not None:
            values["shots"] = shots
        return cls(task=task, phase=phase,
                   seed=cfg.seed if seed is None else seed,
                   scheme=cfg.train.aggregation,
                   schedule_divisor=cfg.train.schedule_divisor,
                   deterministic=cfg.train.deterministic,
                   **values)

    def to_dict(self) -> dict:
        data = dict(vars(self))
        data["milestones"] = list(self.milestones)
        data["scheme"] = self.scheme.value
        return data


#
# class data
#
class ClassDataSampler:
    """One class-data item per class per draw; every pool is walked without
    replacement in a fresh random order before any item repeats."""

    def __init__(self, pools: Mapping[int, list], rng: np.random.Generator) -> None:
        self.pools = {c: list(items) for c, items in pools.items()}
        self.rng = rng
        self._queues: Dict[int, List[int]] = {c: [] for c in self.pools}

    def draw(self, class_ids: Sequence[int]) -> Dict[int, object]:
        drawn = {}
        for c in class_ids:
            if not self.pools.get(c):
                raise EmptyClassError(f"class {c} has an empty class-data pool")
            if not self._queues[c]:
                self._queues[c] = list(self.rng.permutation(len(self.pools[c])))
            drawn[c] = self.pools[c][self._queues[c].pop()]
        return drawn


def class_data_tensor(dataset: SyntheticDataset, refs: Sequence[InstanceRef]) -> np.ndarray:
    return np.stack([build_detection_class_data(dataset.scene(r), r.object_index).image_with_mask
                     for r in refs])


def build_inference_class_features(
    model: Model,
    dataset: SyntheticDataset,
    class_data: Mapping[int, Sequence],
    class_ids: Optional[Sequence[int]] = None
) -> Dict[int, torch.Tensor]:
    """Mean class feature per class over its few-shot class data.

    Detection class data are instance references into the dataset, viewpoint
    class data are point clouds.
    """
    class_ids = list(class_data) if class_ids is None else list(class_ids)
    features = {}
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for c in class_ids:
            items = class_data.get(c) or []
            if not items:
                raise EmptyClassError(f"no few-shot class data for class {c}")
            if isinstance(model, FewShotDetector):
                encoded = model.encode_class_detection(class_data_tensor(dataset, items))
                features[c] = average_class_features(encoded)
            else:
                features[c] = model.build_class_shape_feature(items)
    model.train(was_training)
    return features


#
# phase runner
#
@dataclass
class PhaseResult:
    model: Model
    log: pd.DataFrame
    episode: Episode
    counters: Counter = field(default_factory=Counter)

    def epoch_table(self) -> pd.DataFrame:
        return self.log.groupby("epoch").mean(numeric_only=True).drop(columns=["step"])


class Trainer(Node):
    """Runs one training phase (base or finetune) of one task."""

    def __init__(
        self,
        model: Model,
        dataset: SyntheticDataset,
        config: TrainConfig,
        spec: EpisodeSpec,
        out_dir: Optional[Union[str, Path]] = None
    ) -> None:
        super().__init__(f"trainer.{config.task}.{config.phase}")

        # params
        self.lr = self.declare_parameter("lr", config.lr).value
        self.epochs = self.declare_parameter("epochs", config.scaled_epochs).value
        self.milestones = self.declare_parameter("milestones", config.scaled_milestones).value
        self.batch_size = self.declare_parameter("batch_size", config.batch_size).value
        self.seed = self.declare_parameter("seed", config.seed).value

        self.model = model
        self.dataset = dataset
        self.config = config
        self.spec = spec
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.counters: Counter = Counter()
        self.totals: Counter = Counter()

        self.get_logger().info(f"{self.get_name()} node started")

    def _optimizer(self) -> torch.optim.Optimizer:
        params = [p for p in self.model.parameters() if p.requires_grad]
        if self.config.optimizer == "sgd":
            return torch.optim.SGD(params, lr=self.lr, momentum=self.config.momentum,
                                   weight_decay=self.config.weight_decay)
        return torch.optim.Adam(params, lr=self.lr, weight_decay=self.config.weight_decay)

    def _freeze(self) -> None:
        encoder = self.model.backbone if isinstance(self.model, FewShotDetector) \
            else self.model.image_encoder
        for p in encoder.parameters():
            p.requires_grad_(False)
        self.get_logger().info("backbone frozen")

    def _detection_step(
        self,
        items: Sequence[EpisodeItem],
        sampler: ClassDataSampler,
        generator: torch.Generator,
        classes: Sequence[int]
    ) -> LossBreakdown:
        refs = sampler.draw(classes)
        class_feats = self.model.encode_class_detection(
            class_data_tensor(self.dataset, [refs[c] for c in classes]))

        losses = []
        for item in items:
            scene = self.dataset.scene(item)
            objects = [scene.objects[o] for o in item.object_indices]
            outputs, targets = self.model.forward_train(
                scene.image,
                np.array([o.box.as_list() for o in objects]).reshape(-1, 4),
                [o.cls for o in objects],
                class_feats,
                generator)
            losses.append(detection_loss(outputs, targets, self.counters))
        return LossBreakdown.mean(losses)

    def _viewpoint_step(
        self,
        items: Sequence[EpisodeItem],
        shapes: Mapping[int, list],
    ) -> LossBreakdown:
        objects = [self.dataset.scene(item).objects[item.object_indices[0]] for item in items]
        classes = sorted({o.cls for o in objects})
        class_feats = {c: self.model.build_class_shape_feature(shapes[c]) for c in classes}

        f_qry = torch.cat([
            self.model.encode_query_crops(self.dataset.scene(item).image, [obj.box])
            for item, obj in zip(items, objects)])
        f_cls = torch.stack([class_feats[o.cls] for o in objects])
        out = self.model.viewpoint_predict(f_qry, f_cls)
        return viewpoint_loss(out, [o.viewpoint for o in objects])

    def _diverged(self, step: int, epoch: int, loss: LossBreakdown,
                  items: Sequence[EpisodeItem]) -> None:
        snapshot = {
            "step": step,
            "epoch": epoch,
            "terms": {k: repr(v) for k, v in loss.as_dict().items()},
            "items": [[i.split, i.scene_index, list(i.object_indices)] for i in items],
            "config": self.config.to_dict(),
        }
        if self.out_dir is not None:
            path = self.out_dir / "divergence"
            path.mkdir(parents=True, exist_ok=True)
            torch.save(self.model.state_dict(), path / "params.pt")
            with open(path / "snapshot.json", "w") as f:
                json.dump(snapshot, f, indent=2)
        self.get_logger().error(
            f"non-finite loss at step {step} (epoch {epoch}): {snapshot['terms']}")
        error = DivergenceError(f"non-finite loss at step {step}, epoch {epoch}")
        error.snapshot = snapshot
        raise error

    def run(self) -> PhaseResult:
        cfg = self.config
        if cfg.deterministic:
            torch.set_num_threads(1)
        torch.manual_seed(self.seed)

        episode = build_episode(self.dataset, self.spec, cfg.phase, cfg.task, cfg.pool_size)
        self.model.set_classes(episode.classes)
        self.get_logger().info(
            f"{cfg.task} {cfg.phase}: {len(episode.items)} items, classes {episode.classes}, "
            f"instances per class {episode.instance_counts()}")

        if cfg.freeze_backbone:
            self._freeze()
        self.model.train()
        optimizer = self._optimizer()
        scheduler = torch.optim.lr_scheduler.MultiStepLR(optimizer, self.milestones, cfg.gamma)

        rng = np.random.default_rng(self.seed)
        generator = torch.Generator().manual_seed(self.seed)
        sampler = ClassDataSampler(episode.class_pools, rng)

        rows, step = [], 0
        for epoch in range(1, self.epochs + 1):
            order = rng.permutation(len(episode.items))
            epoch_start = len(rows)
            lr = optimizer.param_groups[0]["lr"]
            for start in range(0, len(order), self.batch_size):
                items = [episode.items[i] for i in order[start:start + self.batch_size]]
                if cfg.task == "detection":
                    loss = self._detection_step(items, sampler, generator, episode.classes)
                else:
                    loss = self._viewpoint_step(items, episode.class_pools)

                if not torch.isfinite(loss.total):
                    self._diverged(step, epoch, loss, items)

                optimizer.zero_grad()
                loss.total.backward()
                optimizer.step()

                rows.append({"step": step, "epoch": epoch, "lr": lr, **loss.as_dict()})
                step += 1
            scheduler.step()

            means = pd.DataFrame(rows[epoch_start:]).drop(columns=["step", "epoch", "lr"])
            means = means.mean()
            self.get_logger().info(
                f"epoch {epoch}/{self.epochs} lr {lr:.2e} "
                + " ".join(f"{k} {v:.4f}" for k, v in means.items()))
            self._report_counters()

        self.model.class_features = build_inference_class_features(
            self.model, self.dataset, episode.class_pools, episode.classes)

        log = pd.DataFrame(rows)
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log.to_csv(self.out_dir / "metrics.csv", index=False)
            audit = {str(c): [[r.split, r.scene_index, r.object_index] for r in refs]
                     for c, refs in episode.audit.items()}
            with open(self.out_dir / "audit.json", "w") as f:
                json.dump(audit, f, indent=2)

        return PhaseResult(self.model, log, episode, Counter(self.totals))

    def _report_counters(self) -> None:
        model_counters = getattr(self.model, "counters", Counter())
        merged = self.counters + model_counters
        self.totals.update(merged)
        for name in sorted(merged):
            if merged[name]:
                self.get_logger().warning(f"{name}: {merged[name]}")
        self.counters.clear()
        model_counters.clear()


def run_phase(
    model: Model,
    dataset: SyntheticDataset,
    config: TrainConfig,
    spec: EpisodeSpec,
    out_dir: Optional[Union[str, Path]] = None
) -> PhaseResult:
    return Trainer(model, dataset, config, spec, out_dir).run()
