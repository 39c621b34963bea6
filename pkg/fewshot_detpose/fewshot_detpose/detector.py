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


import hashlib
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torchvision.ops import box_iou as tv_box_iou
from torchvision.ops import clip_boxes_to_image
from torchvision.ops import roi_align

from fewshot_detpose.aggregation import AggregationScheme
from fewshot_detpose.aggregation import aggregate
from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.exceptions import InvalidArgumentError
from fewshot_detpose.exceptions import ShapeError
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import apply_box_deltas
from fewshot_detpose.geometry import box_iou_matrix
from fewshot_detpose.geometry import compute_box_deltas


ImageLike = Union[np.ndarray, torch.Tensor]


@dataclass
class DetectorConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    groups: int = 4
    pool_size: int = 5
    sampling_ratio: int = 2
    anchor_scales: Tuple[float, ...] = (16.0, 32.0, 48.0)
    anchor_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    predictor_hidden: int = 256
    rpn_nms_iou: float = 0.7
    train_top_n: int = 100
    eval_top_n: int = 50
    final_nms_iou: float = 0.3
    score_threshold: float = 0.05
    detections_per_image: int = 100
    rpn_batch: int = 64
    rpn_positive_fraction: float = 0.5
    rpn_pos_iou: float = 0.5
    rpn_neg_iou: float = 0.3
    roi_batch: int = 32
    roi_positive_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    num_meta_classes: int = 12
    scheme: AggregationScheme = AggregationScheme.FULL

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.anchor_scales = tuple(float(s) for s in self.anchor_scales)
        self.anchor_ratios = tuple(float(r) for r in self.anchor_ratios)
        self.scheme = AggregationScheme.parse(self.scheme)

    @property
    def stride(self) -> int:
        return 2 ** len(self.widths)

    @property
    def feature_width(self) -> int:
        return self.widths[-1]

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_scales) * len(self.anchor_ratios)

    @classmethod
    def from_config(cls, cfg, num_meta_classes: int, scheme) -> "DetectorConfig":
        """Build from the `detector` section of a run config."""
        values = {k: v for k, v in vars(cfg).items() if k in cls.__dataclass_fields__}
        return cls(num_meta_classes=num_meta_classes, scheme=scheme, **values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["widths"] = list(self.widths)
        data["anchor_scales"] = list(self.anchor_scales)
        data["anchor_ratios"] = list(self.anchor_ratios)
        data["scheme"] = self.scheme.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "DetectorConfig":
        return cls(**data)

    def architecture_hash(self) -> str:
        arch = {
            "kind": "detector",
            "widths": list(self.widths),
            "groups": self.groups,
            "pool_size": self.pool_size,
            "num_anchors": self.num_anchors,
            "predictor_hidden": self.predictor_hidden,
            "num_meta_classes": self.num_meta_classes,
            "scheme": self.scheme.value,
        }
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


#
# backbone
#
class ConvBlock(nn.Module):
    """conv 3x3, group norm, ReLU, 2x average pooling."""

    def __init__(self, in_channels: int, out_channels: int, groups: int = 4) -> None:
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.post = PostConv(out_channels, groups)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.post(self.conv(x))


class PostConv(nn.Sequential):

    def __init__(self, channels: int, groups: int) -> None:
        super().__init__(nn.GroupNorm(math.gcd(groups, channels), channels),
                         nn.ReLU(),
                         nn.AvgPool2d(2))


def pad_to_stride(x: torch.Tensor, stride: int) -> torch.Tensor:
    """Zero-pad right and bottom so H and W are multiples of stride."""
    height, width = x.shape[-2:]
    pad_h = -height % stride
    pad_w = -width % stride
    if pad_h or pad_w:
        x = F.pad(x, (0, pad_w, 0, pad_h))
    return x


class Backbone(nn.Module):
    """Shared conv blocks with separate first layers for 3-channel query
    images and 4-channel (RGB + mask) class data."""

    def __init__(self, widths: Sequence[int], groups: int = 4) -> None:
        super().__init__()
        self.stride = 2 ** len(widths)
        self.query_stem = nn.Conv2d(3, widths[0], 3, padding=1)
        self.class_stem = nn.Conv2d(4, widths[0], 3, padding=1)
        self.stem_post = PostConv(widths[0], groups)
        self.blocks = nn.Sequential(*[
            ConvBlock(widths[i], widths[i + 1], groups) for i in range(len(widths) - 1)])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        channels = x.shape[1]
        if channels == 3:
            stem = self.query_stem
        elif channels == 4:
            stem = self.class_stem
        else:
            raise ShapeError(f"backbone expects 3 or 4 input channels, got {channels}")
        x = pad_to_stride(x, self.stride)
        return self.blocks(self.stem_post(stem(x)))


@dataclass
class BackboneFeatureMap:
    features: torch.Tensor  # C x h x w
    stride: int
    image_size: Tuple[int, int]  # unpadded H, W

    @property
    def shape(self) -> Tuple[int, int, int]:
        return tuple(self.features.shape)


#
# region proposals
#
class AnchorGenerator:
    """3 scales x 3 ratios per cell, ratio = h / w, centred on cell centres."""

    def __init__(self, scales: Sequence[float], ratios: Sequence[float], stride: int) -> None:
        self.scales = tuple(scales)
        self.ratios = tuple(ratios)
        self.stride = stride
        self._cache: Dict[Tuple[int, int], np.ndarray] = {}

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.ratios)

    def cell_anchors(self) -> np.ndarray:
        anchors = []
        for scale in self.scales:
            for ratio in self.ratios:
                h = scale * math.sqrt(ratio)
                w = scale / math.sqrt(ratio)
                anchors.append([-w / 2, -h / 2, w / 2, h / 2])
        return np.array(anchors)

    def grid_anchors(self, height: int, width: int) -> np.ndarray:
        """(height * width * A, 4) anchors, index (row * width + col) * A + a."""
        key = (height, width)
        if key not in self._cache:
            cx = (np.arange(width) + 0.5) * self.stride
            cy = (np.arange(height) + 0.5) * self.stride
            cy, cx = np.meshgrid(cy, cx, indexing="ij")
            shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
            self._cache[key] = (shifts + self.cell_anchors()[None]).reshape(-1, 4)
        return self._cache[key].copy()


class RPNHead(nn.Module):

    def __init__(self, channels: int, num_anchors: int) -> None:
        super().__init__()
        self.num_anchors = num_anchors
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)
        self.objectness = nn.Conv2d(channels, num_anchors, 1)
        self.deltas = nn.Conv2d(channels, 4 * num_anchors, 1)

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        """(B, C, h, w) -> logits (B, h*w*A) and deltas (B, h*w*A, 4)."""
        batch, _, height, width = x.shape
        x = F.relu(self.conv(x))
        logits = self.objectness(x).permute(0, 2, 3, 1).reshape(batch, -1)
        deltas = self.deltas(x).view(batch, self.num_anchors, 4, height, width)
        deltas = deltas.permute(0, 3, 4, 1, 2).reshape(batch, -1, 4)
        return logits, deltas


@dataclass
class RPNOutput:
    objectness: torch.Tensor  # N logits
    deltas: torch.Tensor  # N x 4
    anchors: np.ndarray  # N x 4
    image_size: Tuple[int, int]

    @property
    def num_anchors(self) -> int:
        return len(self.anchors)


@dataclass(frozen=True)
class Proposal:
    box: BoundingBox
    objectness: float
    anchor_index: int = -1


def greedy_nms(
    boxes: torch.Tensor,
    scores: torch.Tensor,
    iou_threshold: float,
    top_n: Optional[int] = None
) -> torch.Tensor:
    """Indices kept by greedy NMS, highest score first.

    A box is suppressed when its IoU with a kept box exceeds iou_threshold.
    Equal scores keep input order (stable sort), so lower indices win ties.
    """
    if len(boxes) == 0:
        return torch.zeros(0, dtype=torch.long)

    order = torch.sort(scores, descending=True, stable=True).indices
    iou = tv_box_iou(boxes[order], boxes[order])
    suppressed = torch.zeros(len(order), dtype=torch.bool)

    keep = []
    for i in range(len(order)):
        if suppressed[i]:
            continue
        keep.append(int(order[i]))
        if top_n is not None and len(keep) >= top_n:
            break
        suppressed |= iou[i] > iou_threshold
    return torch.tensor(keep, dtype=torch.long)


def generate_proposals(
    rpn_out: RPNOutput,
    top_n: int,
    nms_iou: float,
    min_size: float = 1e-3
) -> List[Proposal]:
    """Decode, clip, sort by objectness, NMS, keep at most top_n."""
    if top_n < 1:
        raise InvalidArgumentError(f"top_n must be >= 1, got {top_n}")
    if not 0.0 < nms_iou < 1.0:
        raise InvalidArgumentError(f"nms_iou must be in (0, 1), got {nms_iou}")

    with torch.no_grad():
        deltas = rpn_out.deltas.detach().double().cpu().numpy()
        scores = rpn_out.objectness.detach().double().cpu()
        boxes = torch.from_numpy(apply_box_deltas(rpn_out.anchors, deltas))
        boxes = clip_boxes_to_image(boxes, rpn_out.image_size)

        valid = ((boxes[:, 2] - boxes[:, 0]) > min_size) & ((boxes[:, 3] - boxes[:, 1]) > min_size)
        valid &= torch.isfinite(scores)
        index = torch.nonzero(valid).flatten()
        keep = index[greedy_nms(boxes[index], scores[index], nms_iou, top_n)]

    return [Proposal(BoundingBox.from_array(boxes[i].tolist()), float(scores[i]), int(i))
            for i in keep]


def proposal_boxes(proposals: Sequence[Proposal]) -> np.ndarray:
    if not proposals:
        return np.zeros((0, 4))
    return np.stack([p.box.as_array() for p in proposals])


def pool_rois(
    features: torch.Tensor,
    boxes: torch.Tensor,
    stride: int,
    output_size: int,
    sampling_ratio: int = 2
) -> torch.Tensor:
    """Bilinear RoI alignment of (R, 4) image-space boxes on a C x h x w map."""
    if features.dim() == 3:
        features = features[None]
    boxes = boxes.to(features.dtype)
    return roi_align(features, [boxes], output_size=output_size,
                     spatial_scale=1.0 / stride, sampling_ratio=sampling_ratio,
                     aligned=True)


#
# prediction
#
@dataclass
class DetectionOutput:
    logits: torch.Tensor  # R x (C + 1), column 0 is background
    scores: torch.Tensor  # softmax of logits
    deltas: torch.Tensor  # R x C x 4
    class_ids: List[int]
    proposal_boxes: Optional[np.ndarray] = None  # R x 4

    def regressed_boxes(self) -> np.ndarray:
        """R x C x 4 boxes, class c column is box_{i,c}."""
        if self.proposal_boxes is None:
            raise InvalidArgumentError("detection output carries no proposal boxes")
        num_rois, num_classes = self.deltas.shape[:2]
        boxes = np.repeat(self.proposal_boxes[:, None], num_classes, axis=1)
        deltas = self.deltas.detach().double().cpu().numpy()
        return apply_box_deltas(boxes.reshape(-1, 4), deltas.reshape(-1, 4)).reshape(
            num_rois, num_classes, 4)


class DetectionPredictor(nn.Module):
    """Class-specific head shared over classes: aggregated (RoI, class)
    features give an is-c logit and a 4-vector box delta."""

    def __init__(self, width: int, scheme: AggregationScheme, hidden: int = 256) -> None:
        super().__init__()
        self.scheme = AggregationScheme.parse(scheme)
        self.mlp = nn.Sequential(nn.Linear(self.scheme.output_width(width), hidden),
                                 nn.ReLU())
        self.cls_logit = nn.Linear(hidden, 1)
        self.box_delta = nn.Linear(hidden, 4)
        self.background = nn.Linear(width, 1)

    def forward(
        self,
        roi_feats: torch.Tensor,
        class_feats: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        hidden = self.mlp(aggregate(roi_feats[:, None, :], class_feats[None, :, :], self.scheme))
        logits = torch.cat([self.background(roi_feats), self.cls_logit(hidden).squeeze(-1)], dim=1)
        return logits, self.box_delta(hidden)


@dataclass(frozen=True)
class Detection:
    class_id: int
    box: BoundingBox
    score: float


@dataclass
class TrainingTargets:
    anchor_indices: torch.Tensor  # sampled anchors
    anchor_labels: torch.Tensor  # 1 object, 0 background
    positive_anchors: torch.Tensor  # subset of anchor_indices with label 1
    anchor_deltas: torch.Tensor  # regression targets of positive_anchors
    roi_boxes: torch.Tensor  # sampled RoIs, R x 4
    roi_labels: torch.Tensor  # 0 background, 1 + position in class_ids
    roi_deltas: torch.Tensor  # R x 4, zero for background
    meta_labels: torch.Tensor  # class id of every class feature row

    @property
    def num_positive_rois(self) -> int:
        return int((self.roi_labels > 0).sum())


@dataclass
class DetectionTrainOutputs:
    rpn_objectness: torch.Tensor
    rpn_deltas: torch.Tensor
    detection: DetectionOutput
    meta_logits: torch.Tensor


def image_to_tensor(image: ImageLike, dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """H x W x C array (or C x H x W / B x C x H x W tensor) to a B x C x H x W tensor."""
    if isinstance(image, np.ndarray):
        if image.ndim != 3:
            raise ShapeError(f"expected an H x W x C image, got shape {image.shape}")
        image = torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1)))
    if image.dim() == 3:
        image = image[None]
    return image.to(dtype)


class FewShotDetector(nn.Module):
    """Two-stage detector conditioned on class features.

    The backbone serves both the query image and the class data; RPN
    proposals are pooled with RoI align and scored per class by the
    aggregation-based predictor.
    """

    def __init__(self, config: DetectorConfig, class_ids: Sequence[int] = ()) -> None:
        super().__init__()
        self.config = config
        width = config.feature_width
        self.backbone = Backbone(config.widths, config.groups)
        self.anchor_generator = AnchorGenerator(config.anchor_scales, config.anchor_ratios,
                                                config.stride)
        self.rpn = RPNHead(width, config.num_anchors)
        self.roi_head = nn.Linear(width * config.pool_size ** 2, width)
        self.predictor = DetectionPredictor(width, config.scheme, config.predictor_hidden)
        self.meta_head = nn.Linear(width, config.num_meta_classes)

        self.class_ids: List[int] = list(class_ids)
        self.class_features: Dict[int, torch.Tensor] = {}
        self.counters: Counter = Counter()

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def scheme(self) -> AggregationScheme:
        return self.config.scheme

    def set_classes(self, class_ids: Sequence[int]) -> None:
        self.class_ids = list(class_ids)

    def backbone_forward(self, image: ImageLike) -> BackboneFeatureMap:
        x = image_to_tensor(image, self.dtype)
        if x.shape[0] != 1:
            raise ShapeError(f"expected a single image, got batch of {x.shape[0]}")
        height, width = x.shape[-2:]
        return BackboneFeatureMap(self.backbone(x)[0], self.config.stride, (height, width))

    def rpn_forward(self, fm: BackboneFeatureMap) -> RPNOutput:
        logits, deltas = self.rpn(fm.features[None])
        height, width = fm.features.shape[-2:]
        return RPNOutput(logits[0], deltas[0],
                         self.anchor_generator.grid_anchors(height, width), fm.image_size)

    def roi_features(
        self,
        fm: BackboneFeatureMap,
        proposals: Union[Sequence[Proposal], np.ndarray, torch.Tensor]
    ) -> torch.Tensor:
        """Width-D features of every proposal with area >= 1 px; smaller ones
        are skipped and counted under counters['degenerate_rois']."""
        boxes = proposals
        if not isinstance(proposals, (np.ndarray, torch.Tensor)):
            boxes = proposal_boxes(proposals)
        boxes = torch.as_tensor(boxes, dtype=self.dtype).reshape(-1, 4)

        area = (boxes[:, 2] - boxes[:, 0]).clamp(min=0) * (boxes[:, 3] - boxes[:, 1]).clamp(min=0)
        valid = area >= 1.0
        self.counters["degenerate_rois"] += int((~valid).sum())

        pooled = pool_rois(fm.features, boxes[valid], fm.stride,
                           self.config.pool_size, self.config.sampling_ratio)
        return F.relu(self.roi_head(pooled.flatten(1)))

    def encode_class_detection(self, class_data: ImageLike) -> torch.Tensor:
        """Mask-augmented image(s) to (B, D) class features by global average pooling."""
        x = image_to_tensor(class_data, self.dtype)
        if x.shape[1] != 4:
            raise ShapeError(f"class data needs 4 channels (RGB + mask), got {x.shape[1]}")
        return self.backbone(x).mean(dim=(2, 3))

    def _stack_class_features(
        self,
        class_feats: Mapping[int, torch.Tensor],
        class_ids: Optional[Sequence[int]]
    ) -> Tuple[List[int], torch.Tensor]:
        if class_ids is None and self.class_ids:
            extra = sorted(set(class_feats) - set(self.class_ids))
            if extra:
                raise ConfigurationError(
                    f"class features for classes {extra} outside the model classes "
                    f"{self.class_ids}; pass class_ids explicitly")
            class_ids = self.class_ids
        class_ids = list(class_feats) if class_ids is None else list(class_ids)
        missing = [c for c in class_ids if c not in class_feats]
        if missing:
            raise ConfigurationError(f"no class features for classes {missing}")
        return class_ids, torch.stack([class_feats[c].to(self.dtype) for c in class_ids])

    def detect_predict(
        self,
        roi_feats: torch.Tensor,
        class_feats: Mapping[int, torch.Tensor],
        class_ids: Optional[Sequence[int]] = None
    ) -> DetectionOutput:
        class_ids, stacked = self._stack_class_features(class_feats, class_ids)
        width = self.config.feature_width
        if roi_feats.shape[-1] != width or stacked.shape[-1] != width:
            raise ShapeError(
                f"predictor expects width {width}, got RoI {roi_feats.shape[-1]} "
                f"and class {stacked.shape[-1]}")
        logits, deltas = self.predictor(roi_feats, stacked)
        return DetectionOutput(logits, F.softmax(logits, dim=1), deltas, class_ids)

    @torch.no_grad()
    def plan_training_batch(
        self,
        rpn_out: RPNOutput,
        proposals: Sequence[Proposal],
        gt_boxes: np.ndarray,
        gt_classes: Sequence[int],
        generator: torch.Generator,
        meta_labels: Sequence[int] = ()
    ) -> TrainingTargets:
        """Anchor and RoI assignments plus sampled minibatches.

        Anchors: positive at IoU >= rpn_pos_iou or best anchor of a GT,
        negative below rpn_neg_iou. RoIs: proposals plus GT boxes,
        foreground at IoU >= roi_fg_iou. GT objects of classes outside
        class_ids are dropped.
        """
        cfg = self.config
        position = {c: i for i, c in enumerate(self.class_ids)}
        keep = [i for i, c in enumerate(gt_classes) if c in position]
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)[keep]
        gt_labels = np.array([position[gt_classes[i]] + 1 for i in keep], dtype=np.int64)

        # anchors
        anchors = rpn_out.anchors
        labels = np.full(len(anchors), -1, dtype=np.int64)
        matched = np.zeros(len(anchors), dtype=np.int64)
        if len(gt_boxes):
            iou = box_iou_matrix(anchors, gt_boxes)
            max_iou = iou.max(axis=1)
            matched = iou.argmax(axis=1)
            labels[max_iou < cfg.rpn_neg_iou] = 0
            labels[max_iou >= cfg.rpn_pos_iou] = 1
            for g in range(len(gt_boxes)):
                best = iou[:, g].max()
                if best > 0.0:
                    hits = np.nonzero(iou[:, g] == best)[0]
                    labels[hits] = 1
                    matched[hits] = g
        else:
            labels[:] = 0

        positives = _sample(np.nonzero(labels == 1)[0],
                            int(cfg.rpn_batch * cfg.rpn_positive_fraction), generator)
        negatives = _sample(np.nonzero(labels == 0)[0], cfg.rpn_batch - len(positives), generator)
        anchor_indices = np.concatenate([positives, negatives])
        anchor_deltas = compute_box_deltas(anchors[positives], gt_boxes[matched[positives]]) \
            if len(positives) else np.zeros((0, 4))

        # RoIs
        candidates = np.concatenate([proposal_boxes(proposals), gt_boxes])
        area = (candidates[:, 2] - candidates[:, 0]) * (candidates[:, 3] - candidates[:, 1])
        candidates = candidates[area >= 1.0]
        roi_labels = np.zeros(len(candidates), dtype=np.int64)
        roi_matched = np.zeros(len(candidates), dtype=np.int64)
        if len(gt_boxes):
            iou = box_iou_matrix(candidates, gt_boxes)
            roi_matched = iou.argmax(axis=1)
            foreground = iou.max(axis=1) >= cfg.roi_fg_iou
            roi_labels[foreground] = gt_labels[roi_matched[foreground]]

        fg = _sample(np.nonzero(roi_labels > 0)[0],
                     int(cfg.roi_batch * cfg.roi_positive_fraction), generator)
        bg = _sample(np.nonzero(roi_labels == 0)[0], cfg.roi_batch - len(fg), generator)
        rois = np.concatenate([fg, bg])
        roi_deltas = np.zeros((len(rois), 4))
        if len(fg):
            roi_deltas[:len(fg)] = compute_box_deltas(candidates[fg], gt_boxes[roi_matched[fg]])

        dtype = self.dtype
        return TrainingTargets(
            anchor_indices=torch.as_tensor(anchor_indices, dtype=torch.long),
            anchor_labels=torch.as_tensor(labels[anchor_indices], dtype=dtype),
            positive_anchors=torch.as_tensor(positives, dtype=torch.long),
            anchor_deltas=torch.as_tensor(anchor_deltas, dtype=dtype),
            roi_boxes=torch.as_tensor(candidates[rois], dtype=dtype).reshape(-1, 4),
            roi_labels=torch.as_tensor(roi_labels[rois], dtype=torch.long),
            roi_deltas=torch.as_tensor(roi_deltas, dtype=dtype),
            meta_labels=torch.as_tensor(list(meta_labels), dtype=torch.long))

    def forward_train(
        self,
        image: ImageLike,
        gt_boxes: np.ndarray,
        gt_classes: Sequence[int],
        class_feats: torch.Tensor,
        generator: Optional[torch.Generator] = None,
        targets: Optional[TrainingTargets] = None
    ) -> Tuple[DetectionTrainOutputs, TrainingTargets]:
        """One training image against C x D class features ordered as class_ids.

        Passing `targets` reuses an earlier assignment, which keeps the loss a
        smooth function of the parameters.
        """
        if class_feats.shape[0] != len(self.class_ids):
            raise ShapeError(
                f"{class_feats.shape[0]} class features for {len(self.class_ids)} classes")

        fm = self.backbone_forward(image)
        rpn_out = self.rpn_forward(fm)
        if targets is None:
            proposals = generate_proposals(rpn_out, self.config.train_top_n,
                                           self.config.rpn_nms_iou)
            generator = generator if generator is not None else torch.Generator().manual_seed(0)
            targets = self.plan_training_batch(rpn_out, proposals, gt_boxes, gt_classes,
                                               generator, self.class_ids)

        pooled = pool_rois(fm.features, targets.roi_boxes, fm.stride,
                           self.config.pool_size, self.config.sampling_ratio)
        roi_feats = F.relu(self.roi_head(pooled.flatten(1)))
        logits, deltas = self.predictor(roi_feats, class_feats)
        detection = DetectionOutput(logits, F.softmax(logits, dim=1), deltas, list(self.class_ids))

        outputs = DetectionTrainOutputs(rpn_objectness=rpn_out.objectness,
                                        rpn_deltas=rpn_out.deltas,
                                        detection=detection,
                                        meta_logits=self.meta_head(class_feats))
        return outputs, targets

    @torch.no_grad()
    def detect(
        self,
        image: ImageLike,
        class_feats: Optional[Mapping[int, torch.Tensor]] = None,
        class_ids: Optional[Sequence[int]] = None,
        score_threshold: Optional[float] = None
    ) -> List[Detection]:
        """Final detections: per-class thresholding and NMS, best first."""
        cfg = self.config
        class_feats = self.class_features if class_feats is None else class_feats
        class_ids = (self.class_ids or list(class_feats)) if class_ids is None else class_ids
        threshold = cfg.score_threshold if score_threshold is None else score_threshold

        fm = self.backbone_forward(image)
        proposals = generate_proposals(self.rpn_forward(fm), cfg.eval_top_n, cfg.rpn_nms_iou)
        boxes = proposal_boxes(proposals)
        boxes = boxes[(boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]) >= 1.0]
        if len(boxes) == 0:
            return []

        output = self.detect_predict(self.roi_features(fm, boxes), class_feats, class_ids)
        output.proposal_boxes = boxes
        height, width = fm.image_size
        regressed = torch.from_numpy(output.regressed_boxes())
        scores = output.scores.double().cpu()

        detections = []
        for c, class_id in enumerate(output.class_ids):
            class_boxes = clip_boxes_to_image(regressed[:, c], (height, width))
            class_scores = scores[:, c + 1]
            valid = (class_scores > threshold) \
                & (class_boxes[:, 2] > class_boxes[:, 0]) & (class_boxes[:, 3] > class_boxes[:, 1])
            index = torch.nonzero(valid).flatten()
            for i in index[greedy_nms(class_boxes[index], class_scores[index], cfg.final_nms_iou)]:
                box = BoundingBox.from_array(class_boxes[i].tolist())
                detections.append(Detection(class_id, box, float(class_scores[i])))

        order = torch.sort(torch.tensor([d.score for d in detections]), descending=True,
                           stable=True).indices
        return [detections[i] for i in order[:cfg.detections_per_image]]


def _sample(indices: np.ndarray, limit: int, generator: torch.Generator) -> np.ndarray:
    if len(indices) <= limit:
        return indices
    choice = torch.randperm(len(indices), generator=generator)[:max(limit, 0)].numpy()
    return indices[np.sort(choice)]
