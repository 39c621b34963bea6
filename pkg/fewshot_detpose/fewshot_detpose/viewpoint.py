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
from dataclasses import asdict, dataclass
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn as nn
from torchvision.ops import roi_align

from fewshot_detpose.aggregation import AggregationScheme
from fewshot_detpose.aggregation import aggregate
from fewshot_detpose.aggregation import average_class_features
from fewshot_detpose.detector import ConvBlock
from fewshot_detpose.detector import ImageLike
from fewshot_detpose.detector import image_to_tensor
from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.exceptions import DegenerateBoxError
from fewshot_detpose.exceptions import EmptyClassError
from fewshot_detpose.exceptions import ShapeError
from fewshot_detpose.geometry import NUM_BINS
from fewshot_detpose.geometry import AngleBinCode
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import decode_angle_bins
from fewshot_detpose.geometry import encode_angle_bins
from fewshot_detpose.synthdata import ClassModel
from fewshot_detpose.synthdata import ShapePointCloud
from fewshot_detpose.synthdata import sample_point_cloud


MIN_POINTS = 16
ANGLES = ("azi", "ele", "inp")

BoxLike = Union[BoundingBox, Sequence[float]]


@dataclass
class ViewpointConfig:
    widths: Tuple[int, ...] = (16, 32, 64, 128)
    groups: int = 4
    crop_size: int = 64
    point_hidden: int = 64
    hidden: Tuple[int, ...] = (256, 128)
    scheme: AggregationScheme = AggregationScheme.FULL

    def __post_init__(self) -> None:
        self.widths = tuple(int(w) for w in self.widths)
        self.hidden = tuple(int(h) for h in self.hidden)
        self.scheme = AggregationScheme.parse(self.scheme)

    @property
    def feature_width(self) -> int:
        return self.widths[-1]

    @classmethod
    def from_config(cls, cfg, scheme) -> "ViewpointConfig":
        values = {k: v for k, v in vars(cfg).items() if k in cls.__dataclass_fields__}
        return cls(scheme=scheme, **values)

    def to_dict(self) -> dict:
        data = asdict(self)
        data["widths"] = list(self.widths)
        data["hidden"] = list(self.hidden)
        data["scheme"] = self.scheme.value
        return data

    @classmethod
    def from_dict(cls, data: dict) -> "ViewpointConfig":
        return cls(**data)

    def architecture_hash(self) -> str:
        arch = {"kind": "viewpoint", **self.to_dict()}
        return hashlib.sha256(json.dumps(arch, sort_keys=True).encode()).hexdigest()


class ImageEncoder(nn.Module):
    """Detector-style conv blocks followed by global average pooling."""

    def __init__(self, widths: Sequence[int], groups: int = 4, in_channels: int = 3) -> None:
        super().__init__()
        channels = [in_channels, *widths]
        self.blocks = nn.Sequential(*[
            ConvBlock(channels[i], channels[i + 1], groups) for i in range(len(widths))])

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.blocks(x).mean(dim=(2, 3))


class ShapeEncoder(nn.Module):
    """Per-point MLP with max pooling over points, PointNet style."""

    def __init__(self, hidden: int, width: int) -> None:
        super().__init__()
        self.point_mlp = nn.Sequential(nn.Linear(3, hidden), nn.ReLU(),
                                       nn.Linear(hidden, width), nn.ReLU())

    def forward(self, points: torch.Tensor) -> torch.Tensor:
        """(N, 3) -> (D,) or (B, N, 3) -> (B, D)."""
        if points.shape[-1] != 3:
            raise ShapeError(f"points must have 3 coordinates, got shape {tuple(points.shape)}")
        if points.shape[-2] < MIN_POINTS:
            raise ShapeError(
                f"shape encoder needs at least {MIN_POINTS} points, got {points.shape[-2]}")
        return self.point_mlp(points).max(dim=-2).values


class ViewpointPredictor(nn.Module):

    def __init__(self, width: int, scheme: AggregationScheme, hidden: Sequence[int]) -> None:
        super().__init__()
        self.scheme = AggregationScheme.parse(scheme)
        sizes = [self.scheme.output_width(width), *hidden]
        layers = []
        for i in range(len(hidden)):
            layers += [nn.Linear(sizes[i], sizes[i + 1]), nn.ReLU()]
        layers.append(nn.Linear(sizes[-1], len(ANGLES) * 2 * NUM_BINS))
        self.mlp = nn.Sequential(*layers)

    def forward(
        self,
        f_qry: torch.Tensor,
        f_cls: torch.Tensor
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        raw = self.mlp(aggregate(f_qry, f_cls, self.scheme))
        raw = raw.view(*raw.shape[:-1], len(ANGLES), 2 * NUM_BINS)
        return raw[..., :NUM_BINS], 0.5 * torch.tanh(raw[..., NUM_BINS:])


@dataclass
class ViewpointOutput:
    logits: torch.Tensor  # ... x 3 x 24
    offsets: torch.Tensor  # ... x 3 x 24, in [-0.5, 0.5]

    def __len__(self) -> int:
        return 1 if self.logits.dim() == 2 else self.logits.shape[0]

    def __getitem__(self, index) -> "ViewpointOutput":
        return ViewpointOutput(self.logits[index], self.offsets[index])


def viewpoint_decode(out: ViewpointOutput) -> Viewpoint:
    """Argmax bin per angle (lowest index on ties) refined by that bin's offset."""
    if out.logits.shape != (len(ANGLES), NUM_BINS):
        raise ShapeError(f"expected a single 3 x {NUM_BINS} output, got {tuple(out.logits.shape)}")
    logits = out.logits.detach().double().cpu().numpy()
    offsets = out.offsets.detach().double().cpu().numpy()

    codes = []
    for a in range(len(ANGLES)):
        bin_index = int(np.argmax(logits[a]))
        codes.append(AngleBinCode(bin_index, float(np.clip(offsets[a, bin_index], -0.5, 0.5))))
    return decode_angle_bins(codes)


def one_hot_output(
    v: Viewpoint,
    high: float = 50.0,
    dtype: torch.dtype = torch.float64
) -> ViewpointOutput:
    """Output that decodes to v: logit `high` at each true bin, exact offsets."""
    logits = torch.zeros(len(ANGLES), NUM_BINS, dtype=dtype)
    offsets = torch.zeros(len(ANGLES), NUM_BINS, dtype=dtype)
    for a, code in enumerate(encode_angle_bins(v)):
        logits[a, code.bin_index] = high
        offsets[a, code.bin_index] = code.offset
    return ViewpointOutput(logits, offsets)


def crop_and_resize(image: torch.Tensor, boxes: torch.Tensor, size: int) -> torch.Tensor:
    """(1, C, H, W) image and (B, 4) pixel boxes to (B, C, size, size) crops."""
    widths = boxes[:, 2] - boxes[:, 0]
    heights = boxes[:, 3] - boxes[:, 1]
    if bool(((widths <= 0) | (heights <= 0)).any()):
        raise DegenerateBoxError(f"cannot crop degenerate boxes {boxes.tolist()}")
    return roi_align(image, [boxes.to(image.dtype)], output_size=size,
                     spatial_scale=1.0, sampling_ratio=2, aligned=True)


def mesh_seed(model: ClassModel, seed: int) -> np.random.SeedSequence:
    """Sampling seed keyed on the mesh itself, independent of where it sits in a list."""
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(model.vertices, dtype=np.float64).tobytes())
    digest.update(np.ascontiguousarray(model.faces, dtype=np.int64).tobytes())
    return np.random.SeedSequence([seed, int.from_bytes(digest.digest()[:8], "little")])


def _boxes_tensor(boxes: Sequence[BoxLike], dtype: torch.dtype) -> torch.Tensor:
    rows = [b.as_list() if isinstance(b, BoundingBox) else list(b) for b in boxes]
    return torch.tensor(rows, dtype=dtype).reshape(-1, 4)


class FewShotViewpointNet(nn.Module):
    """Crop encoder and point-cloud encoder whose features are aggregated
    and decoded into 24-bin classification plus per-bin offsets."""

    def __init__(self, config: ViewpointConfig, class_ids: Sequence[int] = ()) -> None:
        super().__init__()
        self.config = config
        self.image_encoder = ImageEncoder(config.widths, config.groups)
        self.shape_encoder = ShapeEncoder(config.point_hidden, config.feature_width)
        self.predictor = ViewpointPredictor(config.feature_width, config.scheme, config.hidden)

        self.class_ids: List[int] = list(class_ids)
        self.class_features: Dict[int, torch.Tensor] = {}

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype

    @property
    def scheme(self) -> AggregationScheme:
        return self.config.scheme

    def set_classes(self, class_ids: Sequence[int]) -> None:
        self.class_ids = list(class_ids)

    def encode_query_crops(self, image: ImageLike, boxes: Sequence[BoxLike]) -> torch.Tensor:
        """(B, D) features of the boxed crops of one image."""
        x = image_to_tensor(image, self.dtype)
        if x.shape[1] != 3:
            raise ShapeError(f"query image needs 3 channels, got {x.shape[1]}")
        if len(boxes) == 0:
            return torch.zeros(0, self.config.feature_width, dtype=self.dtype)
        crops = crop_and_resize(x, _boxes_tensor(boxes, self.dtype), self.config.crop_size)
        return self.image_encoder(crops)

    def encode_query_crop(self, image: ImageLike, box: BoxLike) -> torch.Tensor:
        return self.encode_query_crops(image, [box])[0]

    def encode_shape(self, pc: Union[ShapePointCloud, np.ndarray, torch.Tensor]) -> torch.Tensor:
        points = pc.points if isinstance(pc, ShapePointCloud) else pc
        return self.shape_encoder(torch.as_tensor(points, dtype=self.dtype))

    def viewpoint_predict(self, f_qry: torch.Tensor, f_cls: torch.Tensor) -> ViewpointOutput:
        width = self.config.feature_width
        if f_qry.shape[-1] != width or f_cls.shape[-1] != width:
            raise ShapeError(
                f"predictor expects width {width}, got query {f_qry.shape[-1]} "
                f"and class {f_cls.shape[-1]}")
        return ViewpointOutput(*self.predictor(f_qry, f_cls))

    def build_class_shape_feature(
        self,
        shapes: Sequence[Union[ClassModel, ShapePointCloud]],
        n_points: int = 512,
        seed: int = 0
    ) -> torch.Tensor:
        """Mean encoding of every 3D model of one class; meshes are sampled first."""
        if len(shapes) == 0:
            raise EmptyClassError("no 3D models given for the class shape feature")
        clouds = [sample_point_cloud(s, n_points, mesh_seed(s, seed))
                  if isinstance(s, ClassModel) else s for s in shapes]
        return average_class_features([self.encode_shape(c) for c in clouds])

    @torch.no_grad()
    def estimate(
        self,
        image: ImageLike,
        boxes: Sequence[BoxLike],
        class_ids: Sequence[int],
        class_feats: Optional[Mapping[int, torch.Tensor]] = None
    ) -> List[Viewpoint]:
        """Viewpoint of each boxed object, conditioned on its own class only."""
        class_feats = self.class_features if class_feats is None else class_feats
        missing = sorted({c for c in class_ids if c not in class_feats})
        if missing:
            raise ConfigurationError(f"no class features for classes {missing}")
        if len(boxes) == 0:
            return []

        f_qry = self.encode_query_crops(image, boxes)
        f_cls = torch.stack([class_feats[c].to(self.dtype) for c in class_ids])
        out = self.viewpoint_predict(f_qry, f_cls)
        return [viewpoint_decode(out[i]) for i in range(len(boxes))]
