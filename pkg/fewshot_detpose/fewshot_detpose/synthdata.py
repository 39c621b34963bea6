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
import multiprocessing
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import cv2
import numpy as np

from fewshot_detpose.exceptions import CapacityError
from fewshot_detpose.exceptions import EpisodeError
from fewshot_detpose.exceptions import InvalidArgumentError
from fewshot_detpose.exceptions import InvalidMeshError
from fewshot_detpose.exceptions import PlacementError
from fewshot_detpose.geometry import BoundingBox
from fewshot_detpose.geometry import Viewpoint
from fewshot_detpose.geometry import box_iou
from fewshot_detpose.geometry import euler_to_rotation
from fewshot_detpose.geometry import normalize_viewpoint


GENERATOR_VERSION = "1.0"

SeedLike = Union[int, np.random.SeedSequence]

NUM_VARIANTS = 3
AMBIENT = 0.35
DIFFUSE = 0.65
LIGHT_DIR = np.array([0.3, 0.5, 0.8]) / np.linalg.norm([0.3, 0.5, 0.8])
SUBPIXEL_SHIFT = 4

SPLITS = ("base_train", "support", "test")


#
# meshes
#
def _box(center: Sequence[float], size: Sequence[float]) -> Tuple[np.ndarray, np.ndarray]:
    corners = np.array([[i, j, k] for i in (-0.5, 0.5)
                        for j in (-0.5, 0.5) for k in (-0.5, 0.5)])
    vertices = np.asarray(center, dtype=np.float64) + corners * np.asarray(size)
    faces = np.array([[0, 1, 3], [0, 3, 2],
                      [4, 6, 7], [4, 7, 5],
                      [0, 4, 5], [0, 5, 1],
                      [2, 3, 7], [2, 7, 6],
                      [0, 2, 6], [0, 6, 4],
                      [1, 5, 7], [1, 7, 3]])
    return vertices, faces


def _extrude(profile: Sequence[Sequence[float]], depth: float) -> Tuple[np.ndarray, np.ndarray]:
    """Prism along z from a convex xy profile."""
    profile = np.asarray(profile, dtype=np.float64)
    n = len(profile)
    front = np.column_stack([profile, np.full(n, depth / 2)])
    back = np.column_stack([profile, np.full(n, -depth / 2)])
    vertices = np.vstack([front, back])

    faces = []
    for i in range(1, n - 1):
        faces.append([0, i, i + 1])
        faces.append([n, n + i + 1, n + i])
    for i in range(n):
        j = (i + 1) % n
        faces.append([i, j, n + j])
        faces.append([i, n + j, n + i])
    return vertices, np.array(faces)


def _pyramid(base: float, height: float) -> Tuple[np.ndarray, np.ndarray]:
    h = base / 2
    vertices = np.array([[-h, 0.0, -h], [h, 0.0, -h], [h, 0.0, h], [-h, 0.0, h],
                         [0.0, height, 0.0]])
    faces = np.array([[0, 1, 2], [0, 2, 3],
                      [0, 1, 4], [1, 2, 4], [2, 3, 4], [3, 0, 4]])
    return vertices, faces


def _union(*parts: Tuple[np.ndarray, np.ndarray]) -> Tuple[np.ndarray, np.ndarray]:
    vertices, faces, offset = [], [], 0
    for v, f in parts:
        vertices.append(v)
        faces.append(f + offset)
        offset += len(v)
    return np.vstack(vertices), np.vstack(faces)


def _bar():
    return _box((0.0, 0.0, 0.0), (1.0, 0.22, 0.22))


def _lshape():
    # unequal arms, no rotational symmetry
    return _union(_box((0.5, 0.125, 0.15), (1.0, 0.25, 0.3)),
                  _box((0.125, 0.55, 0.15), (0.25, 0.6, 0.3)))


def _wedge():
    return _extrude([(0.0, 0.0), (1.0, 0.0), (0.0, 0.55)], 0.5)


def _prism():
    angles = np.arange(6) * math.pi / 3
    return _extrude(np.column_stack([0.35 * np.cos(angles), 0.35 * np.sin(angles)]), 1.0)


def _chair():
    legs = [_box((x, 0.2, z), (0.08, 0.4, 0.08)) for x in (-0.26, 0.26) for z in (-0.26, 0.26)]
    return _union(_box((0.0, 0.46, 0.0), (0.6, 0.12, 0.6)),
                  _box((0.0, 0.82, -0.25), (0.6, 0.6, 0.1)),
                  *legs)


def _tshape():
    return _union(_box((0.0, 0.875, 0.0), (1.0, 0.25, 0.3)),
                  _box((0.0, 0.375, 0.0), (0.25, 0.75, 0.3)))


def _stairs():
    return _union(_box((0.5, 0.15, 0.0), (1.0, 0.3, 0.5)),
                  _box((0.33, 0.45, 0.0), (0.66, 0.3, 0.5)),
                  _box((0.165, 0.75, 0.0), (0.33, 0.3, 0.5)))


# name -> (builder, has a rotational symmetry)
FAMILIES = {
    "bar": (_bar, True),
    "lshape": (_lshape, False),
    "pyramid": (lambda: _pyramid(0.8, 0.9), True),
    "wedge": (_wedge, False),
    "prism": (_prism, True),
    "chair": (_chair, False),
    "tshape": (_tshape, True),
    "stairs": (_stairs, False),
}
FAMILY_NAMES = list(FAMILIES)


def normalize_mesh(vertices: np.ndarray) -> np.ndarray:
    """Center the bounding box at the origin and fit it in [-0.5, 0.5]^3."""
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    centered = vertices - (lo + hi) / 2
    extent = np.abs(centered).max()
    return np.clip(centered * (0.5 / extent), -0.5, 0.5)


def triangle_areas(vertices: np.ndarray, faces: np.ndarray) -> np.ndarray:
    tri = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)


@dataclass
class ClassModel:
    class_id: int
    name: str
    family: str
    vertices: np.ndarray
    faces: np.ndarray
    color: np.ndarray
    proportions: np.ndarray = field(default_factory=lambda: np.ones(3))
    symmetric: bool = False

    def to_dict(self) -> dict:
        return {
            "id": self.class_id,
            "name": self.name,
            "family": self.family,
            "symmetric": self.symmetric,
            "color": self.color.tolist(),
            "proportions": self.proportions.tolist(),
            "vertices": self.vertices.tolist(),
            "faces": self.faces.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ClassModel":
        return cls(class_id=int(data["id"]),
                   name=data["name"],
                   family=data["family"],
                   vertices=np.asarray(data["vertices"], dtype=np.float64),
                   faces=np.asarray(data["faces"], dtype=np.int64),
                   color=np.asarray(data["color"], dtype=np.float64),
                   proportions=np.asarray(data["proportions"], dtype=np.float64),
                   symmetric=bool(data["symmetric"]))

    def shape_variants(self, count: int, seed: SeedLike) -> List["ClassModel"]:
        """Proportion-jittered meshes of the same family, i.e. other 3D models of the class."""
        rng = np.random.default_rng(seed)
        builder, _ = FAMILIES[self.family]
        raw_vertices, faces = builder()

        variants = []
        for k in range(count):
            proportions = self.proportions * rng.uniform(0.85, 1.15, size=3)
            variants.append(ClassModel(
                class_id=self.class_id,
                name=f"{self.name}/{k}",
                family=self.family,
                vertices=normalize_mesh(raw_vertices * proportions),
                faces=faces.copy(),
                color=self.color.copy(),
                proportions=proportions,
                symmetric=self.symmetric))
        return variants


def _palette_color(index: int, total: int) -> np.ndarray:
    hsv = np.uint8([[[int(180 * index / total), 200, 230]]])
    return cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB)[0, 0].astype(np.float64) / 255.0


def generate_class_models(num_classes: int, seed: SeedLike) -> List[ClassModel]:
    capacity = len(FAMILIES) * NUM_VARIANTS
    if num_classes < 2:
        raise CapacityError(f"need at least 2 classes, got {num_classes}")
    if num_classes > capacity:
        raise CapacityError(
            f"{num_classes} classes requested but only {capacity} "
            f"({len(FAMILIES)} families x {NUM_VARIANTS} variants) available")

    rng = np.random.default_rng(seed)
    models = []
    for class_id in range(num_classes):
        family = FAMILY_NAMES[class_id % len(FAMILIES)]
        variant = class_id // len(FAMILIES)
        builder, symmetric = FAMILIES[family]

        raw_vertices, faces = builder()
        proportions = rng.uniform(0.8, 1.2, size=3)
        color_index = (class_id % len(FAMILIES)) * NUM_VARIANTS + variant

        models.append(ClassModel(
            class_id=class_id,
            name=f"{family}_{variant}",
            family=family,
            vertices=normalize_mesh(raw_vertices * proportions),
            faces=faces,
            color=_palette_color(color_index, capacity),
            proportions=proportions,
            symmetric=symmetric))
    return models


#
# scenes
#
@dataclass
class LayoutSpec:
    image_size: Tuple[int, int] = (96, 96)
    num_objects: Tuple[int, int] = (1, 3)
    scale_range: Tuple[float, float] = (26.0, 40.0)
    max_iou: float = 0.3
    max_tries: int = 50
    ele_range: Tuple[float, float] = (-30.0, 60.0)
    inp_range: Tuple[float, float] = (-20.0, 20.0)
    background: Tuple[float, float] = (0.35, 0.65)
    noise: float = 0.03
    class_ids: Optional[Tuple[int, ...]] = None

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "num_objects": list(self.num_objects),
            "scale_range": list(self.scale_range),
            "max_iou": self.max_iou,
            "max_tries": self.max_tries,
            "ele_range": list(self.ele_range),
            "inp_range": list(self.inp_range),
            "background": list(self.background),
            "noise": self.noise,
            "class_ids": None if self.class_ids is None else list(self.class_ids),
        }


@dataclass(frozen=True)
class ObjectAnnotation:
    cls: int
    box: BoundingBox
    viewpoint: Viewpoint

    def to_dict(self) -> dict:
        return {"cls": self.cls, "box": self.box.as_list(),
                "viewpoint": self.viewpoint.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "ObjectAnnotation":
        return cls(int(data["cls"]), BoundingBox.from_array(data["box"]),
                   Viewpoint.from_dict(data["viewpoint"]))


@dataclass
class SceneSample:
    image: np.ndarray  # H x W x 3, float32 in [0, 1]
    objects: List[ObjectAnnotation]
    image_id: str = ""

    @property
    def height(self) -> int:
        return self.image.shape[0]

    @property
    def width(self) -> int:
        return self.image.shape[1]


@dataclass(frozen=True)
class Placement:
    class_id: int
    viewpoint: Viewpoint
    scale: float
    center: Tuple[float, float]


def project_vertices(
    vertices: np.ndarray,
    viewpoint: Viewpoint,
    scale: float,
    center: Tuple[float, float]
) -> np.ndarray:
    """Orthographic projection, returns (V, 3) columns u, v and depth (larger is closer)."""
    cam = vertices @ euler_to_rotation(viewpoint).T
    u = center[0] + scale * cam[:, 0]
    v = center[1] - scale * cam[:, 1]
    return np.column_stack([u, v, cam[:, 2]])


def placement_box(model: ClassModel, placement: Placement) -> BoundingBox:
    uv = project_vertices(model.vertices, placement.viewpoint,
                          placement.scale, placement.center)
    return BoundingBox(float(uv[:, 0].min()), float(uv[:, 1].min()),
                       float(uv[:, 0].max()), float(uv[:, 1].max()))


def sample_viewpoint(rng: np.random.Generator, layout: LayoutSpec) -> Viewpoint:
    return normalize_viewpoint(Viewpoint(rng.uniform(0.0, 360.0),
                                         rng.uniform(*layout.ele_range),
                                         rng.uniform(*layout.inp_range)))


def sample_placements(
    models: Dict[int, ClassModel],
    layout: LayoutSpec,
    rng: np.random.Generator
) -> List[Placement]:
    height, width = layout.image_size
    class_ids = sorted(models) if layout.class_ids is None else list(layout.class_ids)
    count = int(rng.integers(layout.num_objects[0], layout.num_objects[1] + 1))

    placements: List[Placement] = []
    boxes: List[BoundingBox] = []
    for _ in range(count):
        for _ in range(layout.max_tries):
            class_id = int(rng.choice(class_ids))
            viewpoint = sample_viewpoint(rng, layout)
            scale = float(rng.uniform(*layout.scale_range))

            uv = project_vertices(models[class_id].vertices, viewpoint, scale, (0.0, 0.0))
            # one pixel margin keeps the box strictly inside the image
            lo_u, hi_u = 1.0 - uv[:, 0].min(), width - 1.0 - uv[:, 0].max()
            lo_v, hi_v = 1.0 - uv[:, 1].min(), height - 1.0 - uv[:, 1].max()
            if lo_u >= hi_u or lo_v >= hi_v:
                continue

            placement = Placement(class_id, viewpoint, scale,
                                  (float(rng.uniform(lo_u, hi_u)), float(rng.uniform(lo_v, hi_v))))
            box = placement_box(models[class_id], placement)
            if all(box_iou(box, other) <= layout.max_iou for other in boxes):
                placements.append(placement)
                boxes.append(box)
                break
        else:
            raise PlacementError(
                f"could not place object {len(placements) + 1}/{count} "
                f"within max IoU {layout.max_iou} after {layout.max_tries} tries")

    return placements


def rasterize(
    models: Dict[int, ClassModel],
    placements: Sequence[Placement],
    layout: LayoutSpec,
    rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Flat-shaded painter's rendering, returns an H x W x 3 uint8 RGB image."""
    height, width = layout.image_size
    rng = np.random.default_rng(0) if rng is None else rng

    grey = rng.uniform(*layout.background)
    noise = rng.normal(0.0, layout.noise, size=(height, width, 1)) if layout.noise > 0 else 0.0
    canvas = np.clip(np.round((grey + noise) * 255.0), 0, 255) * np.ones((height, width, 1))
    canvas = np.ascontiguousarray(np.repeat(canvas[..., :1], 3, axis=2).astype(np.uint8))

    for placement in placements:
        model = models[placement.class_id]
        uvd = project_vertices(model.vertices, placement.viewpoint,
                               placement.scale, placement.center)
        cam = model.vertices @ euler_to_rotation(placement.viewpoint).T

        tri = cam[model.faces]
        normals = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
        normals /= np.linalg.norm(normals, axis=1, keepdims=True) + 1e-12
        shade = AMBIENT + DIFFUSE * np.abs(normals @ LIGHT_DIR)
        depth = uvd[model.faces, 2].mean(axis=1)

        # cv2 puts pixel centers on integer coordinates
        points = np.round((uvd[:, :2] - 0.5) * (1 << SUBPIXEL_SHIFT)).astype(np.int32)
        for t in np.argsort(depth, kind="stable"):
            color = np.clip(np.round(model.color * shade[t] * 255.0), 0, 255)
            cv2.fillPoly(canvas, [points[model.faces[t]]],
                         tuple(int(c) for c in color),
                         lineType=cv2.LINE_8, shift=SUBPIXEL_SHIFT)

    return canvas


def render_scene(
    models: Sequence[ClassModel],
    layout: LayoutSpec,
    seed: SeedLike,
    image_id: str = ""
) -> SceneSample:
    rng = np.random.default_rng(seed)
    by_id = {model.class_id: model for model in models}

    placements = sample_placements(by_id, layout, rng)
    image = rasterize(by_id, placements, layout, rng)
    objects = [ObjectAnnotation(p.class_id, placement_box(by_id[p.class_id], p), p.viewpoint)
               for p in placements]

    return SceneSample(image=image.astype(np.float32) / 255.0, objects=objects,
                       image_id=image_id)


#
# class data
#
@dataclass
class ShapePointCloud:
    points: np.ndarray  # N x 3, canonical space
    class_id: int


def sample_point_cloud(model: ClassModel, n_points: int, seed: SeedLike) -> ShapePointCloud:
    if n_points < 1:
        raise InvalidArgumentError(f"n_points must be >= 1, got {n_points}")

    areas = triangle_areas(model.vertices, model.faces)
    total = areas.sum()
    if not total > 0.0:
        raise InvalidMeshError(f"mesh of class {model.class_id} has zero surface area")

    rng = np.random.default_rng(seed)
    tri_index = rng.choice(len(areas), size=n_points, p=areas / total)
    r1 = np.sqrt(rng.random(n_points))[:, None]
    r2 = rng.random(n_points)[:, None]

    tri = model.vertices[model.faces[tri_index]]
    points = (1.0 - r1) * tri[:, 0] + r1 * (1.0 - r2) * tri[:, 1] + r1 * r2 * tri[:, 2]
    return ShapePointCloud(points=np.clip(points, -0.5, 0.5), class_id=model.class_id)


@dataclass
class DetectionClassData:
    image_with_mask: np.ndarray  # H x W x 4, RGB plus box mask
    class_id: int
    box: BoundingBox


def build_detection_class_data(sample: SceneSample, object_index: int) -> DetectionClassData:
    if not 0 <= object_index < len(sample.objects):
        raise IndexError(
            f"object index {object_index} out of range for scene "
            f"'{sample.image_id}' with {len(sample.objects)} objects")

    annotation = sample.objects[object_index]
    x1, y1, x2, y2 = annotation.box.pixel_bounds(sample.width, sample.height)

    mask = np.zeros((sample.height, sample.width, 1), dtype=sample.image.dtype)
    mask[y1:y2, x1:x2] = 1.0
    return DetectionClassData(np.concatenate([sample.image, mask], axis=2),
                              annotation.cls, annotation.box)


#
# dataset and episodes
#
@dataclass
class SyntheticDataset:
    models: List[ClassModel]
    splits: Dict[str, List[SceneSample]]
    shapes: Dict[int, List[ShapePointCloud]]
    manifest: dict = field(default_factory=dict)

    @property
    def class_names(self) -> Dict[int, str]:
        return {m.class_id: m.name for m in self.models}

    def model(self, class_id: int) -> ClassModel:
        for model in self.models:
            if model.class_id == class_id:
                return model
        raise KeyError(class_id)

    def instances(self, split: str, class_id: int) -> List["InstanceRef"]:
        return [InstanceRef(split, s, o)
                for s, scene in enumerate(self.splits.get(split, []))
                for o, obj in enumerate(scene.objects) if obj.cls == class_id]

    def scene(self, ref: Union["InstanceRef", "EpisodeItem"]) -> SceneSample:
        return self.splits[ref.split][ref.scene_index]


def _render_job(args) -> SceneSample:
    models, layout, seed, image_id = args
    return render_scene(models, layout, seed, image_id)


def generate_split(
    models: Sequence[ClassModel],
    layout: LayoutSpec,
    seed: np.random.SeedSequence,
    count: int,
    split: str,
    pool=None
) -> List[SceneSample]:
    """Render `count` scenes; each scene owns a child seed so worker order does not matter."""
    jobs = [(list(models), layout, child, f"{split}_{i:06d}")
            for i, child in enumerate(seed.spawn(count))]
    if pool is None:
        return [_render_job(job) for job in jobs]
    return list(pool.map(_render_job, jobs))


def generate_class_shapes(
    models: Sequence[ClassModel],
    variants_range: Tuple[int, int],
    n_points: int,
    seed: np.random.SeedSequence
) -> Dict[int, List[ShapePointCloud]]:
    shapes = {}
    for model, child in zip(models, seed.spawn(len(models))):
        variant_seed, count_seed, point_seed = child.spawn(3)
        count = int(np.random.default_rng(count_seed).integers(
            variants_range[0], variants_range[1] + 1))
        variants = model.shape_variants(count, variant_seed)
        shapes[model.class_id] = [sample_point_cloud(v, n_points, s)
                                  for v, s in zip(variants, point_seed.spawn(count))]
    return shapes


@dataclass(frozen=True)
class EpisodeSpec:
    base_classes: Tuple[int, ...]
    novel_classes: Tuple[int, ...]
    shots: int = 10
    seed: int = 0

    def __post_init__(self) -> None:
        overlap = set(self.base_classes) & set(self.novel_classes)
        if overlap:
            raise EpisodeError(f"classes {sorted(overlap)} are both base and novel")
        if self.shots < 1:
            raise EpisodeError(f"shots must be >= 1, got {self.shots}")


@dataclass(frozen=True)
class InstanceRef:
    split: str
    scene_index: int
    object_index: int


@dataclass(frozen=True)
class EpisodeItem:
    split: str
    scene_index: int
    object_indices: Tuple[int, ...]


@dataclass
class Episode:
    phase: str
    task: str
    classes: List[int]
    items: List[EpisodeItem]
    class_pools: Dict[int, list]
    audit: Dict[int, List[InstanceRef]]

    def instance_counts(self) -> Dict[int, int]:
        return {c: len(refs) for c, refs in self.audit.items()}


def _class_name(dataset: SyntheticDataset, class_id: int) -> str:
    try:
        return dataset.model(class_id).name
    except KeyError:
        return str(class_id)


def build_episode(
    dataset: SyntheticDataset,
    spec: EpisodeSpec,
    phase: str,
    task: str = "detection",
    pool_size: int = 50
) -> Episode:
    """Training episode of one phase.

    base: every base_train scene free of novel objects, and per base class a
    pool of `pool_size` class-data instances (detection) or all its point
    clouds (viewpoint).
    finetune: exactly K support instances per base and novel class, the
    detection pool of each class being those K instances.
    """
    if phase not in ("base", "finetune"):
        raise EpisodeError(f"unknown phase '{phase}'")
    if task not in ("detection", "viewpoint"):
        raise EpisodeError(f"unknown task '{task}'")

    rng = np.random.default_rng(spec.seed)
    novel = set(spec.novel_classes)

    if phase == "base":
        classes = sorted(spec.base_classes)
        split = "base_train"
        scenes = dataset.splits.get(split, [])
        clean = [s for s, scene in enumerate(scenes)
                 if not any(obj.cls in novel for obj in scene.objects)]

        items, audit = [], {c: [] for c in classes}
        for s in clean:
            indices = tuple(o for o, obj in enumerate(scenes[s].objects) if obj.cls in audit)
            if not indices:
                continue
            for o in indices:
                audit[scenes[s].objects[o].cls].append(InstanceRef(split, s, o))
            if task == "detection":
                items.append(EpisodeItem(split, s, indices))
            else:
                items.extend(EpisodeItem(split, s, (o,)) for o in indices)

        pools = {}
        for c in classes:
            if not audit[c]:
                raise EpisodeError(
                    f"class '{_class_name(dataset, c)}' has no base-phase instances")
            if task == "detection":
                order = rng.permutation(len(audit[c]))[:pool_size]
                pools[c] = [audit[c][i] for i in order]

    else:
        classes = sorted(set(spec.base_classes) | novel)
        split = "support"
        items, audit, pools = [], {}, {}
        for c in classes:
            candidates = dataset.instances(split, c)
            if len(candidates) < spec.shots:
                raise EpisodeError(
                    f"class '{_class_name(dataset, c)}' has {len(candidates)} support "
                    f"instances, {spec.shots} shots requested")
            chosen = [candidates[i] for i in rng.choice(len(candidates), spec.shots,
                                                        replace=False)]
            audit[c] = chosen
            items.extend(EpisodeItem(r.split, r.scene_index, (r.object_index,)) for r in chosen)
            if task == "detection":
                pools[c] = list(chosen)

    if task == "viewpoint":
        for c in classes:
            if not dataset.shapes.get(c):
                raise EpisodeError(f"class '{_class_name(dataset, c)}' has no 3D models")
            pools[c] = list(dataset.shapes[c])

    return Episode(phase=phase, task=task, classes=classes, items=items,
                   class_pools=pools, audit=audit)


def generate_dataset(
    num_classes: int,
    layouts: Dict[str, Tuple[LayoutSpec, int]],
    shape_variants: Tuple[int, int] = (2, 5),
    points_per_shape: int = 512,
    seed: int = 0,
    workers: int = 1
) -> SyntheticDataset:
    """Class models, every split in `layouts` ({split: (layout, scene count)}) and class shapes.

    All randomness derives from `seed`; `workers` only changes speed.
    """
    root = np.random.SeedSequence(seed)
    model_seed, shape_seed, split_root = root.spawn(3)
    models = generate_class_models(num_classes, model_seed)

    for name, (layout, _) in layouts.items():
        unknown = set(layout.class_ids or ()) - {m.class_id for m in models}
        if unknown:
            raise CapacityError(f"split '{name}' references unknown classes {sorted(unknown)}")

    split_seeds = dict(zip(SPLITS, split_root.spawn(len(SPLITS))))
    splits = {}
    pool = multiprocessing.Pool(workers) if workers > 1 else None
    try:
        for name, (layout, count) in layouts.items():
            if name not in split_seeds:
                raise InvalidArgumentError(f"unknown split '{name}', expected one of {SPLITS}")
            splits[name] = generate_split(models, layout, split_seeds[name], count, name, pool)
    finally:
        if pool is not None:
            pool.close()
            pool.join()

    shapes = generate_class_shapes(models, shape_variants, points_per_shape, shape_seed)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": seed,
        "num_classes": num_classes,
        "shape_variants": list(shape_variants),
        "points_per_shape": points_per_shape,
        "splits": {name: {"scenes": count, "layout": layout.to_dict()}
                   for name, (layout, count) in layouts.items()},
    }
    return SyntheticDataset(models=models, splits=splits, shapes=shapes, manifest=manifest)
