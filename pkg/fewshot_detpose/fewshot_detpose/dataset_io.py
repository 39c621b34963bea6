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
from pathlib import Path
from typing import Dict, List, Union

import cv2
import numpy as np

from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.exceptions import ImageReadError
from fewshot_detpose.synthdata import ClassModel
from fewshot_detpose.synthdata import ObjectAnnotation
from fewshot_detpose.synthdata import SceneSample
from fewshot_detpose.synthdata import ShapePointCloud
from fewshot_detpose.synthdata import SyntheticDataset


MANIFEST_NAME = "manifest.json"
CLASSES_NAME = "classes.json"
RUN_NAME = "run.json"

PathLike = Union[str, Path]


def file_sha256(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def content_hash(files: Dict[str, str]) -> str:
    """Hash over the sorted (relative path, file hash) pairs."""
    digest = hashlib.sha256()
    for name in sorted(files):
        digest.update(f"{name}:{files[name]}\n".encode())
    return digest.hexdigest()


def write_json(path: PathLike, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(data, f, indent=2, sort_keys=True)
        f.write("\n")


def read_json(path: PathLike):
    with open(path) as f:
        return json.load(f)


def write_image(path: PathLike, image: np.ndarray) -> None:
    """RGB float image in [0, 1] or uint8, written as PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
        raise OSError(f"could not write image '{path}'")


def read_image(path: PathLike) -> np.ndarray:
    """PNG to an RGB float32 image in [0, 1]."""
    image = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if image is None:
        raise ImageReadError(f"could not read image '{path}'")
    return cv2.cvtColor(image, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_xyz(path: PathLike, points: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savetxt(path, points, fmt="%.17g")


def read_xyz(path: PathLike) -> np.ndarray:
    return np.loadtxt(path, dtype=np.float64, ndmin=2)


def class_registry(models: List[ClassModel]) -> List[dict]:
    return [{"id": m.class_id, "name": m.name, "family": m.family, "symmetric": m.symmetric}
            for m in models]


def save_dataset(dataset: SyntheticDataset, out_dir: PathLike) -> dict:
    """Write the dataset directory and return its manifest.

    Layout:
        classes.json                   class registry with meshes and colours
        annotations/<split>.json       {"classes": [...], "images": [...]}
        images/<split>/<image id>.png
        shapes/<class id>/<k>.xyz
        manifest.json                  generator parameters and sha256 of every file
    """
    out_dir = Path(out_dir)
    registry = class_registry(dataset.models)

    write_json(out_dir / CLASSES_NAME, [m.to_dict() for m in dataset.models])

    for split, scenes in dataset.splits.items():
        images = []
        for scene in scenes:
            file_name = f"images/{split}/{scene.image_id}.png"
            write_image(out_dir / file_name, scene.image)
            images.append({
                "id": scene.image_id,
                "file": file_name,
                "height": scene.height,
                "width": scene.width,
                "objects": [obj.to_dict() for obj in scene.objects],
            })
        write_json(out_dir / "annotations" / f"{split}.json",
                   {"classes": registry, "images": images})

    for class_id, clouds in dataset.shapes.items():
        for k, cloud in enumerate(clouds):
            write_xyz(out_dir / "shapes" / str(class_id) / f"{k}.xyz", cloud.points)

    skip = (MANIFEST_NAME, RUN_NAME)
    files = {str(p.relative_to(out_dir)): file_sha256(p)
             for p in sorted(out_dir.rglob("*")) if p.is_file() and p.name not in skip}
    manifest = dict(dataset.manifest)
    manifest.update({
        "classes": registry,
        "files": files,
        "dataset_hash": content_hash(files),
    })
    write_json(out_dir / MANIFEST_NAME, manifest)
    dataset.manifest = manifest
    return manifest


def verify_dataset(out_dir: PathLike) -> List[str]:
    """Files whose content no longer matches the manifest (missing files included)."""
    out_dir = Path(out_dir)
    manifest = read_json(out_dir / MANIFEST_NAME)

    mismatched = []
    for name, expected in manifest["files"].items():
        path = out_dir / name
        if not path.is_file() or file_sha256(path) != expected:
            mismatched.append(name)
    return mismatched


def load_dataset(data_dir: PathLike) -> SyntheticDataset:
    data_dir = Path(data_dir)
    if not (data_dir / MANIFEST_NAME).is_file():
        raise ConfigurationError(f"'{data_dir}' is not a dataset directory (no {MANIFEST_NAME})")

    manifest = read_json(data_dir / MANIFEST_NAME)
    models = [ClassModel.from_dict(d) for d in read_json(data_dir / CLASSES_NAME)]

    splits = {}
    for split in manifest["splits"]:
        annotations = read_json(data_dir / "annotations" / f"{split}.json")
        splits[split] = [
            SceneSample(image=read_image(data_dir / entry["file"]),
                        objects=[ObjectAnnotation.from_dict(o) for o in entry["objects"]],
                        image_id=entry["id"])
            for entry in annotations["images"]]

    shapes = {}
    for model in models:
        class_dir = data_dir / "shapes" / str(model.class_id)
        files = sorted(class_dir.glob("*.xyz"), key=lambda p: int(p.stem))
        shapes[model.class_id] = [ShapePointCloud(read_xyz(p), model.class_id) for p in files]

    return SyntheticDataset(models=models, splits=splits, shapes=shapes, manifest=manifest)
