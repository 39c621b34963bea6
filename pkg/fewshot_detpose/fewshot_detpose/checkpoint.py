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
from pathlib import Path
from typing import List, Optional, Tuple, Union

import torch

import fewshot_detpose
from fewshot_detpose.dataset_io import read_json
from fewshot_detpose.dataset_io import write_json
from fewshot_detpose.detector import DetectorConfig
from fewshot_detpose.detector import FewShotDetector
from fewshot_detpose.exceptions import ConfigurationError
from fewshot_detpose.viewpoint import FewShotViewpointNet
from fewshot_detpose.viewpoint import ViewpointConfig


PARAMS_NAME = "params.pt"
MANIFEST_NAME = "manifest.json"

Model = Union[FewShotDetector, FewShotViewpointNet]


def code_version() -> str:
    """Package version plus a short hash of the package sources, e.g. 0.1.0+g1a2b3c4d."""
    digest = hashlib.sha1()
    root = Path(fewshot_detpose.__file__).resolve().parent
    for path in sorted(root.rglob("*.py")):
        digest.update(path.relative_to(root).as_posix().encode())
        digest.update(path.read_bytes())
    return f"{fewshot_detpose.__version__}+g{digest.hexdigest()[:8]}"


def model_task(model: Model) -> str:
    return "detection" if isinstance(model, FewShotDetector) else "viewpoint"


def save_checkpoint(
    model: Model,
    out_dir: Union[str, Path],
    phase: str,
    class_registry: List[dict],
    dataset_hash: Optional[str] = None,
    extra: Optional[dict] = None
) -> dict:
    """Write params.pt (named parameter arrays) and manifest.json."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    torch.save({"state_dict": model.state_dict(),
                "class_features": {int(c): f.detach().clone()
                                   for c, f in model.class_features.items()}},
               out_dir / PARAMS_NAME)

    manifest = {
        "task": model_task(model),
        "phase": phase,
        "architecture": model.config.to_dict(),
        "architecture_hash": model.config.architecture_hash(),
        "scheme": model.scheme.value,
        "class_registry": class_registry,
        "class_ids": list(model.class_ids),
        "class_features": {str(c): f.detach().double().cpu().tolist()
                           for c, f in model.class_features.items()},
        "dataset_hash": dataset_hash,
        "code_version": code_version(),
        "parameters": {name: list(p.shape) for name, p in model.state_dict().items()},
    }
    manifest.update(extra or {})
    write_json(out_dir / MANIFEST_NAME, manifest)
    return manifest


def build_model(manifest: dict) -> Model:
    if manifest["task"] == "detection":
        config = DetectorConfig.from_dict(manifest["architecture"])
        model = FewShotDetector(config, manifest["class_ids"])
    else:
        config = ViewpointConfig.from_dict(manifest["architecture"])
        model = FewShotViewpointNet(config, manifest["class_ids"])

    if config.architecture_hash() != manifest["architecture_hash"]:
        raise ConfigurationError("checkpoint architecture hash does not match its architecture")
    return model


def load_checkpoint(
    ckpt_dir: Union[str, Path],
    task: Optional[str] = None
) -> Tuple[Model, dict]:
    ckpt_dir = Path(ckpt_dir)
    if not (ckpt_dir / MANIFEST_NAME).is_file():
        raise ConfigurationError(f"'{ckpt_dir}' is not a checkpoint (no {MANIFEST_NAME})")

    manifest = read_json(ckpt_dir / MANIFEST_NAME)
    if task is not None and manifest["task"] != task:
        raise ConfigurationError(
            f"checkpoint '{ckpt_dir}' is a {manifest['task']} model, {task} expected")

    model = build_model(manifest)
    archive = torch.load(ckpt_dir / PARAMS_NAME, map_location="cpu")
    model.load_state_dict(archive["state_dict"])
    model.class_features = dict(archive["class_features"])
    model.eval()
    return model, manifest


def registry_diff(expected: List[dict], actual: List[dict]) -> List[str]:
    """Human readable differences between two class registries."""
    before = {c["id"]: c["name"] for c in expected}
    after = {c["id"]: c["name"] for c in actual}
    diff = []
    for class_id in sorted(set(before) | set(after)):
        if class_id not in after:
            diff.append(f"- {class_id}: {before[class_id]}")
        elif class_id not in before:
            diff.append(f"+ {class_id}: {after[class_id]}")
        elif before[class_id] != after[class_id]:
            diff.append(f"~ {class_id}: {before[class_id]} -> {after[class_id]}")
    return diff


def check_registry(manifest: dict, class_registry: List[dict]) -> None:
    diff = registry_diff(manifest["class_registry"], class_registry)
    if diff:
        raise ConfigurationError(
            "class registry of the checkpoint does not match the dataset:\n" + "\n".join(diff))
