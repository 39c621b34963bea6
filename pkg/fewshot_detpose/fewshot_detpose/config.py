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


import copy
from pathlib import Path
from typing import Any, Dict, Optional, Union

from ultralytics.utils import IterableSimpleNamespace
from ultralytics.utils import yaml_load

from fewshot_detpose.exceptions import ConfigurationError


DEFAULT_CFG_PATH = Path(__file__).resolve().parent / "cfg" / "default.yaml"


def load_default_config() -> Dict[str, Any]:
    return yaml_load(DEFAULT_CFG_PATH)


def _check_type(path: str, default: Any, value: Any) -> Any:
    if default is None or value is None:
        return value

    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigurationError(f"'{path}' expects a boolean, got {value!r}")
        return value

    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigurationError(f"'{path}' expects a number, got {value!r}")
        return float(value)

    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigurationError(f"'{path}' expects an integer, got {value!r}")
        return value

    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigurationError(f"'{path}' expects a string, got {value!r}")
        return value

    if isinstance(default, (list, tuple)):
        if not isinstance(value, (list, tuple)):
            raise ConfigurationError(f"'{path}' expects a list, got {value!r}")
        return list(value)

    return value


def merge_config(
    defaults: Dict[str, Any],
    user: Dict[str, Any],
    prefix: str = ""
) -> Dict[str, Any]:
    """Merge user values over defaults; unknown keys are rejected."""
    merged = copy.deepcopy(defaults)

    for key, value in (user or {}).items():
        path = f"{prefix}{key}"
        if key not in defaults:
            raise ConfigurationError(f"unknown config key '{path}'")

        default = defaults[key]
        if isinstance(default, dict):
            if not isinstance(value, dict):
                raise ConfigurationError(f"'{path}' expects a mapping, got {value!r}")
            merged[key] = merge_config(default, value, prefix=f"{path}.")
        else:
            merged[key] = _check_type(path, default, value)

    return merged


def apply_overrides(
    config: Dict[str, Any],
    overrides: Optional[Dict[str, Any]]
) -> Dict[str, Any]:
    """Apply dotted-path overrides such as {'train.detection.base.lr': 0.01}."""
    config = copy.deepcopy(config)

    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = config
        keys = dotted.split(".")
        for key in keys[:-1]:
            if not isinstance(node.get(key), dict):
                raise ConfigurationError(f"unknown config key '{dotted}'")
            node = node[key]
        if keys[-1] not in node:
            raise ConfigurationError(f"unknown config key '{dotted}'")
        node[keys[-1]] = _check_type(dotted, node[keys[-1]], value)

    return config


def to_namespace(data: Any) -> Any:
    if isinstance(data, dict):
        return IterableSimpleNamespace(**{k: to_namespace(v) for k, v in data.items()})
    if isinstance(data, list):
        return [to_namespace(v) for v in data]
    return data


def to_dict(namespace: Any) -> Any:
    if isinstance(namespace, IterableSimpleNamespace):
        return {k: to_dict(v) for k, v in vars(namespace).items()}
    if isinstance(namespace, list):
        return [to_dict(v) for v in namespace]
    return namespace


def load_run_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None
) -> IterableSimpleNamespace:
    """Validated run config: defaults, then the YAML file, then overrides."""
    config = load_default_config()

    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError(f"config file '{path}' not found")
        user = yaml_load(path) or {}
        if not isinstance(user, dict):
            raise ConfigurationError(f"config file '{path}' is not a mapping")
        config = merge_config(config, user)

    config = apply_overrides(config, overrides)
    return to_namespace(config)
