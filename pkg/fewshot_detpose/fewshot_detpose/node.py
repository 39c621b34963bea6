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


import logging
from typing import Any, Dict, Optional

from ultralytics.utils import set_logging

from fewshot_detpose.exceptions import ConfigurationError


LOGGING_NAME = "fewshot_detpose"


def set_verbosity(verbose: bool = True) -> None:
    set_logging(LOGGING_NAME, verbose=verbose)


class Parameter:

    def __init__(self, name: str, value: Any) -> None:
        self.name = name
        self.value = value

    def __repr__(self) -> str:
        return f"Parameter({self.name}={self.value!r})"


class Node:
    """Named component with declared parameters and its own logger.

    Parameters are declared with a default (usually taken from the run
    config) and can be overridden at construction time, e.g. by CLI flags.
    """

    def __init__(
        self,
        node_name: str,
        parameter_overrides: Optional[Dict[str, Any]] = None
    ) -> None:
        self._node_name = node_name
        self._parameters: Dict[str, Parameter] = {}
        self._overrides = {
            k: v for k, v in (parameter_overrides or {}).items() if v is not None}

    def get_name(self) -> str:
        return self._node_name

    def get_logger(self) -> logging.Logger:
        return logging.getLogger(f"{LOGGING_NAME}.{self._node_name}")

    def declare_parameter(self, name: str, default_value: Any) -> Parameter:
        value = self._overrides.get(name, default_value)
        self._parameters[name] = Parameter(name, value)
        return self._parameters[name]

    def get_parameter(self, name: str) -> Parameter:
        if name not in self._parameters:
            raise ConfigurationError(
                f"parameter '{name}' not declared by node '{self._node_name}'")
        return self._parameters[name]

    def get_parameters(self) -> Dict[str, Any]:
        return {name: p.value for name, p in self._parameters.items()}
