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


from enum import Enum
from typing import Sequence, Union

import torch

from fewshot_detpose.exceptions import EmptyClassError
from fewshot_detpose.exceptions import InvalidArgumentError
from fewshot_detpose.exceptions import ShapeError


class AggregationScheme(str, Enum):
    """How query features f and class features g are combined."""

    RW = "rw"              # f*g
    RW_Q = "rw_q"          # [f*g, f]
    RW_Q_C = "rw_q_c"      # [f*g, f, g]
    RW_DIFF = "rw_diff"    # [f*g, f-g]
    FULL = "full"          # [f*g, f-g, f]

    @property
    def width_multiple(self) -> int:
        return _WIDTH_MULTIPLE[self]

    def output_width(self, width: int) -> int:
        return self.width_multiple * width

    @classmethod
    def parse(cls, value: Union[str, "AggregationScheme"]) -> "AggregationScheme":
        try:
            return cls(value.lower() if isinstance(value, str) else value)
        except ValueError:
            names = ", ".join(s.value for s in cls)
            raise InvalidArgumentError(
                f"unknown aggregation scheme '{value}', expected one of {names}") from None


_WIDTH_MULTIPLE = {
    AggregationScheme.RW: 1,
    AggregationScheme.RW_Q: 2,
    AggregationScheme.RW_Q_C: 3,
    AggregationScheme.RW_DIFF: 2,
    AggregationScheme.FULL: 3,
}


def aggregate(
    f_qry: torch.Tensor,
    f_cls: torch.Tensor,
    scheme: Union[str, AggregationScheme] = AggregationScheme.FULL
) -> torch.Tensor:
    """Combine query and class features along the last dimension.

    Leading dimensions broadcast, e.g. (R, 1, D) RoI features against
    (1, C, D) class features give (R, C, m*D).
    """
    scheme = AggregationScheme.parse(scheme)
    if f_qry.shape[-1] != f_cls.shape[-1]:
        raise ShapeError(
            f"query width {f_qry.shape[-1]} does not match class width {f_cls.shape[-1]}")

    f_qry, f_cls = torch.broadcast_tensors(f_qry, f_cls)
    product = f_qry * f_cls

    if scheme is AggregationScheme.RW:
        return product
    if scheme is AggregationScheme.RW_Q:
        return torch.cat([product, f_qry], dim=-1)
    if scheme is AggregationScheme.RW_Q_C:
        return torch.cat([product, f_qry, f_cls], dim=-1)
    if scheme is AggregationScheme.RW_DIFF:
        return torch.cat([product, f_qry - f_cls], dim=-1)
    return torch.cat([product, f_qry - f_cls, f_qry], dim=-1)


def average_class_features(features: Union[Sequence[torch.Tensor], torch.Tensor]) -> torch.Tensor:
    """Elementwise mean of class features.

    Values are sorted per coordinate before summing so any ordering of the
    inputs gives bitwise the same result.
    """
    if len(features) == 0:
        raise EmptyClassError("cannot average an empty list of class features")

    if not isinstance(features, torch.Tensor):
        widths = {tuple(f.shape) for f in features}
        if len(widths) != 1:
            raise ShapeError(f"class features have mixed shapes {sorted(widths)}")
    stacked = features if isinstance(features, torch.Tensor) else torch.stack(list(features))
    if stacked.dim() != 2:
        raise ShapeError(f"expected K x D class features, got shape {tuple(stacked.shape)}")

    ordered, _ = torch.sort(stacked, dim=0)
    return ordered.sum(dim=0) / stacked.shape[0]
