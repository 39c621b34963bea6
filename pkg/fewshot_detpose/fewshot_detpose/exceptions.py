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


class FewShotError(Exception):
    """Base class of every error raised by fewshot_detpose."""


class InvalidArgumentError(FewShotError, ValueError):
    pass


class InvalidCodeError(FewShotError, ValueError):
    pass


class DegenerateBoxError(FewShotError, ValueError):
    pass


class CapacityError(FewShotError, ValueError):
    pass


class PlacementError(FewShotError, RuntimeError):
    pass


class InvalidMeshError(FewShotError, ValueError):
    pass


class EpisodeError(FewShotError, ValueError):
    pass


class ShapeError(FewShotError, ValueError):
    pass


class EmptyClassError(FewShotError, ValueError):
    pass


class ConfigurationError(FewShotError, KeyError):

    def __str__(self) -> str:
        # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class DivergenceError(FewShotError, RuntimeError):
    pass


class ImageReadError(FewShotError, OSError):
    pass
