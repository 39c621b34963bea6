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


from pathlib import Path

import pytest


ROOT = Path(__file__).resolve().parents[1]
HEADER = (ROOT / "test" / "test_copyright.py").read_text().split("\n\n\n")[0]


@pytest.mark.copyright
@pytest.mark.linter
def test_copyright():
    sources = sorted((ROOT / "fewshot_detpose").rglob("*.py"))
    sources += sorted((ROOT / "test").glob("*.py"))
    missing = [str(p.relative_to(ROOT)) for p in sources
               if p.read_text().strip() and not p.read_text().startswith(HEADER)]
    assert not missing, 'Found files without the license header:\n' + '\n'.join(missing)
