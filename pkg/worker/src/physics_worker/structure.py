"""Rendering of masked robot description files and parsing them back."""

from __future__ import annotations

import re

MASK_RE = re.compile(r"<MASKED:([A-Za-z_][A-Za-z0-9_]*)>")

# Default masked description of the three-segment crawler.
DEFAULT_TEMPLATE = """\
crawler:
  segments:
    - segment: { length: <MASKED:l1>, radius: <MASKED:r1> }
    - segment: { length: <MASKED:l2>, radius: <MASKED:r2> }
    - segment: { length: <MASKED:l3>, radius: <MASKED:r3> }
  material: { density: 1000.0 }
  actuators: [seg1, seg2, seg3]
"""


class UnresolvedMask(ValueError):
    """A masked slot has no value to substitute."""


def render_structure(template: str, values: dict[str, float]) -> str:
    """Replace every ``<MASKED:name>`` slot with its numeric value."""
    missing = []

    def sub(match):
        name = match.group(1)
        if name not in values:
            missing.append(name)
            return match.group(0)
        return repr(float(values[name]))

    rendered = MASK_RE.sub(sub, template)
    if missing:
        raise UnresolvedMask(f"no value for mask(s): {sorted(set(missing))}")
    return rendered


_SEGMENT_RE = re.compile(
    r"segment:\s*\{\s*length:\s*([0-9.eE+-]+)\s*,\s*radius:\s*([0-9.eE+-]+)\s*\}"
)


def parse_structure(document: str) -> dict[str, float]:
    """Read segment dimensions back out of a rendered description."""
    values: dict[str, float] = {}
    for i, m in enumerate(_SEGMENT_RE.finditer(document), start=1):
        values[f"l{i}"] = float(m.group(1))
        values[f"r{i}"] = float(m.group(2))
    if not values:
        raise ValueError("no segments found in structure document")
    return values
