"""Class / category / palette tables.

On disk a table is CSV with the header ``id,name,category,r,g,b,ignore``
and one row per class, ids ``0..K-1`` in order. ``#`` lines are comments.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .errors import FormatError

HEADER = ["id", "name", "category", "r", "g", "b", "ignore"]

# 19 Cityscapes training classes followed by the ignore class.
CITYSCAPES = [
    ("road", "flat", (128, 64, 128)),
    ("sidewalk", "flat", (244, 35, 232)),
    ("building", "construction", (70, 70, 70)),
    ("wall", "construction", (102, 102, 156)),
    ("fence", "construction", (190, 153, 153)),
    ("pole", "object", (153, 153, 153)),
    ("traffic light", "object", (250, 170, 30)),
    ("traffic sign", "object", (220, 220, 0)),
    ("vegetation", "nature", (107, 142, 35)),
    ("terrain", "nature", (152, 251, 152)),
    ("sky", "sky", (70, 130, 180)),
    ("person", "human", (220, 20, 60)),
    ("rider", "human", (255, 0, 0)),
    ("car", "vehicle", (0, 0, 142)),
    ("truck", "vehicle", (0, 0, 70)),
    ("bus", "vehicle", (0, 60, 100)),
    ("train", "vehicle", (0, 80, 100)),
    ("motorcycle", "vehicle", (0, 0, 230)),
    ("bicycle", "vehicle", (119, 11, 32)),
]


@dataclass(frozen=True)
class ClassInfo:
    id: int
    name: str
    category: str
    rgb: Tuple[int, int, int]
    ignore: bool = False


@dataclass
class ClassTable:
    classes: List[ClassInfo]

    def __post_init__(self):
        if not self.classes:
            raise FormatError("class table is empty")
        for i, c in enumerate(self.classes):
            if c.id != i:
                raise FormatError(f"class ids must be 0..K-1 in order; row {i} has id {c.id}")
        if sum(c.ignore for c in self.classes) > 1:
            raise FormatError("at most one class may be flagged ignore")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def ignore_index(self) -> Optional[int]:
        for c in self.classes:
            if c.ignore:
                return c.id
        return None

    @property
    def valid_ids(self) -> List[int]:
        return [c.id for c in self.classes if not c.ignore]

    @property
    def names(self) -> List[str]:
        return [c.name for c in self.classes]

    @property
    def palette(self) -> List[Tuple[int, int, int]]:
        return [c.rgb for c in self.classes]

    def category_map(self) -> Dict[int, str]:
        return {c.id: c.category for c in self.classes if not c.ignore}

    def to_text(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(HEADER)
        for c in self.classes:
            w.writerow([c.id, c.name, c.category, *c.rgb, int(c.ignore)])
        return buf.getvalue()

    def save(self, path):
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str, source: str = "<text>") -> "ClassTable":
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        rows = list(csv.reader(lines))
        if not rows or [h.strip() for h in rows[0]] != HEADER:
            raise FormatError(f"{source}: class table must start with header {','.join(HEADER)}")
        classes = []
        for lineno, row in enumerate(rows[1:], start=2):
            if len(row) != len(HEADER):
                raise FormatError(f"{source}: row {lineno} has {len(row)} fields, expected {len(HEADER)}")
            try:
                cid, r, g, b, ign = (int(row[i]) for i in (0, 3, 4, 5, 6))
            except ValueError:
                raise FormatError(f"{source}: row {lineno} has a non-integer field") from None
            if not all(0 <= v <= 255 for v in (r, g, b)) or ign not in (0, 1):
                raise FormatError(f"{source}: row {lineno} has an out-of-range colour or ignore flag")
            classes.append(ClassInfo(cid, row[1].strip(), row[2].strip(), (r, g, b), bool(ign)))
        return cls(classes)

    @classmethod
    def load(cls, path) -> "ClassTable":
        return cls.from_text(Path(path).read_text(), str(path))

    @classmethod
    def cityscapes(cls) -> "ClassTable":
        rows = [ClassInfo(i, n, cat, rgb) for i, (n, cat, rgb) in enumerate(CITYSCAPES)]
        rows.append(ClassInfo(len(rows), "ignore", "void", (0, 0, 0), ignore=True))
        return cls(rows)

    @classmethod
    def generic(cls, n_classes: int) -> "ClassTable":
        """Background plus ``n_classes - 1`` shape classes, no ignore class."""
        rows = [ClassInfo(0, "background", "background", (0, 0, 0))]
        for i in range(1, n_classes):
            rows.append(ClassInfo(i, f"class{i}", "shape", _palette_colour(i)))
        return cls(rows)


def _palette_colour(i: int) -> Tuple[int, int, int]:
    # bit-interleaved PASCAL VOC style colour map; injective for i < 256
    r = g = b = 0
    c = i
    for j in range(8):
        r |= ((c >> 0) & 1) << (7 - j)
        g |= ((c >> 1) & 1) << (7 - j)
        b |= ((c >> 2) & 1) << (7 - j)
        c >>= 3
    return r, g, b
