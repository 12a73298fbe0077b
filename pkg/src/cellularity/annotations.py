"""Point-wise nucleus annotations and disk-mask synthesis."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .pmap import CANONICAL_CHANNELS, NUCLEUS_CHANNELS, Channel, PixelMap

DEFAULT_DIAMETER = 15
HEADER = ["patch_id", "x", "y", "class"]


class AnnotationError(ValueError):
    pass


@dataclass
class PointAnnotationSet:
    patch_id: str
    points: list = field(default_factory=list)  # (x, y, class name)

    def by_class(self, name) -> list:
        name = str(name)
        return [(x, y) for x, y, c in self.points if c == name]


def _parse_int(token: str, what: str, row: int) -> int:
    try:
        return int(token.strip())
    except ValueError:
        raise AnnotationError(f"row {row}: non-integer {what} coordinate {token!r}") from None


def parse_annotations(path, width: int | None = None, height: int | None = None) -> list:
    """Read an annotation CSV into one :class:`PointAnnotationSet` per patch.

    Sets come out in order of first appearance and keep the file's point order.
    ``width``/``height``, when given, bound the coordinates; negative
    coordinates are always rejected. Row numbers in errors count the header
    as row 1.
    """
    sets: dict[str, PointAnnotationSet] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        if [h.strip() for h in header] != HEADER:
            raise AnnotationError(f"row 1: expected header {','.join(HEADER)}, got {','.join(header)}")
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 4:
                raise AnnotationError(f"row {row_no}: expected 4 fields, got {len(row)}")
            patch_id, xs, ys, cls = (cell.strip() for cell in row)
            if cls not in NUCLEUS_CHANNELS:
                raise AnnotationError(f"row {row_no}: unknown class token {cls!r}")
            x, y = _parse_int(xs, "x", row_no), _parse_int(ys, "y", row_no)
            if x < 0 or y < 0 or (width is not None and x >= width) or (height is not None and y >= height):
                raise AnnotationError(f"row {row_no}: point ({x}, {y}) outside patch bounds")
            sets.setdefault(patch_id, PointAnnotationSet(patch_id)).points.append((x, y, cls))
    return list(sets.values())


def write_annotations(sets, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HEADER)
        for ann in sets:
            for x, y, cls in ann.points:
                writer.writerow([ann.patch_id, int(x), int(y), cls])


def disk_union(points, width: int, height: int, diameter: float) -> np.ndarray:
    """Boolean raster of pixels whose center lies within ``diameter/2`` of any point.

    Pixel ``(row, col)`` has its center at ``(x=col, y=row)``; the boundary is
    inclusive and disks are clipped at the patch border.
    """
    mask = np.zeros((height, width), dtype=bool)
    r2 = (diameter / 2.0) ** 2
    reach = int(np.floor(diameter / 2.0))
    for x, y in points:
        x0, x1 = max(int(x) - reach, 0), min(int(x) + reach + 1, width)
        y0, y1 = max(int(y) - reach, 0), min(int(y) + reach + 1, height)
        if x0 >= x1 or y0 >= y1:
            continue
        dy = (np.arange(y0, y1) - y)[:, None]
        dx = (np.arange(x0, x1) - x)[None, :]
        mask[y0:y1, x0:x1] |= dx * dx + dy * dy <= r2
    return mask


def synthesize_masks(ann: PointAnnotationSet, width: int, height: int,
                     diameter: float = DEFAULT_DIAMETER) -> PixelMap:
    """Rasterize point labels into a binary 4-channel mask.

    Each nucleus class gets the union of its disks; overlapping classes are
    all set, and Background is the complement of the union of the three.
    """
    if diameter < 1:
        raise AnnotationError(f"diameter must be >= 1, got {diameter}")
    if width < 1 or height < 1:
        raise AnnotationError(f"invalid patch size {width}x{height}")
    planes = {name: disk_union(ann.by_class(name), width, height, diameter)
              for name in NUCLEUS_CHANNELS}
    nuclei = planes[Channel.NORMAL.value] | planes[Channel.LYMPHOCYTE.value] | planes[Channel.MALIGNANT.value]
    planes[Channel.BACKGROUND.value] = ~nuclei
    return PixelMap(CANONICAL_CHANNELS, np.stack([planes[c] for c in CANONICAL_CHANNELS]))
