"""Grid-based mask location vocabulary.

A face is divided into a G x G grid (default 4x4). Every axis-aligned
sub-rectangle of the grid is one mask pattern, plus one extra class for
"no mask". For G=4 that gives (4*5/2)**2 + 1 = 101 classes. Pixel-level
coverage maps are converted to class ids by thresholded cell occupancy
followed by a minimal-covering-rectangle lookup.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_GRID_SIZE = 4
DEFAULT_CELL_THRESHOLD = 0.25


@dataclass(frozen=True)
class PatternVocabulary:
    """Ordered mask-pattern classes for one grid size.

    ``rectangles[k]`` is the (r0, c0, r1, c1) cell rectangle (inclusive
    bounds) of class ``k``; class 0 is the empty pattern and has no
    rectangle entry (``rectangles[0] is None``).
    """

    grid_size: int
    rectangles: tuple  # index 0 -> None, 1.. -> (r0, c0, r1, c1)

    def __len__(self) -> int:
        return len(self.rectangles)

    def class_of(self, rect: tuple[int, int, int, int]) -> int:
        """Class id of an exact cell rectangle (inclusive bounds)."""
        try:
            return self.rectangles.index(rect)
        except ValueError:
            raise KeyError(f"rectangle {rect} not in vocabulary") from None

    def dump_text(self) -> str:
        """One pattern per line: ``<class> <r0> <c0> <r1> <c1>`` (class 0 = 'empty')."""
        lines = ["0 empty"]
        for k, rect in enumerate(self.rectangles[1:], start=1):
            lines.append("%d %d %d %d %d" % (k, *rect))
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class GridOccupancy:
    grid_size: int
    occupied: np.ndarray  # bool, G x G
    threshold: float


def enumerate_patterns(grid_size: int = DEFAULT_GRID_SIZE) -> PatternVocabulary:
    """All sub-rectangles of a G x G grid plus the empty class.

    Rectangles are ordered lexicographically by (r0, c0, r1, c1), so class
    ids are a pure function of the grid size and stable across runs.
    """
    if grid_size < 1:
        raise ValueError(f"grid_size must be >= 1, got {grid_size}")
    rects = [
        (r0, c0, r1, c1)
        for r0 in range(grid_size)
        for c0 in range(grid_size)
        for r1 in range(r0, grid_size)
        for c1 in range(c0, grid_size)
    ]
    rects.sort()
    return PatternVocabulary(grid_size=grid_size, rectangles=tuple([None] + rects))


def compute_cell_occupancy(
    region: np.ndarray,
    grid_size: int = DEFAULT_GRID_SIZE,
    threshold: float = DEFAULT_CELL_THRESHOLD,
) -> GridOccupancy:
    """Thresholded per-cell coverage of a binary H x W region.

    A cell counts as occupied when the fraction of covered pixels in it is
    >= ``threshold``. H and W must be divisible by the grid size; if not,
    the region is padded by edge replication up to the next multiple.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    region = np.asarray(region)
    if region.ndim != 2:
        raise ValueError(f"region must be 2-D, got shape {region.shape}")
    region = (region != 0).astype(np.float64)

    h, w = region.shape
    pad_h = (-h) % grid_size
    pad_w = (-w) % grid_size
    if pad_h or pad_w:
        region = np.pad(region, ((0, pad_h), (0, pad_w)), mode="edge")
    h, w = region.shape
    ch, cw = h // grid_size, w // grid_size

    cells = region.reshape(grid_size, ch, grid_size, cw)
    frac = cells.mean(axis=(1, 3))
    return GridOccupancy(grid_size=grid_size, occupied=frac >= threshold, threshold=threshold)


def occupancy_to_pattern(occ: GridOccupancy, vocab: PatternVocabulary) -> int:
    """Class id of the minimal rectangle covering all occupied cells (0 if none).

    Non-rectangular occupancies are labeled by their bounding rectangle;
    the masks produced in this package are convex, so the cover is tight.
    """
    if occ.grid_size != vocab.grid_size:
        raise ValueError(
            f"occupancy grid {occ.grid_size} does not match vocabulary grid {vocab.grid_size}"
        )
    rows, cols = np.nonzero(occ.occupied)
    if rows.size == 0:
        return 0
    rect = (int(rows.min()), int(cols.min()), int(rows.max()), int(cols.max()))
    return vocab.class_of(rect)


def pattern_class_of_region(
    region: np.ndarray,
    vocab: PatternVocabulary,
    threshold: float = DEFAULT_CELL_THRESHOLD,
) -> int:
    """Pixel coverage region -> pattern class, in one step."""
    occ = compute_cell_occupancy(region, vocab.grid_size, threshold)
    return occupancy_to_pattern(occ, vocab)


def rectangle_pixel_region(
    rect: tuple[int, int, int, int], grid_size: int, height: int, width: int
) -> np.ndarray:
    """Rasterize a cell rectangle to a binary H x W pixel region."""
    r0, c0, r1, c1 = rect
    ch, cw = height // grid_size, width // grid_size
    region = np.zeros((height, width), dtype=bool)
    region[r0 * ch : (r1 + 1) * ch, c0 * cw : (c1 + 1) * cw] = True
    return region
