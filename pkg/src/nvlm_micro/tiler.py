"""Dynamic high-resolution tiling.

An image is matched to the closest grid in a predefined set of (cols, rows)
aspect ratios, stretched to ``cols*tile_size x rows*tile_size`` and cut into
row-major square tiles.  Multi-tile layouts also carry a thumbnail: the whole
image resized to a single tile.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

Box = tuple[int, int, int, int]  # left, top, right, bottom (right/bottom exclusive)


@dataclass(frozen=True)
class Image:
    """Pixels as a ``(height, width, channels)`` float64 array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"image needs shape (H, W, C) with H, W >= 1, got {px.shape}")
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @classmethod
    def blank(cls, width: int, height: int, channels: int = 3, value: float = 0.0) -> Image:
        return cls(np.full((height, width, channels), value))


@dataclass(frozen=True)
class RatioSet:
    ratios: tuple[tuple[int, int], ...]
    max_tiles: int

    def __post_init__(self):
        if self.max_tiles < 1:
            raise ValueError("max_tiles must be positive")
        for c, r in self.ratios:
            if c < 1 or r < 1 or c * r > self.max_tiles:
                raise ValueError(f"ratio {c}:{r} is not a grid of at most {self.max_tiles} tiles")

    @classmethod
    def up_to(cls, max_tiles: int) -> RatioSet:
        """Every (cols, rows) grid with at most ``max_tiles`` tiles, lexicographic."""
        pairs = [
            (c, r)
            for c in range(1, max_tiles + 1)
            for r in range(1, max_tiles + 1)
            if c * r <= max_tiles
        ]
        return cls(tuple(pairs), max_tiles)

    def __len__(self) -> int:
        return len(self.ratios)


DEFAULT_RATIOS = RatioSet.up_to(6)


@dataclass(frozen=True)
class TileLayout:
    ratio: tuple[int, int]
    tile_size: int
    tile_boxes: tuple[Box, ...]
    has_thumbnail: bool
    source_size: tuple[int, int] = (0, 0)
    canvas: tuple[int, int] = field(init=False)

    def __post_init__(self):
        c, r = self.ratio
        object.__setattr__(self, "canvas", (c * self.tile_size, r * self.tile_size))

    @property
    def n_tiles(self) -> int:
        return len(self.tile_boxes)

    @property
    def n_blocks(self) -> int:
        """Regular tiles plus the thumbnail, if any."""
        return self.n_tiles + int(self.has_thumbnail)

    def grid_position(self, k: int) -> tuple[int, int]:
        """1-based (x, y) grid coordinate of tile ``k`` (0-based row-major)."""
        cols = self.ratio[0]
        return k % cols + 1, k // cols + 1

    def to_dict(self, tokens_per_tile: int | None = None) -> dict:
        doc = {
            "source_size": list(self.source_size),
            "ratio": list(self.ratio),
            "tile_size": self.tile_size,
            "canvas": list(self.canvas),
            "tile_boxes": [list(b) for b in self.tile_boxes],
            "has_thumbnail": self.has_thumbnail,
        }
        if tokens_per_tile is not None:
            doc["token_budget"] = token_budget(self, tokens_per_tile)
        return doc


def match_ratio(width: int, height: int, rs: RatioSet = DEFAULT_RATIOS) -> tuple[int, int]:
    """Grid whose aspect is closest to the image's in log space.

    Ties go to fewer tiles, then to the earlier entry of ``rs``.
    """
    if width < 1 or height < 1:
        raise ValueError(f"image size must be positive, got {width}x{height}")
    if not rs.ratios:
        raise ValueError("empty ratio set")
    aspect = math.log(width / height)
    best = min(
        enumerate(rs.ratios),
        key=lambda item: (abs(aspect - math.log(item[1][0] / item[1][1])), item[1][0] * item[1][1], item[0]),
    )
    return best[1]


def layout_for_size(
    width: int,
    height: int,
    rs: RatioSet = DEFAULT_RATIOS,
    tile_size: int = 448,
    thumbnail: bool = True,
) -> TileLayout:
    cols, rows = match_ratio(width, height, rs)
    boxes = tuple(
        (x * tile_size, y * tile_size, (x + 1) * tile_size, (y + 1) * tile_size)
        for y in range(rows)
        for x in range(cols)
    )
    return TileLayout(
        ratio=(cols, rows),
        tile_size=tile_size,
        tile_boxes=boxes,
        has_thumbnail=thumbnail and cols * rows > 1,
        source_size=(width, height),
    )


def layout(
    image: Image, rs: RatioSet = DEFAULT_RATIOS, tile_size: int = 448, thumbnail: bool = True
) -> TileLayout:
    return layout_for_size(image.width, image.height, rs, tile_size, thumbnail)


def resize_bilinear(pixels: np.ndarray, width: int, height: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping.

    Interpolation is written as ``a + t*(b - a)`` so constant regions stay
    bitwise constant.
    """
    src_h, src_w = pixels.shape[:2]
    if (src_w, src_h) == (width, height):
        return pixels.copy()

    def axis(n_out, n_in):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0.0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, ty = axis(height, src_h)
    x0, x1, tx = axis(width, src_w)
    top = pixels[y0]
    bot = pixels[y1]
    rows = top + ty[:, None, None] * (bot - top)
    left = rows[:, x0]
    right = rows[:, x1]
    return left + tx[None, :, None] * (right - left)


def cut(image: Image, lo: TileLayout) -> tuple[list[Image], Image | None]:
    """Resize ``image`` onto the layout canvas and slice it into tiles.

    Returns the row-major tiles and the thumbnail (``None`` for single-tile
    layouts).
    """
    if lo.source_size not in ((0, 0), (image.width, image.height)):
        raise ValueError(f"layout was built for {lo.source_size}, image is {image.width}x{image.height}")
    canvas = resize_bilinear(image.pixels, *lo.canvas)
    tiles = [Image(canvas[top:bottom, left:right]) for left, top, right, bottom in lo.tile_boxes]
    thumb = None
    if lo.has_thumbnail:
        thumb = Image(resize_bilinear(image.pixels, lo.tile_size, lo.tile_size))
    return tiles, thumb


def blocks_in_order(tiles: Sequence[Image], thumb: Image | None) -> list[Image]:
    """Row-major tiles followed by the thumbnail."""
    return list(tiles) + ([thumb] if thumb is not None else [])


def token_budget(lo: TileLayout, tokens_per_tile: int) -> int:
    if tokens_per_tile < 1:
        raise ValueError("tokens_per_tile must be >= 1")
    return lo.n_blocks * tokens_per_tile
