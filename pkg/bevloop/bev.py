"""Cartesian birds'-eye-view projection and height slicing.

Pixel convention: cell ``(row, col)`` of a :class:`BevImage` has the pixel
coordinate ``p_xy = (row - center_row, col - center_col)``; the sensor sits at
the center cell. Rows follow the sensor x axis and columns the sensor y axis,
so the metric position of a pixel is ``resolution * p_xy``. All contour
statistics downstream are expressed in these centered pixel units.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Tuple

import numpy as np

from bevloop.utils import ConfigError, check_finite

logger = logging.getLogger(__name__)

BELOW_ALL_LEVELS = 0
DEFAULT_SLICE_HEIGHTS = (-0.75, -0.25, 0.25, 0.75, 1.25, 2.0, 3.0, 4.5)


class PointCloud:
    def __init__(self, points):
        points = np.array(points, dtype=np.float64)
        if points.size == 0:
            points = points.reshape(0, 3)
        if points.ndim != 2 or points.shape[1] != 3:
            raise ValueError(
                "point cloud must be an (N, 3) array, got %r" % (points.shape,)
            )
        check_finite(points, "point cloud")
        points.setflags(write=False)
        self.points = points  # type: np.ndarray

    def __len__(self):
        return len(self.points)

    def __repr__(self):
        return "<PointCloud points=%d>" % len(self.points)

    def transformed(
        self, theta: float, tx: float = 0.0, ty: float = 0.0
    ) -> "PointCloud":
        """Return the cloud rotated by *theta* about z, then shifted by (*tx*, *ty*)."""
        c, s = math.cos(theta), math.sin(theta)
        points = self.points.copy()
        x, y = points[:, 0].copy(), points[:, 1].copy()
        points[:, 0] = c * x - s * y + tx
        points[:, 1] = s * x + c * y + ty
        return PointCloud(points)


@dataclass(frozen=True)
class BevConfig:
    resolution: float = 0.5
    half_extent_x: float = 75.0
    half_extent_y: float = 75.0
    slice_heights: Tuple[float, ...] = DEFAULT_SLICE_HEIGHTS
    sensor_height_offset: float = 0.0

    def __post_init__(self):
        heights = tuple(float(h) for h in self.slice_heights)
        object.__setattr__(self, "slice_heights", heights)
        if not self.resolution > 0:
            raise ConfigError("bev.resolution must be positive: %r" % self.resolution)
        if not (self.half_extent_x > 0 and self.half_extent_y > 0):
            raise ConfigError("bev half extents must be positive")
        if len(heights) < 2:
            raise ConfigError("bev.slice_heights needs at least 2 levels")
        if any(lo >= hi for lo, hi in zip(heights, heights[1:])):
            raise ConfigError(
                "bev.slice_heights must be strictly increasing: %r" % (heights,)
            )

    @property
    def n_levels(self) -> int:
        return len(self.slice_heights)

    @property
    def levels(self) -> Tuple[int, ...]:
        return tuple(range(1, self.n_levels + 1))

    @property
    def center(self) -> Tuple[int, int]:
        return (
            int(round(self.half_extent_x / self.resolution)),
            int(round(self.half_extent_y / self.resolution)),
        )

    @property
    def rows(self) -> int:
        return 2 * self.center[0] + 1

    @property
    def cols(self) -> int:
        return 2 * self.center[1] + 1


class BevImage:
    """Dense grid of maximum point heights; NaN marks an empty cell."""

    def __init__(self, cells, config: BevConfig):
        cells = np.array(cells, dtype=np.float64)
        if cells.shape != (config.rows, config.cols):
            raise ValueError(
                "cells shape %r does not match config grid %r"
                % (cells.shape, (config.rows, config.cols))
            )
        cells.setflags(write=False)
        self.cells = cells  # type: np.ndarray
        self.config = config  # type: BevConfig

    def __repr__(self):
        return "<BevImage %dx%d occupied=%d>" % (
            self.height,
            self.width,
            int(self.occupied.sum()),
        )

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @cached_property
    def occupied(self) -> np.ndarray:
        return ~np.isnan(self.cells)

    @cached_property
    def level_map(self) -> np.ndarray:
        """Lev(p_z) of every cell; empty cells and cells below all slices are 0."""
        levels = np.zeros(self.cells.shape, dtype=np.int64)
        occupied = self.occupied
        levels[occupied] = np.searchsorted(
            self.config.slice_heights, self.cells[occupied], side="right"
        )
        levels.setflags(write=False)
        return levels

    def pixel_coordinates(self, rows, cols) -> np.ndarray:
        center_row, center_col = self.config.center
        return np.stack(
            [np.asarray(rows, dtype=np.float64) - center_row,
             np.asarray(cols, dtype=np.float64) - center_col],
            axis=-1,
        )

    def rotated90(self, k: int = 1) -> "BevImage":
        """The image of the cloud rotated by k * 90 degrees about the sensor."""
        if self.height != self.width:
            raise ValueError("exact 90 degree rotation needs a square grid")
        return BevImage(np.rot90(self.cells, k), self.config)


class LevelMask:
    def __init__(self, level: int, bits: np.ndarray, image: BevImage):
        bits = np.array(bits, dtype=bool)
        bits.setflags(write=False)
        self.level = level  # type: int
        self.bits = bits  # type: np.ndarray
        self.image = image  # type: BevImage

    def __repr__(self):
        return "<LevelMask level=%d set=%d>" % (self.level, int(self.bits.sum()))


def rasterize(cloud: PointCloud, cfg: BevConfig) -> BevImage:
    """Keep the highest point (plus sensor height offset) of every BEV bin.

    Points outside the grid are dropped silently.
    """
    cells = np.full((cfg.rows, cfg.cols), np.nan)
    points = cloud.points
    if len(points):
        center_row, center_col = cfg.center
        gx = points[:, 0] / cfg.resolution
        gy = points[:, 1] / cfg.resolution
        inside = (
            (gx >= -center_row - 0.5)
            & (gx < center_row + 0.5)
            & (gy >= -center_col - 0.5)
            & (gy < center_col + 0.5)
        )
        rows = np.floor(gx[inside] + 0.5).astype(np.int64) + center_row
        cols = np.floor(gy[inside] + 0.5).astype(np.int64) + center_col
        # rounding at the far edge can land exactly on the grid size
        keep = (rows >= 0) & (rows < cfg.rows) & (cols >= 0) & (cols < cfg.cols)
        heights = points[inside, 2][keep] + cfg.sensor_height_offset
        np.fmax.at(cells, (rows[keep], cols[keep]), heights)
    return BevImage(cells, cfg)


def level_of(h: float, cfg: BevConfig) -> int:
    """Return max{l : h >= slice_heights[l]} (1-based), or BELOW_ALL_LEVELS."""
    if not math.isfinite(h):
        raise ValueError("height must be finite: %r" % h)
    return int(np.searchsorted(cfg.slice_heights, h, side="right"))


def slice_level(img: BevImage, level: int) -> LevelMask:
    """Threshold mask {Lev(p_z) >= level} of the non-empty cells."""
    if not 1 <= level <= img.config.n_levels:
        raise ValueError(
            "level %r out of range 1..%d" % (level, img.config.n_levels)
        )
    return LevelMask(level, img.level_map >= level, img)
