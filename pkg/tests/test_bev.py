import math

import numpy as np
import pytest

from bevloop.bev import (
    BevConfig,
    BevImage,
    PointCloud,
    level_of,
    rasterize,
    slice_level,
)
from bevloop.utils import ConfigError


def test_point_cloud():
    cloud = PointCloud([[1.0, 2.0, 3.0]])
    assert len(cloud) == 1
    assert repr(cloud) == "<PointCloud points=1>"
    assert len(PointCloud([])) == 0

    with pytest.raises(ValueError):
        PointCloud([[1.0, 2.0]])
    with pytest.raises(ValueError):
        PointCloud([[1.0, np.nan, 0.0]])
    with pytest.raises(ValueError):
        cloud.points[0, 0] = 5.0


def test_bev_config():
    cfg = BevConfig(half_extent_x=10.0, half_extent_y=5.0)
    assert cfg.center == (20, 10)
    assert (cfg.rows, cfg.cols) == (41, 21)
    assert cfg.levels == tuple(range(1, 9))
    assert BevConfig().rows == 301

    with pytest.raises(ConfigError):
        BevConfig(resolution=0)
    with pytest.raises(ConfigError):
        BevConfig(slice_heights=(1.0,))
    with pytest.raises(ConfigError):
        BevConfig(slice_heights=(0.0, 1.0, 1.0))


def test_rasterize_keeps_max_height():
    cfg = BevConfig(half_extent_x=5.0, half_extent_y=5.0)
    cloud = PointCloud(
        [
            [1.0, 2.0, 0.1],
            [1.1, 2.1, 0.9],
            [-2.0, 0.0, -0.5],
            [50.0, 0.0, 3.0],  # outside the grid
        ]
    )
    img = rasterize(cloud, cfg)
    center_row, center_col = cfg.center
    assert img.cells[center_row + 2, center_col + 4] == 0.9
    assert img.cells[center_row - 4, center_col] == -0.5
    assert img.occupied.sum() == 2


def test_rasterize_empty_and_offset():
    cfg = BevConfig(half_extent_x=5.0, half_extent_y=5.0, sensor_height_offset=1.5)
    assert not rasterize(PointCloud([]), cfg).occupied.any()

    img = rasterize(PointCloud([[0.0, 0.0, 0.25]]), cfg)
    assert img.cells[cfg.center] == 1.75


def test_bev_image_shape():
    cfg = BevConfig(half_extent_x=5.0, half_extent_y=5.0)
    with pytest.raises(ValueError):
        BevImage(np.zeros((3, 3)), cfg)
    img = BevImage(np.full((cfg.rows, cfg.cols), np.nan), cfg)
    assert repr(img) == "<BevImage 21x21 occupied=0>"
    np.testing.assert_array_equal(
        img.pixel_coordinates([10, 0], [10, 20]), [[0, 0], [-10, 10]]
    )


def test_level_of():
    cfg = BevConfig()
    heights = cfg.slice_heights
    assert level_of(heights[0] - 1.0, cfg) == 0
    assert level_of(heights[0], cfg) == 1
    assert level_of(0.5 * (heights[2] + heights[3]), cfg) == 3
    assert level_of(heights[-1] + 10.0, cfg) == cfg.n_levels
    with pytest.raises(ValueError):
        level_of(math.nan, cfg)


def test_slice_level_nested(scene_image):
    cfg = scene_image.config
    previous = None
    for level in cfg.levels:
        mask = slice_level(scene_image, level)
        assert mask.level == level
        if previous is not None:
            assert not (mask.bits & ~previous.bits).any()
        previous = mask
    with pytest.raises(ValueError):
        slice_level(scene_image, 0)
    with pytest.raises(ValueError):
        slice_level(scene_image, cfg.n_levels + 1)


def test_level_map_matches_level_of(scene_image):
    rows, cols = np.nonzero(scene_image.occupied)
    for row, col in list(zip(rows, cols))[:200]:
        expected = level_of(scene_image.cells[row, col], scene_image.config)
        assert scene_image.level_map[row, col] == expected


def test_rotated90_matches_rotated_cloud(scene_cloud, small_bev):
    img = rasterize(scene_cloud, small_bev)
    for k in range(1, 4):
        rotated = rasterize(scene_cloud.transformed(k * math.pi / 2), small_bev)
        np.testing.assert_array_equal(rotated.cells, img.rotated90(k).cells)


def test_rotated90_needs_square_grid():
    cfg = BevConfig(half_extent_x=10.0, half_extent_y=5.0)
    img = rasterize(PointCloud([]), cfg)
    with pytest.raises(ValueError):
        img.rotated90()
