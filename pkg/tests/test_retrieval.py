import math

import numpy as np
import pytest
from scipy import integrate, stats

from bevloop.bev import BevConfig, BevImage
from bevloop.contour import abstract_image
from bevloop.retrieval import (
    LayeredDatabase,
    RetrievalConfig,
    RetrievalKey,
    make_anchor_key,
    make_full_key,
    make_roi_key,
    make_scan_keys,
)
from bevloop.utils import ConfigError, DataFormatError

CFG = RetrievalConfig()
LEVELS = (2, 3, 4)
ROI_BEV = BevConfig(half_extent_x=15.0, half_extent_y=15.0)


@pytest.fixture()
def db_path(tmp_path):
    yield str(tmp_path / "keys.db")


def random_key(rng, level=2, dim=CFG.key_dim):
    return RetrievalKey(level, int(rng.integers(1, 7)), rng.normal(size=dim))


def image_with(pixels, config=ROI_BEV):
    """BEV image with the given {(p_x, p_y): height} cells."""
    cells = np.full((config.rows, config.cols), np.nan)
    center_row, center_col = config.center
    for (x, y), height in pixels.items():
        cells[x + center_row, y + center_col] = height
    return BevImage(cells, config)


def test_retrieval_config():
    np.testing.assert_allclose(CFG.d_thresholds, [20 / 7 * k for k in range(1, 8)])
    assert CFG.key_dim == 10
    with pytest.raises(ConfigError):
        RetrievalConfig(n_segments=0)
    with pytest.raises(ConfigError):
        RetrievalConfig(batch_size=0)


def test_anchor_key(make_ca):
    key = make_anchor_key(make_ca(n_a=100), 150)
    np.testing.assert_allclose(key, [20.0, 10.0, math.sqrt(150)])


def test_full_key_weighting():
    anchor = np.array([3.0, 4.0, 5.0])
    roi = np.arange(7.0)
    np.testing.assert_allclose(make_full_key(anchor, roi, 0.0).values[:3], 0.0)
    key = make_full_key(anchor, roi, 0.3, level=3, seq=2)
    assert (key.level, key.seq) == (3, 2)
    np.testing.assert_allclose(key.values, np.concatenate([0.3 * anchor, roi]))


def test_roi_key_empty(make_ca):
    img = image_with({(1, 1): -0.5, (0, 2): 0.0})  # levels 1 and 2
    ca = make_ca(x_c=(30.0, 30.0))  # nothing within the radius
    np.testing.assert_array_equal(make_roi_key(img, ca, CFG), np.zeros(7))
    low = image_with({(1, 1): -0.5})  # level 1 only, not above base level
    np.testing.assert_array_equal(make_roi_key(low, make_ca(), CFG), np.zeros(7))


def test_roi_key_boundary_pixel(make_ca):
    d1 = CFG.d_thresholds[0]
    img = image_with({(0, 0): 0.0})
    key = make_roi_key(img, make_ca(x_c=(-d1, 0.0)), CFG)
    assert key[0] == pytest.approx(0.5, abs=0.01)
    assert key[1] == pytest.approx(0.5, abs=0.01)
    assert key[2:].sum() < 0.01


def test_roi_key_matches_quadrature(make_ca):
    rng = np.random.default_rng(0)
    pixels = {}
    for _ in range(20):
        x, y = (int(v) for v in rng.integers(-12, 13, size=2))
        pixels[(x, y)] = float(rng.uniform(-1.0, 5.0))
    img = image_with(pixels)
    ca = make_ca(x_c=rng.uniform(-2, 2, size=2))
    edges = np.concatenate([[0.0], CFG.d_thresholds])
    expected = np.zeros(CFG.n_segments)
    for (x, y), height in pixels.items():
        level = img.level_map[x + ROI_BEV.center[0], y + ROI_BEV.center[1]]
        delta = math.hypot(x - ca.x_c[0], y - ca.x_c[1])
        if level <= CFG.base_level or delta > CFG.roi_radius:
            continue
        for i in range(CFG.n_segments):
            grid = np.linspace(edges[i], edges[i + 1], 20001)
            density = stats.norm.pdf(grid, loc=delta, scale=CFG.sigma_d)
            expected[i] += (level - CFG.base_level) * integrate.trapezoid(density, grid)
    key = make_roi_key(img, ca, CFG)
    np.testing.assert_allclose(key, expected, rtol=1e-6, atol=1e-6)


def test_roi_key_mass_bounded(make_ca):
    rng = np.random.default_rng(1)
    pixels = {}
    for _ in range(50):
        x, y = (int(v) for v in rng.integers(-15, 16, size=2))
        pixels[(x, y)] = float(rng.uniform(0.0, 5.0))
    img = image_with(pixels)
    ca = make_ca()
    key = make_roi_key(img, ca, CFG)
    levels = img.level_map[img.occupied]
    assert key.sum() <= float(np.clip(levels - CFG.base_level, 0, None).sum()) + 1e-9
    assert (key >= 0).all()


def test_scan_keys(scene_image):
    cas = abstract_image(scene_image, LEVELS)
    keys = make_scan_keys(scene_image, cas, CFG)
    for level in LEVELS:
        level_keys = [key for key in keys if key.level == level]
        assert len(level_keys) == min(len(cas[level]), CFG.top_anchors)
        assert [key.seq for key in level_keys] == list(range(1, len(level_keys) + 1))
    assert all(len(key.values) == CFG.key_dim for key in keys)


def test_keys_yaw_invariant(scene_image):
    rotated = scene_image.rotated90()
    original = abstract_image(scene_image, LEVELS)
    turned = abstract_image(rotated, LEVELS)
    for level in LEVELS:
        by_center = {
            (round(ca.x_c[0], 6), round(ca.x_c[1], 6)): ca for ca in turned[level]
        }
        assert len(by_center) == len(original[level])
        for ca in original[level]:
            other = by_center[(round(-ca.x_c[1], 6), round(ca.x_c[0], 6))]
            np.testing.assert_allclose(
                make_anchor_key(other, 1.0),
                make_anchor_key(ca, 1.0),
                rtol=1e-6,
                atol=1e-5,
            )
            np.testing.assert_allclose(
                make_roi_key(rotated, other, CFG),
                make_roi_key(scene_image, ca, CFG),
                rtol=1e-6,
                atol=1e-9,
            )


def test_database_insert_validation():
    db = LayeredDatabase(LEVELS, CFG.key_dim)
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        db.insert(0, [random_key(rng, level=7)])
    with pytest.raises(ValueError):
        db.insert(0, [random_key(rng, dim=3)])
    with pytest.raises(ValueError):
        db.query(random_key(rng), 0)
    assert db.pending_count == 0
    db.insert(0, [])
    assert db.size == 0


def test_database_query_sees_only_flushed_keys():
    db = LayeredDatabase(LEVELS, CFG.key_dim)
    key = RetrievalKey(3, 1, np.ones(CFG.key_dim))
    assert db.query(key, 5) == []
    db.insert(42, [key])
    assert db.query(key, 5) == []
    assert db.pending_count == 1
    db.force_flush()
    hits = db.query(key, 5)
    assert [(hit.scan_id, hit.seq) for hit in hits] == [(42, 1)]
    assert hits[0].distance == 0.0
    assert db.query(RetrievalKey(2, 1, np.ones(CFG.key_dim)), 5) == []
    assert repr(db) == "<LayeredDatabase levels=(2, 3, 4) size=1 pending=0>"


def test_database_matches_linear_scan():
    rng = np.random.default_rng(3)
    db = LayeredDatabase([2], CFG.key_dim)
    keys = rng.normal(size=(10000, CFG.key_dim))
    for scan_id, values in enumerate(keys):
        db.insert(scan_id, [RetrievalKey(2, 1, values)])
    db.force_flush()
    assert db.level_size(2) == 10000
    for _ in range(100):
        query = rng.normal(size=CFG.key_dim)
        hits = db.query(RetrievalKey(2, 1, query), 50)
        distances = np.linalg.norm(keys - query, axis=1)
        order = np.argsort(distances)[:50]
        assert [hit.scan_id for hit in hits] == order.tolist()
        np.testing.assert_allclose([hit.distance for hit in hits], distances[order])


def test_database_query_more_than_size():
    rng = np.random.default_rng(4)
    db = LayeredDatabase(LEVELS, CFG.key_dim)
    db.insert(0, [random_key(rng) for _ in range(3)])
    db.force_flush()
    assert len(db.query(random_key(rng), 50)) == 3
    assert len(db.query(random_key(rng), 1)) == 1


def test_database_staggered_flush():
    rng = np.random.default_rng(5)
    db = LayeredDatabase(LEVELS, CFG.key_dim, batch_size=6)
    assert db.flush_interval == 2
    keys = {level: random_key(rng, level=level) for level in LEVELS}
    db.insert(0, keys.values())
    visible = []
    for _ in range(6):
        db.step()
        visible.append(tuple(bool(db.query(keys[level], 1)) for level in LEVELS))
    assert visible == [
        (False, False, False),
        (True, False, False),
        (True, False, False),
        (True, True, False),
        (True, True, False),
        (True, True, True),
    ]


def test_database_every_key_visible_within_batch():
    rng = np.random.default_rng(6)
    batch = 9
    db = LayeredDatabase(LEVELS, CFG.key_dim, batch_size=batch)
    inserted = []
    for scan in range(40):
        key = random_key(rng, level=LEVELS[scan % 3])
        db.insert(scan, [key])
        inserted.append((scan, key))
        db.step()
        for old_scan, old_key in inserted:
            if scan - old_scan >= batch - 1:
                hits = db.query(old_key, 1)
                assert hits and hits[0].scan_id == old_scan


def test_database_small_batch_flushes_every_scan():
    rng = np.random.default_rng(7)
    db = LayeredDatabase(LEVELS, CFG.key_dim, batch_size=1)
    key = random_key(rng, level=4)
    db.insert(0, [key])
    db.step()
    assert db.query(key, 1)[0].scan_id == 0


def test_database_save_load(db_path):
    rng = np.random.default_rng(8)
    db = LayeredDatabase.from_config(CFG)
    for scan_id in range(30):
        level = LEVELS[scan_id % 2]
        db.insert(scan_id, [random_key(rng, level=level) for _ in range(3)])
    db.save(db_path)
    assert db.pending_count == 0

    loaded = LayeredDatabase.load(db_path)
    assert loaded.levels == LEVELS
    assert loaded.size == db.size == 90
    assert loaded.level_size(4) == 0
    for _ in range(10):
        query = random_key(rng, level=LEVELS[int(rng.integers(0, 2))])
        assert loaded.query(query, 5) == db.query(query, 5)


def test_database_load_rejects_corrupt_files(db_path):
    rng = np.random.default_rng(9)
    db = LayeredDatabase(LEVELS, CFG.key_dim)
    db.insert(1, [random_key(rng)])
    db.save(db_path)
    with open(db_path, "rb") as fd:
        data = fd.read()

    with open(db_path, "wb") as fd:
        fd.write(data[:-5])
    with pytest.raises(DataFormatError) as e:
        LayeredDatabase.load(db_path)
    assert e.value.offset is not None
    assert "truncated" in str(e.value)

    with open(db_path, "wb") as fd:
        fd.write(b"NOTADB!!" + data[8:])
    with pytest.raises(DataFormatError) as e:
        LayeredDatabase.load(db_path)
    assert e.value.offset == 0

    with open(db_path, "wb") as fd:
        fd.write(data + b"\0")
    with pytest.raises(DataFormatError):
        LayeredDatabase.load(db_path)
