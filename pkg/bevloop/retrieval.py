"""Yaw-invariant retrieval keys and the layered KD-tree database."""
import logging
import math
import struct
import threading
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.spatial import KDTree
from scipy.special import ndtr

from bevloop.bev import BevImage
from bevloop.contour import ContourAbstraction
from bevloop.utils import ConfigError, create_format_error

logger = logging.getLogger(__name__)

ANCHOR_KEY_DIM = 3
SNAPSHOT_MAGIC = b"BEVLOOPD"
SNAPSHOT_VERSION = 1
_HEADER = struct.Struct("<8sHHI")
_LEVEL_HEADER = struct.Struct("<iI")
_RECORD = np.dtype([("scan_id", "<i8"), ("seq", "<i4")])


@dataclass(frozen=True)
class RetrievalConfig:
    levels: Tuple[int, ...] = (2, 3, 4)
    top_anchors: int = 6
    roi_radius: float = 20.0
    n_segments: int = 7
    sigma_d: float = 1.0
    base_level: int = 1
    w1: float = 0.3
    batch_size: int = 100
    candidates_per_key: int = 50

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(level) for level in self.levels))
        if not self.levels or min(self.levels) < 1:
            raise ConfigError("retrieval.levels must be 1-based level indices")
        if self.top_anchors < 1 or self.n_segments < 1:
            raise ConfigError("retrieval.top_anchors and n_segments must be >= 1")
        if not (self.roi_radius > 0 and self.sigma_d > 0):
            raise ConfigError("retrieval.roi_radius and sigma_d must be positive")
        if self.base_level < 0 or self.w1 < 0:
            raise ConfigError("retrieval.base_level and w1 must be >= 0")
        if self.batch_size < 1 or self.candidates_per_key < 1:
            raise ConfigError(
                "retrieval.batch_size and candidates_per_key must be >= 1"
            )

    @property
    def d_thresholds(self) -> np.ndarray:
        """Upper edges d_1..d_n of the uniform distance segments; d_0 = 0."""
        step = self.roi_radius / self.n_segments
        return np.linspace(step, self.roi_radius, self.n_segments)

    @property
    def key_dim(self) -> int:
        return ANCHOR_KEY_DIM + self.n_segments


class RetrievalKey(NamedTuple):
    level: int
    seq: int
    values: np.ndarray


class QueryHit(NamedTuple):
    scan_id: int
    seq: int
    distance: float


def make_anchor_key(ca: ContourAbstraction, cum_na: float) -> np.ndarray:
    return np.sqrt([ca.n_a * ca.lam1, ca.n_a * ca.lam2, float(cum_na)])


def make_roi_key(
    img: BevImage, ca: ContourAbstraction, cfg: RetrievalConfig
) -> np.ndarray:
    """Level mass above base_level around ca.x_c, spread over distance segments.

    Every pixel contributes ``Lev - base_level`` split between segments by a
    normal distribution of width sigma_d centered on its distance to x_c.
    """
    radius = cfg.roi_radius
    center_row, center_col = img.config.center
    row, col = ca.x_c[0] + center_row, ca.x_c[1] + center_col
    r0 = max(int(math.floor(row - radius)), 0)
    r1 = min(int(math.ceil(row + radius)) + 1, img.height)
    c0 = max(int(math.floor(col - radius)), 0)
    c1 = min(int(math.ceil(col + radius)) + 1, img.width)
    if r0 >= r1 or c0 >= c1:
        return np.zeros(cfg.n_segments)
    levels = img.level_map[r0:r1, c0:c1]
    rows, cols = np.mgrid[r0:r1, c0:c1]
    offsets = img.pixel_coordinates(rows, cols) - ca.x_c
    delta = np.hypot(offsets[..., 0], offsets[..., 1])
    inside = (delta <= radius) & (levels > cfg.base_level)
    if not inside.any():
        return np.zeros(cfg.n_segments)
    weights = (levels[inside] - cfg.base_level).astype(np.float64)
    edges = np.concatenate([[0.0], cfg.d_thresholds])
    cdf = ndtr((edges[None, :] - delta[inside][:, None]) / cfg.sigma_d)
    return weights @ np.diff(cdf, axis=1)


def make_full_key(
    anchor_key, roi_key, w1: float, level: int = 0, seq: int = 0
) -> RetrievalKey:
    values = np.concatenate([w1 * np.asarray(anchor_key, dtype=np.float64), roi_key])
    return RetrievalKey(level, seq, values)


def make_scan_keys(
    img: BevImage,
    cas_by_level: Dict[int, List[ContourAbstraction]],
    cfg: RetrievalConfig,
) -> List[RetrievalKey]:
    """Keys of the top anchors of every indexed level."""
    keys = []
    for level in cfg.levels:
        cum_na = 0
        for ca in cas_by_level.get(level, [])[: cfg.top_anchors]:
            cum_na += ca.n_a
            keys.append(
                make_full_key(
                    make_anchor_key(ca, cum_na),
                    make_roi_key(img, ca, cfg),
                    cfg.w1,
                    level,
                    ca.seq,
                )
            )
    return keys


class _Snapshot:
    """Immutable flushed state of one level."""

    def __init__(self, keys: np.ndarray, records: np.ndarray):
        self.keys = keys
        self.records = records
        self.tree = KDTree(keys) if len(keys) else None

    def __len__(self):
        return len(self.records)


class LayeredDatabase:
    """One exact KD-tree per indexed level plus a pending-insert buffer.

    Inserted keys become queryable when their level is flushed. ``step`` is
    called once per scan and flushes one level every ``batch_size // n_levels``
    scans in round-robin order, so nothing waits more than ``batch_size``
    scans. Queries only see whole snapshots.
    """

    def __init__(self, levels: Sequence[int], key_dim: int, batch_size: int = 100):
        self.levels = tuple(sorted(int(level) for level in levels))
        self.key_dim = int(key_dim)
        self.batch_size = int(batch_size)
        self.flush_interval = max(1, self.batch_size // len(self.levels))
        self._lock = threading.Lock()
        empty = _Snapshot(np.zeros((0, self.key_dim)), np.zeros(0, dtype=_RECORD))
        self._snapshots = {
            level: empty for level in self.levels
        }  # type: Dict[int, _Snapshot]
        self._pending = {level: [] for level in self.levels}  # type: Dict[int, list]
        self._scans = 0
        self._next = 0

    def __repr__(self):
        return "<LayeredDatabase levels=%r size=%d pending=%d>" % (
            self.levels,
            self.size,
            self.pending_count,
        )

    @classmethod
    def from_config(cls, cfg: RetrievalConfig) -> "LayeredDatabase":
        return cls(cfg.levels, cfg.key_dim, cfg.batch_size)

    @property
    def size(self) -> int:
        return sum(len(snapshot) for snapshot in self._snapshots.values())

    @property
    def pending_count(self) -> int:
        return sum(len(pending) for pending in self._pending.values())

    def level_size(self, level: int) -> int:
        return len(self._snapshots[level])

    def insert(self, scan_id: int, keys: Iterable[RetrievalKey]):
        keys = list(keys)
        for key in keys:
            if key.level not in self._pending:
                raise ValueError(
                    "level %r is not indexed (indexed: %r)" % (key.level, self.levels)
                )
            if len(key.values) != self.key_dim:
                raise ValueError(
                    "key dimension %d does not match database %d"
                    % (len(key.values), self.key_dim)
                )
        with self._lock:
            for key in keys:
                self._pending[key.level].append((scan_id, key.seq, key.values))

    def flush(self, level: Optional[int] = None):
        """Merge the pending keys of *level*, or of the next level in turn."""
        if level is None:
            level = self.levels[self._next]
            self._next = (self._next + 1) % len(self.levels)
        with self._lock:
            pending, self._pending[level] = self._pending[level], []
        if not pending:
            return
        current = self._snapshots[level]
        records = np.array(
            [(scan_id, seq) for scan_id, seq, _ in pending], dtype=_RECORD
        )
        keys = np.array([values for _, _, values in pending], dtype=np.float64)
        snapshot = _Snapshot(
            np.concatenate([current.keys, keys]),
            np.concatenate([current.records, records]),
        )
        with self._lock:
            self._snapshots[level] = snapshot
        logger.info(
            "flushed level %d: +%d keys, %d total", level, len(pending), len(snapshot)
        )

    def force_flush(self):
        for level in self.levels:
            self.flush(level)

    def step(self):
        """Advance the scan counter; flush one level when the schedule says so."""
        self._scans += 1
        if self.batch_size < len(self.levels):
            self.force_flush()
        elif self._scans % self.flush_interval == 0:
            self.flush()

    def query(self, key: RetrievalKey, k: int) -> List[QueryHit]:
        """Exact k nearest flushed entries of key.level, nearest first."""
        if k < 1:
            raise ValueError("k must be >= 1: %r" % k)
        with self._lock:
            snapshot = self._snapshots.get(key.level)
        if snapshot is None or not len(snapshot):
            return []
        distances, indices = snapshot.tree.query(key.values, k=min(k, len(snapshot)))
        distances, indices = np.atleast_1d(distances), np.atleast_1d(indices)
        records = snapshot.records[indices]
        return [
            QueryHit(int(record["scan_id"]), int(record["seq"]), float(distance))
            for record, distance in zip(records, distances)
        ]

    def save(self, path):
        """Write every key, pending ones included, to a little-endian snapshot."""
        self.force_flush()
        with open(path, "wb") as fd:
            fd.write(
                _HEADER.pack(
                    SNAPSHOT_MAGIC, SNAPSHOT_VERSION, self.key_dim, len(self.levels)
                )
            )
            for level in self.levels:
                snapshot = self._snapshots[level]
                fd.write(_LEVEL_HEADER.pack(level, len(snapshot)))
                fd.write(snapshot.records.astype(_RECORD).tobytes())
                fd.write(snapshot.keys.astype("<f8").tobytes())

    @classmethod
    def load(cls, path, batch_size: int = 100) -> "LayeredDatabase":
        with open(path, "rb") as fd:
            data = fd.read()

        def need(offset, size, what):
            if offset + size > len(data):
                raise create_format_error(
                    "truncated database snapshot while reading %s" % what, path, offset
                )

        need(0, _HEADER.size, "header")
        magic, version, key_dim, n_levels = _HEADER.unpack_from(data, 0)
        if magic != SNAPSHOT_MAGIC:
            raise create_format_error("bad database snapshot magic %r" % magic, path, 0)
        if version != SNAPSHOT_VERSION:
            raise create_format_error(
                "unsupported snapshot version %d" % version, path, 8
            )
        if n_levels < 1:
            raise create_format_error("snapshot has no levels", path, 12)
        offset = _HEADER.size
        levels = {}
        for _ in range(n_levels):
            need(offset, _LEVEL_HEADER.size, "level header")
            level, count = _LEVEL_HEADER.unpack_from(data, offset)
            offset += _LEVEL_HEADER.size
            need(offset, count * _RECORD.itemsize, "records of level %d" % level)
            records = np.zeros(0, dtype=_RECORD)
            if count:
                records = np.frombuffer(
                    data, dtype=_RECORD, count=count, offset=offset
                ).copy()
            offset += count * _RECORD.itemsize
            need(offset, count * key_dim * 8, "keys of level %d" % level)
            keys = np.zeros(0)
            if count:
                keys = np.frombuffer(
                    data, dtype="<f8", count=count * key_dim, offset=offset
                )
            offset += count * key_dim * 8
            if level in levels:
                raise create_format_error("duplicate level %d" % level, path, offset)
            levels[level] = (keys.reshape(count, key_dim).astype(np.float64), records)
        if offset != len(data):
            raise create_format_error("trailing bytes after snapshot", path, offset)

        db = cls(levels.keys(), key_dim, batch_size)
        for level, (keys, records) in levels.items():
            db._snapshots[level] = _Snapshot(keys, records)
        return db
