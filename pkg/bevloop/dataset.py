"""KITTI-layout sequence I/O and synthetic blob scenes.

A sequence directory holds ``velodyne/NNNNNN.bin`` scans (little-endian
float32 x, y, z, intensity), ``poses.txt`` with one row-major 3x4 pose per
line in the reference (camera) frame and ``calib.txt`` whose ``Tr`` entry maps
sensor coordinates into that frame.
"""
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Iterator, List, NamedTuple, Optional, Tuple

import numpy as np
import yaml

from bevloop.bev import PointCloud
from bevloop.constellation import Se2Transform
from bevloop.utils import ConfigError, DataFormatError, create_format_error

logger = logging.getLogger(__name__)

SCAN_DIR = "velodyne"
POSES_FILE = "poses.txt"
CALIB_FILE = "calib.txt"
SCENE_FILE = "scene.yaml"
POINT_BYTES = 16
# velodyne -> camera axes, as in the KITTI odometry calibration
KITTI_TR = np.array(
    [
        [0.0, -1.0, 0.0, 0.0],
        [0.0, 0.0, -1.0, 0.0],
        [1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 1.0],
    ]
)


@dataclass(frozen=True)
class DatasetConfig:
    path: str = ""
    calib_key: str = "Tr"


class ScanRecord(NamedTuple):
    scan_id: int
    cloud: PointCloud
    gt_pose: Optional[np.ndarray]


def check_rigid(pose, tol: float = 1e-6) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    if pose.shape != (4, 4):
        raise ValueError("pose must be 4x4, got %r" % (pose.shape,))
    rotation = pose[:3, :3]
    if not np.allclose(rotation.T @ rotation, np.eye(3), atol=tol):
        raise ValueError("pose rotation is not orthonormal")
    if not abs(np.linalg.det(rotation) - 1.0) <= tol:
        raise ValueError("pose rotation is not proper")
    if not np.allclose(pose[3], [0.0, 0.0, 0.0, 1.0]):
        raise ValueError("pose last row must be (0, 0, 0, 1)")
    return pose


def invert_rigid(pose) -> np.ndarray:
    pose = np.asarray(pose, dtype=np.float64)
    inverse = np.eye(4)
    inverse[:3, :3] = pose[:3, :3].T
    inverse[:3, 3] = -pose[:3, :3].T @ pose[:3, 3]
    return inverse


def read_scan_bin(path) -> PointCloud:
    size = os.path.getsize(path)
    if size % POINT_BYTES:
        raise create_format_error(
            "scan length %d is not a multiple of %d bytes" % (size, POINT_BYTES),
            path,
            offset=size - size % POINT_BYTES,
        )
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    try:
        return PointCloud(data[:, :3].astype(np.float64))
    except ValueError as e:
        bad = int(np.nonzero(~np.isfinite(data[:, :3]).all(axis=1))[0][0])
        raise create_format_error(str(e), path, offset=bad * POINT_BYTES) from e


def write_scan_bin(path, cloud: PointCloud, intensity: float = 0.0):
    data = np.empty((len(cloud), 4), dtype="<f4")
    data[:, :3] = cloud.points
    data[:, 3] = intensity
    data.tofile(path)


def _parse_matrix(tokens, path, line_number) -> np.ndarray:
    if len(tokens) != 12:
        raise create_format_error(
            "expected 12 numbers, got %d" % len(tokens), path, line=line_number
        )
    try:
        values = [float(token) for token in tokens]
    except ValueError as e:
        raise create_format_error(str(e), path, line=line_number) from e
    matrix = np.eye(4)
    matrix[:3, :] = np.reshape(values, (3, 4))
    return matrix


def read_calib(path, key: str = "Tr") -> np.ndarray:
    """Sensor-to-reference transform stored under *key*; identity when missing."""
    if not os.path.exists(path):
        logger.warning("calibration file %s not found, using identity", path)
        return np.eye(4)
    with open(path) as fd:
        for line_number, line in enumerate(fd, start=1):
            name, sep, rest = line.partition(":")
            if sep and name.strip() == key:
                matrix = _parse_matrix(rest.split(), path, line_number)
                return check_rigid(matrix, tol=1e-4)
    logger.warning("calibration key %r missing in %s, using identity", key, path)
    return np.eye(4)


def read_poses(path, calib: Optional[np.ndarray] = None) -> List[np.ndarray]:
    """Sensor-frame poses ``Tr^-1 @ P @ Tr`` of every line of a KITTI pose file."""
    calib = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    calib_inverse = invert_rigid(calib)
    poses = []
    with open(path) as fd:
        for line_number, line in enumerate(fd, start=1):
            tokens = line.split()
            if not tokens:
                continue
            pose = _parse_matrix(tokens, path, line_number)
            poses.append(calib_inverse @ pose @ calib)
    return poses


def write_poses(path, poses, calib: Optional[np.ndarray] = None):
    calib = np.eye(4) if calib is None else np.asarray(calib, dtype=np.float64)
    calib_inverse = invert_rigid(calib)
    with open(path, "w") as fd:
        for pose in poses:
            reference = calib @ np.asarray(pose, dtype=np.float64) @ calib_inverse
            values = reference[:3, :].reshape(-1)
            fd.write(" ".join(repr(float(v)) for v in values) + "\n")


def write_calib(path, calib: np.ndarray, key: str = "Tr"):
    with open(path, "w") as fd:
        values = np.asarray(calib, dtype=np.float64)[:3, :].reshape(-1)
        fd.write("%s: %s\n" % (key, " ".join(repr(float(v)) for v in values)))


def scan_paths(root) -> List[str]:
    directory = os.path.join(root, SCAN_DIR)
    if not os.path.isdir(directory):
        raise FileNotFoundError("scan directory not found: %s" % directory)
    names = sorted(name for name in os.listdir(directory) if name.endswith(".bin"))
    return [os.path.join(directory, name) for name in names]


def read_sequence(root, calib_key: str = "Tr") -> Iterator[ScanRecord]:
    """Yield the scans of a sequence in file order, with GT poses when present."""
    paths = scan_paths(root)
    poses = None  # type: Optional[List[np.ndarray]]
    poses_path = os.path.join(root, POSES_FILE)
    if os.path.exists(poses_path):
        calib = read_calib(os.path.join(root, CALIB_FILE), calib_key)
        poses = read_poses(poses_path, calib)
        if len(poses) != len(paths):
            raise create_format_error(
                "%d poses for %d scans" % (len(poses), len(paths)), poses_path
            )
    for scan_id, path in enumerate(paths):
        pose = None if poses is None else poses[scan_id]
        yield ScanRecord(scan_id, read_scan_bin(path), pose)


@dataclass(frozen=True)
class SceneParams:
    min_blobs: int = 20
    max_blobs: int = 60
    extent: float = 35.0
    min_spread: float = 0.4
    max_spread: float = 2.0
    min_height: float = 0.5
    max_height: float = 5.0
    # points per square meter inside the two-sigma ellipse of a blob
    min_density: float = 30.0
    max_density: float = 60.0
    vertical_noise: float = 0.03
    ground_points: int = 3000
    ground_height: float = -1.73
    ground_radius: float = 50.0
    n_places: int = 20
    # scans of other places between the first pass and the revisits
    revisit_gap: int = 160
    place_spacing: float = 1000.0
    revisit_translation: float = 3.0
    dropout: float = 0.1
    center_jitter: float = 0.1

    def __post_init__(self):
        if not 1 <= self.min_blobs <= self.max_blobs:
            raise ConfigError(
                "synth blob counts must satisfy 1 <= min_blobs <= max_blobs"
            )
        if not 0 < self.min_spread <= self.max_spread:
            raise ConfigError("synth spreads must satisfy 0 < min_spread <= max_spread")
        if not 0 < self.min_density <= self.max_density:
            raise ConfigError("synth densities must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("synth.dropout must be in [0, 1)")
        if self.n_places < 1 or self.extent <= 0 or self.ground_points < 0:
            raise ConfigError("synth.n_places, extent and ground_points out of range")
        if self.revisit_translation < 0 or self.center_jitter < 0:
            raise ConfigError("synth revisit perturbations must be >= 0")
        if self.revisit_gap < 0:
            raise ConfigError("synth.revisit_gap must be >= 0")


class Blob(NamedTuple):
    center: np.ndarray
    spread: np.ndarray
    height: float
    n_points: int


class SyntheticScene:
    """Blobs in world coordinates; *pose* is the world pose of the place origin."""

    def __init__(self, blobs: List[Blob], pose: Optional[Se2Transform] = None):
        self.blobs = blobs  # type: List[Blob]
        self.pose = pose or Se2Transform.identity()  # type: Se2Transform

    def __repr__(self):
        return "<SyntheticScene blobs=%d pose=%r>" % (len(self.blobs), self.pose)


def _random_spread(rng: np.random.Generator, params: SceneParams) -> np.ndarray:
    axes = rng.uniform(params.min_spread, params.max_spread, size=2)
    c, s = math.cos(rng.uniform(0, np.pi)), math.sin(rng.uniform(0, np.pi))
    rotation = np.array([[c, -s], [s, c]])
    return rotation @ np.diag(axes ** 2) @ rotation.T


def random_scene(
    rng: np.random.Generator, params: SceneParams, pose: Optional[Se2Transform] = None
) -> SyntheticScene:
    pose = pose or Se2Transform.identity()
    n_blobs = int(rng.integers(params.min_blobs, params.max_blobs + 1))
    blobs = []
    for _ in range(n_blobs):
        local = rng.uniform(-params.extent, params.extent, size=2)
        spread = _random_spread(rng, params)
        density = rng.uniform(params.min_density, params.max_density)
        area = 4.0 * np.pi * math.sqrt(np.linalg.det(spread))
        blobs.append(
            Blob(
                center=pose.apply(local),
                spread=spread,
                height=float(rng.uniform(params.min_height, params.max_height)),
                n_points=max(1, int(round(density * area))),
            )
        )
    return SyntheticScene(blobs, pose)


def observe_scene(
    scene: SyntheticScene,
    sensor_pose: Se2Transform,
    rng: np.random.Generator,
    params: SceneParams,
    dropout: float = 0.0,
    jitter: float = 0.0,
) -> PointCloud:
    """Sample a scan of *scene* from the world pose *sensor_pose* (sensor at origin)."""
    world_to_sensor = sensor_pose.inverse()
    rotation = world_to_sensor.rotation
    chunks = []
    for blob in scene.blobs:
        if dropout and rng.random() < dropout:
            continue
        center = blob.center + (rng.normal(0.0, jitter, size=2) if jitter else 0.0)
        center = world_to_sensor.apply(center)
        spread = rotation @ blob.spread @ rotation.T
        spread = 0.5 * (spread + spread.T)
        xy = rng.multivariate_normal(center, spread, size=blob.n_points)
        z = blob.height + rng.normal(0.0, params.vertical_noise, size=blob.n_points)
        chunks.append(np.column_stack([xy, z]))
    if params.ground_points:
        radius = params.ground_radius * np.sqrt(rng.random(params.ground_points))
        angle = rng.uniform(-np.pi, np.pi, size=params.ground_points)
        z = params.ground_height + rng.normal(
            0.0, params.vertical_noise, size=params.ground_points
        )
        ring = [radius * np.cos(angle), radius * np.sin(angle), z]
        chunks.append(np.column_stack(ring))
    if not chunks:
        return PointCloud(np.zeros((0, 3)))
    return PointCloud(np.concatenate(chunks))


def generate_scene(
    seed: int, params: Optional[SceneParams] = None
) -> Tuple[SyntheticScene, PointCloud]:
    """One random scene observed from its own origin; deterministic for *seed*."""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, params)
    return scene, observe_scene(scene, scene.pose, rng, params)


def se2_to_pose(transform: Se2Transform) -> np.ndarray:
    pose = np.eye(4)
    pose[:2, :2] = transform.rotation
    pose[:2, 3] = transform.t
    return pose


class SyntheticSequence(NamedTuple):
    records: List[ScanRecord]
    revisits: List[Tuple[int, int]]
    # revisited places only, indexed like the first pass
    scenes: List[SyntheticScene]


def generate_sequence(
    seed: int, params: Optional[SceneParams] = None
) -> SyntheticSequence:
    """A first pass over ``n_places`` places, then one perturbed revisit of each.

    ``revisit_gap`` scans of places that are never revisited separate the two
    passes. Places are ``place_spacing`` meters apart. Revisits use a random yaw, at
    most ``revisit_translation`` meters of offset, blob dropout and centre
    jitter. ``revisits`` lists ``(revisit_id, original_id)`` pairs.
    """
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    scenes, records = [], []
    for place in range(params.n_places):
        yaw = rng.uniform(-np.pi, np.pi)
        origin = Se2Transform(yaw, (place * params.place_spacing, 0.0))
        scene = random_scene(rng, params, origin)
        scenes.append(scene)
        cloud = observe_scene(scene, origin, rng, params)
        records.append(ScanRecord(place, cloud, se2_to_pose(origin)))

    for place in range(params.n_places, params.n_places + params.revisit_gap):
        yaw = rng.uniform(-np.pi, np.pi)
        origin = Se2Transform(yaw, (place * params.place_spacing, 0.0))
        cloud = observe_scene(random_scene(rng, params, origin), origin, rng, params)
        records.append(ScanRecord(place, cloud, se2_to_pose(origin)))

    revisits = []
    for place in rng.permutation(params.n_places):
        scene = scenes[place]
        radius = params.revisit_translation * math.sqrt(rng.random())
        angle = rng.uniform(-np.pi, np.pi)
        offset = scene.pose.t + radius * np.array([math.cos(angle), math.sin(angle)])
        pose = Se2Transform(rng.uniform(-np.pi, np.pi), offset)
        cloud = observe_scene(
            scene,
            pose,
            rng,
            params,
            dropout=params.dropout,
            jitter=params.center_jitter,
        )
        scan_id = len(records)
        records.append(ScanRecord(scan_id, cloud, se2_to_pose(pose)))
        revisits.append((scan_id, int(place)))
    return SyntheticSequence(records, revisits, scenes)


def write_sequence(root, sequence: SyntheticSequence, seed: int, params: SceneParams):
    """Write *sequence* in KITTI layout plus a ``scene.yaml`` description."""
    try:
        os.makedirs(os.path.join(root, SCAN_DIR), exist_ok=True)
    except OSError as e:
        raise DataFormatError(
            "cannot create dataset directory %s: %s" % (root, e), str(root)
        ) from e
    for record in sequence.records:
        name = "%06d.bin" % record.scan_id
        write_scan_bin(os.path.join(root, SCAN_DIR, name), record.cloud)
    write_calib(os.path.join(root, CALIB_FILE), KITTI_TR)
    poses = [r.gt_pose for r in sequence.records]
    write_poses(os.path.join(root, POSES_FILE), poses, KITTI_TR)
    description = {
        "seed": int(seed),
        "n_scans": len(sequence.records),
        "params": asdict(params),
        "revisits": [list(pair) for pair in sequence.revisits],
    }
    with open(os.path.join(root, SCENE_FILE), "w") as fd:
        yaml.safe_dump(description, fd, sort_keys=True)
    logger.info("wrote %d synthetic scans to %s", len(sequence.records), root)
