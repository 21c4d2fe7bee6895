"""Constellations of contour abstractions and their discrete similarity checks.

A constellation is an anchor CA plus the top CAs of a few levels around it.
Two constellations are compared in three steps: the anchors must be similar,
peripherals with about the same distance to their anchor are paired through a
bit vector AND, and the pairs vote for a common rotation. The survivors of a
final pairwise check pin down an SE(2) transform.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from bevloop.contour import ContourAbstraction, group_by_level
from bevloop.utils import ConfigError, rotation_matrix, wrap_angle

logger = logging.getLogger(__name__)

BITS_PER_LEVEL = 64


@dataclass(frozen=True)
class Tolerance:
    t_p: float
    t_a: float

    def __post_init__(self):
        if not 0.0 < self.t_p < 1.0:
            raise ConfigError("t_p must be in (0, 1): %r" % self.t_p)
        if self.t_a < 0.0:
            raise ConfigError("t_a must be >= 0: %r" % self.t_a)


@dataclass(frozen=True)
class ThresholdSet:
    n_a: Tolerance = field(default_factory=lambda: Tolerance(0.25, 6.0))
    h_m: Tolerance = field(default_factory=lambda: Tolerance(0.25, 0.3))
    ecc: Tolerance = field(default_factory=lambda: Tolerance(0.5, 0.75))
    lam1: Tolerance = field(default_factory=lambda: Tolerance(0.3, 1.0))
    lam2: Tolerance = field(default_factory=lambda: Tolerance(0.3, 1.0))
    # peripheral-to-anchor distance in pixels
    dist: Tolerance = field(default_factory=lambda: Tolerance(0.02, 1.0))


@dataclass(frozen=True)
class ConstellationConfig:
    levels: Tuple[int, ...] = (2, 3, 4, 5)
    top_k: int = 10
    max_radius: float = 128.0
    bucket_width: float = 2.0
    boundary_margin: float = 0.3
    rotation_window: float = 10.0  # degrees
    min_pairs: int = 4
    thresholds: ThresholdSet = field(default_factory=ThresholdSet)

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(level) for level in self.levels))
        if not self.levels or min(self.levels) < 1:
            raise ConfigError("constellation.levels must be 1-based level indices")
        if self.top_k < 1:
            raise ConfigError("constellation.top_k must be >= 1")
        if not self.bucket_width > 0:
            raise ConfigError("constellation.bucket_width must be positive")
        if not 0 <= self.boundary_margin < self.bucket_width / 2:
            raise ConfigError(
                "constellation.boundary_margin must be in [0, bucket_width/2)"
            )
        if not 0 < self.rotation_window < 360:
            raise ConfigError(
                "constellation.rotation_window must be in (0, 360) degrees"
            )
        if self.min_pairs < 1:
            raise ConfigError("constellation.min_pairs must be >= 1")


class Se2Transform:
    """Planar rigid transform x -> R(theta) x + t."""

    def __init__(self, theta: float = 0.0, t=(0.0, 0.0)):
        self.theta = wrap_angle(float(theta))  # type: float
        self.t = np.array(t, dtype=np.float64).reshape(2)  # type: np.ndarray

    def __repr__(self):
        return "<Se2Transform theta=%.6f t=(%.4f, %.4f)>" % (
            self.theta,
            self.t[0],
            self.t[1],
        )

    @classmethod
    def identity(cls) -> "Se2Transform":
        return cls(0.0, (0.0, 0.0))

    @classmethod
    def from_vector(cls, vector) -> "Se2Transform":
        """Build from (tx, ty, theta)."""
        tx, ty, theta = vector
        return cls(theta, (tx, ty))

    def as_vector(self) -> np.ndarray:
        return np.array([self.t[0], self.t[1], self.theta])

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.theta)

    def matrix(self) -> np.ndarray:
        m = np.eye(3)
        m[:2, :2] = self.rotation
        m[:2, 2] = self.t
        return m

    def apply(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.t

    def compose(self, other: "Se2Transform") -> "Se2Transform":
        """self after other."""
        return Se2Transform(self.theta + other.theta, self.rotation @ other.t + self.t)

    def inverse(self) -> "Se2Transform":
        return Se2Transform(-self.theta, -(self.rotation.T @ self.t))

    def scaled(self, factor: float) -> "Se2Transform":
        """Same rotation, translation multiplied by *factor* (e.g. pixels to meters)."""
        return Se2Transform(self.theta, self.t * factor)


class Peripheral(NamedTuple):
    ca: ContourAbstraction
    dist: float
    azimuth: float


class CandidatePair(NamedTuple):
    i: int
    j: int
    azimuth_diff: float


class Constellation:
    def __init__(
        self,
        anchor: ContourAbstraction,
        peripherals: List[Peripheral],
        bit_index: List[int],
        query_bit_index: List[Tuple[int, ...]],
    ):
        self.anchor = anchor  # type: ContourAbstraction
        self.peripherals = peripherals  # type: List[Peripheral]
        # one exact bit per peripheral, plus boundary neighbours on the query side
        self.bit_index = bit_index  # type: List[int]
        self.query_bit_index = query_bit_index  # type: List[Tuple[int, ...]]
        self.dist_bits = 0
        for bit in bit_index:
            self.dist_bits |= 1 << bit
        self.query_bits = 0
        for bits in query_bit_index:
            for bit in bits:
                self.query_bits |= 1 << bit
        self.members = {}  # type: Dict[int, List[int]]
        for j, bit in enumerate(bit_index):
            self.members.setdefault(bit, []).append(j)

    def __repr__(self):
        return "<Constellation anchor=(%d, %d) peripherals=%d>" % (
            self.anchor.level,
            self.anchor.seq,
            len(self.peripherals),
        )


class ConstellationMatch(NamedTuple):
    transform: Se2Transform
    theta_hat: float
    survivors: List[CandidatePair]
    n_pairs: int
    n_supporters: int


def sim_check(x1, x2, tol: Tolerance):
    """Scalar similarity: relative difference below t_p or absolute below t_a."""
    x1 = np.asarray(x1, dtype=np.float64)
    x2 = np.asarray(x2, dtype=np.float64)
    diff = np.abs(x1 - x2)
    scale = np.maximum(np.abs(x1), np.abs(x2))
    result = (diff == 0) | (diff < tol.t_a) | (diff < tol.t_p * scale)
    if result.ndim == 0:
        return bool(result)
    return result


def _scalars(ca: ContourAbstraction):
    return (ca.n_a, ca.h_m, ca.ecc_feat, ca.lam1, ca.lam2)


def check_anchor_sim(
    a: ContourAbstraction, b: ContourAbstraction, th: ThresholdSet
) -> bool:
    if a.level != b.level:
        return False
    tolerances = (th.n_a, th.h_m, th.ecc, th.lam1, th.lam2)
    return all(
        sim_check(x1, x2, tol)
        for x1, x2, tol in zip(_scalars(a), _scalars(b), tolerances)
    )


def distance_bucket(d: float, width: float) -> int:
    return min(int(d // width), BITS_PER_LEVEL - 1)


def distance_bits(
    d: float, level: int, cfg: ConstellationConfig
) -> Tuple[int, Tuple[int, ...]]:
    """Return (stored bit, query bits) of phi(d, level).

    The query side also sets the neighbouring bucket when *d* lies within
    ``boundary_margin`` of a bucket edge.
    """
    bucket = distance_bucket(d, cfg.bucket_width)
    base = (level - 1) * BITS_PER_LEVEL
    buckets = [bucket]
    if bucket > 0 and d - bucket * cfg.bucket_width < cfg.boundary_margin:
        buckets.append(bucket - 1)
    upper = (bucket + 1) * cfg.bucket_width
    if bucket < BITS_PER_LEVEL - 1 and upper - d < cfg.boundary_margin:
        buckets.append(bucket + 1)
    return base + bucket, tuple(base + b for b in sorted(buckets))


def build_constellation(
    anchor: ContourAbstraction,
    scan_cas: Union[Dict[int, List[ContourAbstraction]], Sequence[ContourAbstraction]],
    cfg: ConstellationConfig,
) -> Constellation:
    """Anchor plus the top-k CAs of each configured level within max_radius."""
    if not isinstance(scan_cas, dict):
        scan_cas = group_by_level(scan_cas)
    peripherals = []
    bit_index = []
    query_bit_index = []
    for level in cfg.levels:
        for ca in scan_cas.get(level, [])[: cfg.top_k]:
            if ca.level == anchor.level and ca.seq == anchor.seq:
                continue
            dx, dy = ca.x_c - anchor.x_c
            dist = math.hypot(dx, dy)
            if dist > cfg.max_radius:
                continue
            peripherals.append(Peripheral(ca, dist, wrap_angle(math.atan2(dy, dx))))
            bit, query_bits = distance_bits(dist, ca.level, cfg)
            bit_index.append(bit)
            query_bit_index.append(query_bits)
    return Constellation(anchor, peripherals, bit_index, query_bit_index)


def pair_by_distance(
    c1: Constellation, c2: Constellation, th: ThresholdSet
) -> List[CandidatePair]:
    """Pair peripherals whose distance bits coincide and whose distances pass SC.

    *c1* is the query side. The result is sorted by the wrapped azimuth
    difference psi(c1 peripheral) - psi(c2 peripheral).
    """
    common = c1.query_bits & c2.dist_bits
    if not common:
        return []
    pairs = []
    for i, bits in enumerate(c1.query_bit_index):
        p1 = c1.peripherals[i]
        for bit in bits:
            if not (common >> bit) & 1:
                continue
            for j in c2.members[bit]:
                p2 = c2.peripherals[j]
                if sim_check(p1.dist, p2.dist, th.dist):
                    diff = wrap_angle(p1.azimuth - p2.azimuth)
                    pairs.append(CandidatePair(i, j, diff))
    pairs.sort(key=lambda p: (p.azimuth_diff, p.i, p.j))
    return pairs


def circular_mean(angles) -> float:
    angles = np.asarray(angles, dtype=np.float64)
    return wrap_angle(math.atan2(np.sin(angles).sum(), np.cos(angles).sum()))


def vote_rotation(
    pairs: Sequence[CandidatePair], window: float
) -> Tuple[float, List[CandidatePair]]:
    """Slide an angular window of *window* radians over the sorted circular list.

    Return (theta_hat, supporters) for the placement covering the most pairs;
    ties go to the smaller |theta_hat|. An empty list gives (0.0, []).
    """
    if not pairs:
        return 0.0, []
    pairs = sorted(pairs, key=lambda p: p.azimuth_diff)
    diffs = np.array([p.azimuth_diff for p in pairs])
    n = len(diffs)
    extended = np.concatenate([diffs, diffs + 2 * np.pi])
    starts = np.arange(n)
    ends = np.searchsorted(extended, diffs + window, side="right")
    ends = np.minimum(ends, starts + n)
    counts = ends - starts
    best = int(counts.max())

    theta_hat, supporters = None, None
    for start in np.nonzero(counts == best)[0]:
        members = [pairs[k % n] for k in range(start, start + best)]
        theta = circular_mean([p.azimuth_diff for p in members])
        if theta_hat is None or abs(theta) < abs(theta_hat):
            theta_hat, supporters = theta, members
    return theta_hat, supporters


def check_pairwise(
    c1: Constellation,
    c2: Constellation,
    supporters: Sequence[CandidatePair],
    th: ThresholdSet,
    min_pairs: int,
    theta_hat: Optional[float] = None,
) -> Tuple[bool, List[CandidatePair]]:
    """Run SC on the five scalars of every supporting pair.

    Each peripheral keeps at most one partner; conflicts go to the pair whose
    azimuth difference is closest to *theta_hat*.
    """
    similar = [
        p
        for p in supporters
        if check_anchor_sim(c1.peripherals[p.i].ca, c2.peripherals[p.j].ca, th)
    ]
    if not similar:
        return False, []
    if theta_hat is None:
        theta_hat = circular_mean([p.azimuth_diff for p in similar])
    similar.sort(key=lambda p: (abs(wrap_angle(p.azimuth_diff - theta_hat)), p.i, p.j))
    used_i, used_j = set(), set()
    survivors = []
    for p in similar:
        if p.i in used_i or p.j in used_j:
            continue
        used_i.add(p.i)
        used_j.add(p.j)
        survivors.append(p)
    survivors.sort(key=lambda p: (p.azimuth_diff, p.i, p.j))
    return len(survivors) >= min_pairs, survivors


def estimate_transform(
    anchor1: ContourAbstraction, anchor2: ContourAbstraction, theta_hat: float
) -> Se2Transform:
    """Rotation theta_hat with anchor2.x_c mapped onto anchor1.x_c."""
    t = anchor1.x_c - rotation_matrix(theta_hat) @ anchor2.x_c
    return Se2Transform(theta_hat, t)


def match_constellations(
    c1: Constellation, c2: Constellation, cfg: ConstellationConfig
) -> Optional[ConstellationMatch]:
    th = cfg.thresholds
    if not check_anchor_sim(c1.anchor, c2.anchor, th):
        return None
    pairs = pair_by_distance(c1, c2, th)
    theta_hat, supporters = vote_rotation(pairs, math.radians(cfg.rotation_window))
    if len(supporters) < cfg.min_pairs:
        return None
    passed, survivors = check_pairwise(c1, c2, supporters, th, cfg.min_pairs, theta_hat)
    if not passed:
        return None
    # votes rejected by the pairwise check no longer bias the rotation
    theta_hat = circular_mean([p.azimuth_diff for p in survivors])
    return ConstellationMatch(
        transform=estimate_transform(c1.anchor, c2.anchor, theta_hat),
        theta_hat=theta_hat,
        survivors=survivors,
        n_pairs=len(pairs),
        n_supporters=len(supporters),
    )
