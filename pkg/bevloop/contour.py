"""Connected contours of sliced BEV levels and their statistical abstractions."""
import logging
import math
from dataclasses import dataclass, replace
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np
from scipy import ndimage

from bevloop.bev import BevImage, LevelMask, slice_level
from bevloop.utils import ConfigError

logger = logging.getLogger(__name__)

EIGHT_CONNECTED = np.ones((3, 3), dtype=bool)


@dataclass(frozen=True)
class ContourConfig:
    min_pixels: int = 3

    def __post_init__(self):
        if self.min_pixels < 1:
            raise ConfigError("contour.min_pixels must be >= 1: %r" % self.min_pixels)


class RawContour:
    def __init__(self, level: int, seq: int, pixels: np.ndarray):
        self.level = level  # type: int
        self.seq = seq  # type: int
        self.pixels = pixels  # type: np.ndarray  # (n, 3): p_x, p_y, p_z

    def __len__(self):
        return len(self.pixels)

    def __repr__(self):
        return "<RawContour level=%d seq=%d pixels=%d>" % (
            self.level,
            self.seq,
            len(self),
        )


@dataclass(frozen=True, eq=False)
class ContourAbstraction:
    level: int
    seq: int
    n_a: int
    h_m: float
    x_c: np.ndarray
    x_m: np.ndarray
    cov: np.ndarray
    v1: np.ndarray
    v2: np.ndarray
    lam1: float
    lam2: float
    ecc_feat: float

    def __repr__(self):
        return "<ContourAbstraction level=%d seq=%d n_a=%d x_c=(%.2f, %.2f)>" % (
            self.level,
            self.seq,
            self.n_a,
            self.x_c[0],
            self.x_c[1],
        )


def eig2x2(cov) -> Tuple[np.ndarray, np.ndarray, float, float]:
    """Closed-form eigendecomposition of a symmetric 2x2 matrix.

    Return (v1, v2, lam1, lam2) with lam1 >= lam2 and v1, v2 orthonormal.
    """
    cov = np.asarray(cov, dtype=np.float64)
    a, c = cov[0, 0], cov[1, 1]
    b = 0.5 * (cov[0, 1] + cov[1, 0])
    half_diff = 0.5 * (a - c)
    radius = math.hypot(half_diff, b)
    mean = 0.5 * (a + c)
    phi = 0.5 * math.atan2(b, half_diff)
    v1 = np.array([math.cos(phi), math.sin(phi)])
    v2 = np.array([-v1[1], v1[0]])
    return v1, v2, mean + radius, mean - radius


def _make_abstraction(level, seq, n_a, h_m, x_c, x_m, cov) -> ContourAbstraction:
    cov = 0.5 * (cov + cov.T)
    v1, v2, lam1, lam2 = eig2x2(cov)
    return ContourAbstraction(
        level=level,
        seq=seq,
        n_a=int(n_a),
        h_m=float(h_m),
        x_c=x_c,
        x_m=x_m,
        cov=cov,
        v1=v1,
        v2=v2,
        lam1=max(lam1, 0.0),
        lam2=max(lam2, 0.0),
        ecc_feat=float(np.linalg.norm(x_c - x_m)),
    )


def _label(mask: LevelMask):
    labels, count = ndimage.label(mask.bits, structure=EIGHT_CONNECTED)
    rows, cols = np.nonzero(labels)
    ids = labels[rows, cols] - 1
    order = np.argsort(ids, kind="stable")
    return rows[order], cols[order], ids[order], count


def extract_contours(mask: LevelMask, min_pixels: int = 3) -> List[RawContour]:
    """Maximal 8-connected components of *mask* with at least *min_pixels* cells.

    Each pixel row is (p_x, p_y, p_z) with the BEV height of its cell.
    """
    rows, cols, ids, count = _label(mask)
    if count == 0:
        return []
    image = mask.image
    pixels = np.column_stack(
        [image.pixel_coordinates(rows, cols), image.cells[rows, cols]]
    )
    sizes = np.bincount(ids, minlength=count)
    contours = []
    for seq, chunk in enumerate(np.split(pixels, np.cumsum(sizes)[:-1]), start=1):
        if len(chunk) >= min_pixels:
            contours.append(RawContour(mask.level, seq, chunk))
    return contours


def summarize(raw: RawContour) -> ContourAbstraction:
    pixels = np.asarray(raw.pixels, dtype=np.float64)
    n_a = len(pixels)
    if n_a < 1:
        raise ValueError("cannot summarize an empty contour")
    xy, z = pixels[:, :2], pixels[:, 2]
    x_c = xy.mean(axis=0)
    x_m = (z[:, None] * xy).mean(axis=0)
    if n_a > 1:
        centered = xy - x_c
        cov = centered.T @ centered / (n_a - 1)
    else:
        cov = np.zeros((2, 2))
    return _make_abstraction(raw.level, raw.seq, n_a, z.mean(), x_c, x_m, cov)


def rank_contours(cas: Iterable[ContourAbstraction]) -> List[ContourAbstraction]:
    """Sort per level by descending n_a (ties: ascending x_c), renumber seq from 1."""
    cas = list(cas)
    ranked = []
    for level in sorted({ca.level for ca in cas}):
        group = sorted(
            (ca for ca in cas if ca.level == level),
            key=lambda ca: (-ca.n_a, float(ca.x_c[0]), float(ca.x_c[1])),
        )
        ranked.extend(replace(ca, seq=seq) for seq, ca in enumerate(group, start=1))
    return ranked


def group_by_level(
    cas: Iterable[ContourAbstraction],
) -> Dict[int, List[ContourAbstraction]]:
    groups = {}  # type: Dict[int, List[ContourAbstraction]]
    for ca in cas:
        groups.setdefault(ca.level, []).append(ca)
    return groups


def abstract_mask(mask: LevelMask, min_pixels: int = 3) -> List[ContourAbstraction]:
    """summarize() over extract_contours(), computed per label in bulk."""
    rows, cols, ids, count = _label(mask)
    if count == 0:
        return []
    image = mask.image
    xy = image.pixel_coordinates(rows, cols)
    z = image.cells[rows, cols]
    n = np.bincount(ids, minlength=count).astype(np.float64)

    def per_label(weights):
        return np.bincount(ids, weights=weights, minlength=count)

    x_c = np.column_stack([per_label(xy[:, 0]), per_label(xy[:, 1])]) / n[:, None]
    x_m = np.column_stack([per_label(z * xy[:, 0]), per_label(z * xy[:, 1])])
    x_m /= n[:, None]
    h_m = per_label(z) / n
    centered = xy - x_c[ids]
    denom = np.maximum(n - 1.0, 1.0)
    cxx = per_label(centered[:, 0] * centered[:, 0]) / denom
    cxy = per_label(centered[:, 0] * centered[:, 1]) / denom
    cyy = per_label(centered[:, 1] * centered[:, 1]) / denom

    cas = []
    for k in np.nonzero(n >= min_pixels)[0]:
        cov = np.array([[cxx[k], cxy[k]], [cxy[k], cyy[k]]])
        cas.append(
            _make_abstraction(mask.level, int(k) + 1, n[k], h_m[k], x_c[k], x_m[k], cov)
        )
    return cas


def abstract_image(
    img: BevImage, levels: Sequence[int], min_pixels: int = 3
) -> Dict[int, List[ContourAbstraction]]:
    """Ranked contour abstractions of *img* for every level in *levels*."""
    result = {}
    for level in levels:
        mask = slice_level(img, level)
        result[level] = rank_contours(abstract_mask(mask, min_pixels))
    logger.debug(
        "contours per level: %s",
        ", ".join("%d:%d" % (level, len(cas)) for level, cas in result.items()),
    )
    return result
