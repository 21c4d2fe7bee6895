"""2.5D Gaussian mixtures built from contour abstractions.

Each scan becomes a weighted set of planar Gaussians grouped by slice level.
Components of different levels never interact, so every density product below
is evaluated per level and summed. Scores are normalized correlations
``cross / sqrt(self1 * self2)`` in ``[0, 1]``.
"""
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Dict, Iterable, NamedTuple, Optional, Tuple, Union

import numpy as np
from scipy import optimize as scipy_optimize

from bevloop.constellation import Se2Transform
from bevloop.contour import ContourAbstraction
from bevloop.utils import ConfigError, EmptyMixtureError, SingularCovarianceError

logger = logging.getLogger(__name__)

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class GmmConfig:
    levels: Tuple[int, ...] = (2, 3, 4, 5)
    top_n: Optional[int] = None
    prune_dist: float = 30.0
    min_eigenvalue: float = 0.01
    regularization: float = 0.25
    max_iterations: int = 20
    gtol: float = 1e-6
    xtol: float = 1e-7
    initial_trust_radius: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "levels", tuple(int(level) for level in self.levels))
        if not self.levels or min(self.levels) < 1:
            raise ConfigError("gmm.levels must be 1-based level indices")
        if self.top_n is not None and self.top_n < 1:
            raise ConfigError("gmm.top_n must be >= 1 or null")
        if not self.prune_dist > 0:
            raise ConfigError("gmm.prune_dist must be positive")
        if self.regularization <= 0 or self.min_eigenvalue < 0:
            raise ConfigError("gmm covariance regularization must be positive")
        if self.max_iterations < 1 or not (self.gtol > 0 and self.xtol > 0):
            raise ConfigError("gmm optimizer limits must be positive")


LevelComponents = Tuple[np.ndarray, np.ndarray, np.ndarray]


class Gmm25D:
    """Per-level arrays of weights (k,), means (k, 2) and covariances (k, 2, 2)."""

    def __init__(self, components: Dict[int, LevelComponents], total_na: float = 0.0):
        self.components = {}  # type: Dict[int, LevelComponents]
        for level in sorted(components):
            weights, means, covs = components[level]
            weights = np.asarray(weights, dtype=np.float64).reshape(-1)
            means = np.asarray(means, dtype=np.float64).reshape(-1, 2)
            covs = np.asarray(covs, dtype=np.float64).reshape(-1, 2, 2)
            if not len(weights) == len(means) == len(covs):
                raise ValueError("level %d: component arrays differ in length" % level)
            if len(weights):
                self.components[level] = (weights, means, covs)
        self.total_na = total_na

    def __repr__(self):
        return "<Gmm25D levels=%r components=%d>" % (self.levels, len(self))

    def __len__(self):
        return sum(len(w) for w, _, _ in self.components.values())

    @property
    def levels(self) -> Tuple[int, ...]:
        return tuple(self.components)

    @property
    def total_weight(self) -> float:
        return float(sum(w.sum() for w, _, _ in self.components.values()))

    def transformed(self, transform: Se2Transform) -> "Gmm25D":
        rotation = transform.rotation
        return Gmm25D(
            {
                level: (w, transform.apply(mu), rotate_covariances(sigma, rotation))
                for level, (w, mu, sigma) in self.components.items()
            },
            self.total_na,
        )

    def density(self, level: int, points) -> np.ndarray:
        """Sub-mixture density of *level* at (m, 2) points."""
        points = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        if level not in self.components:
            return np.zeros(len(points))
        weights, means, covs = self.components[level]
        diff = points[:, None, :] - means[None, :, :]
        values = _gaussian(diff, np.broadcast_to(covs, diff.shape[:2] + (2, 2)))
        return values @ weights

    @cached_property
    def self_term(self) -> float:
        return self_term(self)

    @cached_property
    def rms_radius(self) -> float:
        means = np.concatenate(
            [mu for _, mu, _ in self.components.values()] or [np.zeros((0, 2))]
        )
        if not len(means):
            return 1.0
        return max(float(np.sqrt(np.mean(np.sum(means ** 2, axis=1)))), 1.0)


def rotate_covariances(covs: np.ndarray, rotation: np.ndarray) -> np.ndarray:
    return np.einsum("ij,kjl,ml->kim", rotation, covs, rotation)


def _gaussian(diff: np.ndarray, covs: np.ndarray) -> np.ndarray:
    """N(diff | 0, covs) for stacked 2-vectors and 2x2 covariances."""
    a = covs[..., 0, 0]
    b = covs[..., 0, 1]
    c = covs[..., 1, 0]
    d = covs[..., 1, 1]
    det = a * d - b * c
    if np.any(det <= 0):
        raise SingularCovarianceError(
            "non-positive covariance determinant in Gaussian product"
        )
    dx, dy = diff[..., 0], diff[..., 1]
    q = (d * dx * dx - (b + c) * dx * dy + a * dy * dy) / det
    return np.exp(-0.5 * q) / (TWO_PI * np.sqrt(det))


def _regularized(ca: ContourAbstraction, cfg: GmmConfig) -> np.ndarray:
    cov = np.array(ca.cov, dtype=np.float64)
    if ca.lam2 < cfg.min_eigenvalue:
        cov = cov + cfg.regularization * np.eye(2)
    return cov


def build_gmm(
    cas: Union[Dict[int, Iterable[ContourAbstraction]], Iterable[ContourAbstraction]],
    levels: Optional[Iterable[int]] = None,
    cfg: Optional[GmmConfig] = None,
) -> Gmm25D:
    """Mixture of the ranked CAs at *levels*.

    Weights are n_a / N_a over the included CAs.
    """
    cfg = cfg or GmmConfig()
    levels = set(cfg.levels if levels is None else levels)
    if isinstance(cas, dict):
        cas = [ca for group in cas.values() for ca in group]
    per_level = {}  # type: Dict[int, list]
    for ca in cas:
        if ca.level in levels:
            per_level.setdefault(ca.level, []).append(ca)
    if cfg.top_n is not None:
        per_level = {
            level: sorted(group, key=lambda ca: ca.seq)[: cfg.top_n]
            for level, group in per_level.items()
        }
    total = float(sum(ca.n_a for group in per_level.values() for ca in group))
    if total <= 0:
        raise EmptyMixtureError("no contour abstractions at levels %r" % sorted(levels))
    components = {}
    for level, group in per_level.items():
        components[level] = (
            np.array([ca.n_a / total for ca in group]),
            np.array([ca.x_c for ca in group]),
            np.array([_regularized(ca, cfg) for ca in group]),
        )
    return Gmm25D(components, total)


def gauss_product_integral(mu1, sigma1, mu2, sigma2) -> float:
    """Closed-form integral of N(x|mu1, sigma1) N(x|mu2, sigma2) over the plane."""
    diff = np.asarray(mu1, dtype=np.float64) - np.asarray(mu2, dtype=np.float64)
    covs = np.asarray(sigma1, dtype=np.float64) + np.asarray(sigma2, dtype=np.float64)
    return float(_gaussian(diff, covs))


def cross_term(
    g1: Gmm25D,
    g2: Gmm25D,
    transform: Optional[Se2Transform] = None,
    prune_dist: float = math.inf,
) -> float:
    """Same-level sum of w_i w_j times the product integral of g1_i and T(g2_j)."""
    transform = transform or Se2Transform.identity()
    rotation = transform.rotation
    total = 0.0
    for level in g1.levels:
        if level not in g2.components:
            continue
        w1, mu1, s1 = g1.components[level]
        w2, mu2, s2 = g2.components[level]
        diff = mu1[:, None, :] - transform.apply(mu2)[None, :, :]
        covs = s1[:, None] + rotate_covariances(s2, rotation)[None, :]
        weights = w1[:, None] * w2[None, :]
        if math.isinf(prune_dist):
            total += float(np.sum(weights * _gaussian(diff, covs)))
            continue
        near = np.hypot(diff[..., 0], diff[..., 1]) <= prune_dist
        if near.any():
            total += float(weights[near] @ _gaussian(diff[near], covs[near]))
    return total


def self_term(g: Gmm25D) -> float:
    if not len(g):
        raise EmptyMixtureError("self term of an empty mixture")
    return cross_term(g, g, Se2Transform.identity(), math.inf)


def l2_distance(
    g1: Gmm25D, g2: Gmm25D, transform: Optional[Se2Transform] = None
) -> float:
    """Squared L2 distance between g1 and T(g2); self terms are transform invariant."""
    return g1.self_term + g2.self_term - 2.0 * cross_term(g1, g2, transform)


class CorrelationResult(NamedTuple):
    transform: Se2Transform
    score: float
    cross_term: float
    self1: float
    self2: float


def correlation(
    g1: Gmm25D,
    g2: Gmm25D,
    transform: Optional[Se2Transform] = None,
    prune_dist: float = math.inf,
) -> CorrelationResult:
    """Normalized correlation; a finite *prune_dist* gives a lower bound."""
    if not len(g1) or not len(g2):
        raise EmptyMixtureError("correlation needs two non-empty mixtures")
    transform = transform or Se2Transform.identity()
    cross = cross_term(g1, g2, transform, prune_dist)
    self1, self2 = g1.self_term, g2.self_term
    score = cross / math.sqrt(self1 * self2)
    return CorrelationResult(transform, score, cross, self1, self2)


def _derivative_rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[-s, -c], [c, -s]])


class TransformObjective:
    """Negative normalized cross term over x = (tx, ty, yaw).

    The active component pairs are chosen once with the proximity test at
    *initial* and stay fixed, so the objective is smooth in x.
    """

    def __init__(
        self,
        g1: Gmm25D,
        g2: Gmm25D,
        initial: Optional[Se2Transform] = None,
        prune_dist: float = math.inf,
    ):
        initial = initial or Se2Transform.identity()
        self.norm = math.sqrt(g1.self_term * g2.self_term)
        weights, mu_i, cov_i, mu_j, cov_j = [], [], [], [], []
        for level in g1.levels:
            if level not in g2.components:
                continue
            w1, m1, s1 = g1.components[level]
            w2, m2, s2 = g2.components[level]
            diff = m1[:, None, :] - initial.apply(m2)[None, :, :]
            ia, ib = np.nonzero(np.hypot(diff[..., 0], diff[..., 1]) <= prune_dist)
            weights.append(w1[ia] * w2[ib])
            mu_i.append(m1[ia])
            cov_i.append(s1[ia])
            mu_j.append(m2[ib])
            cov_j.append(s2[ib])
        if weights:
            self.weights = np.concatenate(weights)
            self.mu_i = np.concatenate(mu_i)
            self.cov_i = np.concatenate(cov_i)
            self.mu_j = np.concatenate(mu_j)
            self.cov_j = np.concatenate(cov_j)
        else:
            self.weights = np.zeros(0)
            self.mu_i = self.mu_j = np.zeros((0, 2))
            self.cov_i = self.cov_j = np.zeros((0, 2, 2))

    def __len__(self):
        return len(self.weights)

    def _terms(self, x):
        tx, ty, theta = x
        rotation = Se2Transform(theta).rotation
        rotated_cov = rotate_covariances(self.cov_j, rotation)
        covs = self.cov_i + rotated_cov
        diff = self.mu_i - self.mu_j @ rotation.T - np.array([tx, ty])
        return rotation, covs, diff, self.weights * _gaussian(diff, covs)

    def value(self, x) -> float:
        if not len(self):
            return 0.0
        return -float(self._terms(x)[3].sum()) / self.norm

    def gradient(self, x) -> np.ndarray:
        if not len(self):
            return np.zeros(3)
        theta = x[2]
        rotation, covs, diff, values = self._terms(x)
        inverse = np.linalg.inv(covs)
        a = np.einsum("kij,kj->ki", inverse, diff)
        d_rotation = _derivative_rotation(theta)
        d_cov = np.einsum("ij,kjl,ml->kim", d_rotation, self.cov_j, rotation)
        d_cov = d_cov + np.swapaxes(d_cov, 1, 2)
        d_mean = self.mu_j @ d_rotation.T
        d_theta = (
            np.einsum("ki,ki->k", a, d_mean)
            + 0.5 * np.einsum("ki,kij,kj->k", a, d_cov, a)
            - 0.5 * np.einsum("kij,kji->k", inverse, d_cov)
        )
        grad = np.array(
            [values @ a[:, 0], values @ a[:, 1], values @ d_theta]
        )
        return -grad / self.norm


def optimize(
    g1: Gmm25D,
    g2: Gmm25D,
    initial: Se2Transform,
    cfg: Optional[GmmConfig] = None,
) -> CorrelationResult:
    """Maximize the correlation of g1 and T(g2) starting from *initial*.

    Returns the best iterate seen; its score is never below the score at
    *initial* over the same active pairs.
    """
    cfg = cfg or GmmConfig()
    objective = TransformObjective(g1, g2, initial, cfg.prune_dist)
    self1, self2 = g1.self_term, g2.self_term
    if not len(objective):
        return CorrelationResult(initial, 0.0, 0.0, self1, self2)

    # yaw is scaled to pixels of arc so all three variables share a unit
    scale = g2.rms_radius
    to_x = np.array([1.0, 1.0, 1.0 / scale])
    best = {"value": objective.value(initial.as_vector()), "x": initial.as_vector()}

    def fun(z):
        x = z * to_x
        value = objective.value(x)
        if value < best["value"]:
            best["value"], best["x"] = value, x
        return value

    def jac(z):
        return objective.gradient(z * to_x) * to_x

    def hess(z):
        h = scipy_optimize.approx_fprime(z, jac, 1e-6)
        return 0.5 * (h + h.T)

    z0 = initial.as_vector() / to_x
    last = {"z": z0}

    def stop_on_small_step(intermediate_result):
        step = np.linalg.norm(intermediate_result.x - last["z"])
        last["z"] = np.copy(intermediate_result.x)
        # rejected steps leave x unchanged
        if 0 < step < cfg.xtol:
            raise StopIteration

    result = scipy_optimize.minimize(
        fun,
        z0,
        method="trust-exact",
        jac=jac,
        hess=hess,
        callback=stop_on_small_step,
        options={
            "gtol": cfg.gtol,
            "maxiter": cfg.max_iterations,
            "initial_trust_radius": cfg.initial_trust_radius,
        },
    )
    logger.debug(
        "gmm optimize: %d pairs, %d iterations, status %r, score %.6f",
        len(objective),
        result.nit,
        result.message,
        -best["value"],
    )
    transform = Se2Transform.from_vector(best["x"])
    score = -best["value"]
    return CorrelationResult(transform, score, score * objective.norm, self1, self2)
