"""Single-candidate loop evaluation: PR curve, max F1 and metric pose errors.

Each query reports at most one candidate. With a score threshold ``t`` the
query is a TP when the candidate is closer than ``l3`` meters, an FP when it
is farther, an FN when nothing is reported although a valid past pose lies
within ``l3``, and a TN otherwise. Past poses are valid when they lie outside
the exclusion window.
"""
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass
from typing import Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy.spatial.transform import Rotation

from bevloop.constellation import Se2Transform
from bevloop.utils import (
    STAGES,
    ConfigError,
    SchemaError,
    create_format_error,
    wrap_angle,
)

logger = logging.getLogger(__name__)

TP, FP, FN, TN, SKIPPED = "TP", "FP", "FN", "TN", "skipped"
OUTCOMES = (TP, FP, FN, TN, SKIPPED)

PREDICTION_COLUMNS = ("query_id", "candidate_id", "score", "tx_m", "ty_m", "yaw_rad")
TIMING_COLUMNS = (
    ("query_id",) + tuple("%s_ms" % stage for stage in STAGES) + ("total_ms",)
)
PR_COLUMNS = ("threshold", "precision", "recall", "f1")

PR_CURVE_FILE = "pr_curve.csv"
SUMMARY_FILE = "summary.yaml"
REPORT_FILE = "report.json"


@dataclass(frozen=True)
class EvalConfig:
    l3: float = 5.0
    exclusion_window: int = 150
    threshold_sweep: Optional[Tuple[float, ...]] = None
    max_tilt_deg: float = 3.0
    fp_box_trans: float = 1.0
    fp_box_rot_deg: float = 1.0

    def __post_init__(self):
        if not self.l3 > 0:
            raise ConfigError("eval.l3 must be positive: %r" % self.l3)
        if self.exclusion_window < 0:
            raise ConfigError("eval.exclusion_window must be >= 0")
        if self.threshold_sweep is not None:
            object.__setattr__(
                self, "threshold_sweep", tuple(float(t) for t in self.threshold_sweep)
            )


class Prediction(NamedTuple):
    query_id: int
    candidate_id: Optional[int] = None
    score: Optional[float] = None
    pose: Optional[Se2Transform] = None

    @property
    def has_candidate(self) -> bool:
        return self.candidate_id is not None


def _format_float(value: float) -> str:
    return "%.9g" % value


class PredictionLog:
    """One prediction per evaluated query, in query order."""

    def __init__(self, entries: Iterable[Prediction] = ()):
        self.entries = list(entries)  # type: List[Prediction]

    def __len__(self):
        return len(self.entries)

    def __iter__(self) -> Iterator[Prediction]:
        return iter(self.entries)

    def __repr__(self):
        return "<PredictionLog queries=%d candidates=%d>" % (
            len(self),
            sum(entry.has_candidate for entry in self.entries),
        )

    def append(self, prediction: Prediction):
        self.entries.append(prediction)

    def write_csv(self, path):
        with open(path, "w", newline="") as fd:
            writer = csv.writer(fd, lineterminator="\n")
            writer.writerow(PREDICTION_COLUMNS)
            for entry in self.entries:
                if not entry.has_candidate:
                    writer.writerow([entry.query_id, "", "", "", "", ""])
                    continue
                tx, ty, yaw = entry.pose.as_vector()
                writer.writerow(
                    [
                        entry.query_id,
                        entry.candidate_id,
                        _format_float(entry.score),
                        _format_float(tx),
                        _format_float(ty),
                        _format_float(yaw),
                    ]
                )

    @classmethod
    def read_csv(cls, path) -> "PredictionLog":
        log = cls()
        for line, row in _read_rows(path, PREDICTION_COLUMNS):
            try:
                query_id = int(row["query_id"])
                if not row["candidate_id"]:
                    log.append(Prediction(query_id))
                    continue
                pose = Se2Transform(
                    float(row["yaw_rad"]), (float(row["tx_m"]), float(row["ty_m"]))
                )
                log.append(
                    Prediction(
                        query_id, int(row["candidate_id"]), float(row["score"]), pose
                    )
                )
            except ValueError as e:
                raise create_format_error(str(e), path, line=line) from e
        return log


def _read_rows(path, columns: Sequence[str]) -> Iterator[Tuple[int, Dict[str, str]]]:
    with open(path, newline="") as fd:
        reader = csv.DictReader(fd)
        header = reader.fieldnames or []
        for column in columns:
            if column not in header:
                raise create_format_error(
                    "missing column %r" % column, path, line=1, error_class=SchemaError
                )
        for column in header:
            if column not in columns:
                raise create_format_error(
                    "unexpected column %r" % column,
                    path,
                    line=1,
                    error_class=SchemaError,
                )
        for row in reader:
            yield reader.line_num, row


def write_timing_csv(path, rows: Iterable[Tuple[int, Dict[str, float]]]):
    with open(path, "w", newline="") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(TIMING_COLUMNS)
        for query_id, timings in rows:
            values = [timings.get(stage, 0.0) for stage in STAGES]
            cells = ["%.3f" % v for v in values] + ["%.3f" % sum(values)]
            writer.writerow([query_id] + cells)


def read_timing_csv(path) -> List[Dict[str, float]]:
    rows = []
    for line, row in _read_rows(path, TIMING_COLUMNS):
        try:
            rows.append({column: float(row[column]) for column in TIMING_COLUMNS[1:]})
        except ValueError as e:
            raise create_format_error(str(e), path, line=line) from e
    return rows


def summarize_timings(rows: Sequence[Dict[str, float]]) -> Dict[str, Dict[str, float]]:
    """Mean and max milliseconds per stage column."""
    summary = {}
    for column in TIMING_COLUMNS[1:]:
        values = np.array([row[column] for row in rows], dtype=np.float64)
        if len(values):
            summary[column] = {"mean": float(values.mean()), "max": float(values.max())}
    return summary


def check_scan_ids(
    log: PredictionLog, gt_poses: Sequence[Optional[np.ndarray]], path=None
):
    for entry in log:
        for scan_id in (entry.query_id, entry.candidate_id):
            if scan_id is not None and not 0 <= scan_id < len(gt_poses):
                raise create_format_error(
                    "scan id %d outside the %d ground-truth poses"
                    % (scan_id, len(gt_poses)),
                    path,
                )


def _position(pose) -> np.ndarray:
    return np.asarray(pose, dtype=np.float64)[:3, 3]


def positions(gt_poses: Sequence[Optional[np.ndarray]]) -> np.ndarray:
    """(n, 3) translations; rows of missing poses are NaN."""
    result = np.full((len(gt_poses), 3), np.nan)
    for k, pose in enumerate(gt_poses):
        if pose is not None:
            result[k] = _position(pose)
    return result


def has_revisit(
    query_id: int,
    gt_poses: Sequence[Optional[np.ndarray]],
    cfg: EvalConfig,
    known_positions: Optional[np.ndarray] = None,
) -> bool:
    """Whether a valid past pose lies within l3 of the query."""
    last = query_id - cfg.exclusion_window
    if last <= 0 or gt_poses[query_id] is None:
        return False
    if known_positions is None:
        known_positions = positions(gt_poses)
    past = known_positions[:last]
    past = past[~np.isnan(past).any(axis=1)]
    if not len(past):
        return False
    distances = np.linalg.norm(past - known_positions[query_id], axis=1)
    return bool(distances.min() < cfg.l3)


def candidate_distance(
    prediction: Prediction, gt_poses: Sequence[Optional[np.ndarray]]
) -> Optional[float]:
    query = gt_poses[prediction.query_id]
    candidate = gt_poses[prediction.candidate_id]
    if query is None or candidate is None:
        return None
    return float(np.linalg.norm(_position(query) - _position(candidate)))


def classify(
    prediction: Prediction,
    gt_poses: Sequence[Optional[np.ndarray]],
    cfg: EvalConfig,
    threshold: float,
    known_positions: Optional[np.ndarray] = None,
) -> str:
    if gt_poses[prediction.query_id] is None:
        return SKIPPED
    if prediction.has_candidate and prediction.score >= threshold:
        distance = candidate_distance(prediction, gt_poses)
        if distance is None:
            return SKIPPED
        return TP if distance < cfg.l3 else FP
    revisit = has_revisit(prediction.query_id, gt_poses, cfg, known_positions)
    return FN if revisit else TN


class LabeledLog:
    """Per-query arrays that make a threshold sweep a handful of vector ops."""

    def __init__(self, log: PredictionLog, gt_poses, cfg: EvalConfig):
        self.log = log
        n = len(log)
        self.query_valid = np.array(
            [gt_poses[e.query_id] is not None for e in log], dtype=bool
        )
        self.scores = np.full(n, -np.inf)
        self.distances = np.full(n, np.nan)
        self.has_revisit = np.zeros(n, dtype=bool)
        known_positions = positions(gt_poses)
        for k, entry in enumerate(log):
            self.has_revisit[k] = has_revisit(
                entry.query_id, gt_poses, cfg, known_positions
            )
            if entry.has_candidate:
                self.scores[k] = entry.score
                distance = candidate_distance(entry, gt_poses)
                if distance is not None:
                    self.distances[k] = distance
        self.l3 = cfg.l3

    def __len__(self):
        return len(self.scores)

    def counts(self, threshold: float) -> Dict[str, int]:
        predicted = self.scores >= threshold
        known = ~np.isnan(self.distances)
        near = known & (np.nan_to_num(self.distances, nan=np.inf) < self.l3)
        valid = self.query_valid
        counts = {
            TP: predicted & valid & near,
            FP: predicted & valid & known & ~near,
            FN: ~predicted & valid & self.has_revisit,
            TN: ~predicted & valid & ~self.has_revisit,
        }
        counts = {name: int(mask.sum()) for name, mask in counts.items()}
        counts[SKIPPED] = len(self) - sum(counts.values())
        return counts


class PrPoint(NamedTuple):
    threshold: float
    precision: float
    recall: float
    f1: float


class PrCurve(NamedTuple):
    points: List[PrPoint]
    max_f1: float
    best_threshold: Optional[float]


def _f1(precision: float, recall: float) -> float:
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def pr_curve(labeled: LabeledLog, cfg: EvalConfig) -> PrCurve:
    """Sweep thresholds (every observed score unless configured).

    Points with an empty precision or recall denominator are left out. When
    nothing is left the curve is the single point (0, 0) with max F1 0.
    """
    if cfg.threshold_sweep is not None:
        thresholds = sorted(set(cfg.threshold_sweep))
    else:
        thresholds = sorted(set(labeled.scores[np.isfinite(labeled.scores)].tolist()))
    points = []
    for threshold in thresholds:
        counts = labeled.counts(threshold)
        tp, fp, fn = counts[TP], counts[FP], counts[FN]
        if tp + fp == 0 or tp + fn == 0:
            continue
        precision, recall = tp / (tp + fp), tp / (tp + fn)
        points.append(PrPoint(threshold, precision, recall, _f1(precision, recall)))
    if not points:
        return PrCurve([PrPoint(math.inf, 0.0, 0.0, 0.0)], 0.0, None)
    best = max(points, key=lambda p: (p.f1, -p.threshold))
    return PrCurve(points, best.f1, best.threshold)


def project_se2(pose, max_tilt_deg: float = 3.0) -> Tuple[Se2Transform, float, bool]:
    """Gravity-aligned planar part of a 4x4 rigid transform.

    Returns (transform, tilt in degrees, tilt flag).
    """
    pose = np.asarray(pose, dtype=np.float64)
    rotation, translation = pose[:3, :3], pose[:3, 3]
    z_axis = rotation[:, 2]
    tilt = math.acos(min(max(float(z_axis[2]), -1.0), 1.0))
    axis = np.cross(z_axis, [0.0, 0.0, 1.0])
    norm = np.linalg.norm(axis)
    if norm > 1e-12:
        align = Rotation.from_rotvec(axis / norm * tilt).as_matrix()
        rotation, translation = align @ rotation, align @ translation
    yaw = math.atan2(rotation[1, 0], rotation[0, 0])
    tilt_deg = math.degrees(tilt)
    return Se2Transform(yaw, translation[:2]), tilt_deg, tilt_deg > max_tilt_deg


def relative_pose(gt_poses, query_id: int, candidate_id: int) -> np.ndarray:
    """Candidate frame expressed in the query frame."""
    query = np.asarray(gt_poses[query_id], dtype=np.float64)
    candidate = np.asarray(gt_poses[candidate_id], dtype=np.float64)
    inverse = np.eye(4)
    inverse[:3, :3] = query[:3, :3].T
    inverse[:3, 3] = -query[:3, :3].T @ query[:3, 3]
    return inverse @ candidate


class PoseError(NamedTuple):
    query_id: int
    trans_err: float
    rot_err_deg: float
    tilted: bool


def pose_errors(
    log: PredictionLog, gt_poses, cfg: EvalConfig, threshold: float, outcome: str
) -> List[PoseError]:
    errors = []
    for entry in log:
        # only reported candidates can be TP or FP
        if not entry.has_candidate or entry.score < threshold:
            continue
        if classify(entry, gt_poses, cfg, threshold) != outcome:
            continue
        relative = relative_pose(gt_poses, entry.query_id, entry.candidate_id)
        gt, _, tilted = project_se2(relative, cfg.max_tilt_deg)
        if tilted:
            logger.warning(
                "frames %d/%d: ground-truth roll/pitch above %.1f deg",
                entry.query_id,
                entry.candidate_id,
                cfg.max_tilt_deg,
            )
        errors.append(
            PoseError(
                entry.query_id,
                float(np.linalg.norm(entry.pose.t - gt.t)),
                abs(math.degrees(wrap_angle(entry.pose.theta - gt.theta))),
                tilted,
            )
        )
    return errors


@dataclass
class MpeStats:
    count: int = 0
    mean_rot_deg: Optional[float] = None
    rmse_rot_deg: Optional[float] = None
    mean_trans_m: Optional[float] = None
    rmse_trans_m: Optional[float] = None
    tilted: int = 0

    @property
    def empty(self) -> bool:
        return self.count == 0


def mpe_stats(
    log: PredictionLog, gt_poses, cfg: EvalConfig, threshold: float
) -> MpeStats:
    """Metric pose errors of the TP predictions at *threshold*."""
    errors = pose_errors(log, gt_poses, cfg, threshold, TP)
    if not errors:
        return MpeStats()
    trans = np.array([e.trans_err for e in errors])
    rot = np.array([e.rot_err_deg for e in errors])
    return MpeStats(
        count=len(errors),
        mean_rot_deg=float(rot.mean()),
        rmse_rot_deg=float(np.sqrt(np.mean(rot ** 2))),
        mean_trans_m=float(trans.mean()),
        rmse_trans_m=float(np.sqrt(np.mean(trans ** 2))),
        tilted=sum(e.tilted for e in errors),
    )


class FpErrors(NamedTuple):
    errors: List[Tuple[float, float]]
    fraction_in_box: Optional[float]


def fp_error_distribution(
    log: PredictionLog, gt_poses, cfg: EvalConfig, threshold: float
) -> FpErrors:
    errors = [
        (e.trans_err, e.rot_err_deg)
        for e in pose_errors(log, gt_poses, cfg, threshold, FP)
    ]
    if not errors:
        return FpErrors([], None)
    inside = sum(
        trans < cfg.fp_box_trans and rot < cfg.fp_box_rot_deg for trans, rot in errors
    )
    return FpErrors(errors, inside / len(errors))


@dataclass
class EvalReport:
    n_queries: int
    curve: PrCurve
    counts: Dict[str, int]
    mpe: MpeStats
    fp: FpErrors
    timing: Optional[Dict[str, Dict[str, float]]] = None

    def summary(self) -> Dict:
        mpe = asdict(self.mpe)
        mpe["empty"] = self.mpe.empty
        return {
            "queries": self.n_queries,
            "max_f1": self.curve.max_f1,
            "best_threshold": self.curve.best_threshold,
            "counts": dict(self.counts),
            "mpe": mpe,
            "fp": {
                "count": len(self.fp.errors),
                "fraction_in_box": self.fp.fraction_in_box,
            },
            "timing_ms": self.timing,
        }

    def to_dict(self) -> Dict:
        data = self.summary()
        data["pr_curve"] = [
            p._asdict() for p in self.curve.points if math.isfinite(p.threshold)
        ]
        data["fp"]["errors"] = [list(e) for e in self.fp.errors]
        return data


def evaluate(
    log: PredictionLog,
    gt_poses,
    cfg: EvalConfig,
    timing_rows: Optional[Sequence[Dict[str, float]]] = None,
) -> EvalReport:
    if not len(log):
        raise ValueError("cannot evaluate an empty prediction log")
    check_scan_ids(log, gt_poses)
    labeled = LabeledLog(log, gt_poses, cfg)
    curve = pr_curve(labeled, cfg)
    threshold = curve.best_threshold if curve.best_threshold is not None else math.inf
    report = EvalReport(
        n_queries=len(log),
        curve=curve,
        counts=labeled.counts(threshold),
        mpe=mpe_stats(log, gt_poses, cfg, threshold),
        fp=fp_error_distribution(log, gt_poses, cfg, threshold),
        timing=summarize_timings(timing_rows) if timing_rows else None,
    )
    logger.info("max F1 %.4f at threshold %r", curve.max_f1, curve.best_threshold)
    return report


def write_report(report: EvalReport, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, PR_CURVE_FILE), "w", newline="") as fd:
        writer = csv.writer(fd, lineterminator="\n")
        writer.writerow(PR_COLUMNS)
        for point in report.curve.points:
            if math.isfinite(point.threshold):
                writer.writerow([_format_float(v) for v in point])
    with open(os.path.join(out_dir, SUMMARY_FILE), "w") as fd:
        yaml.safe_dump(report.summary(), fd, sort_keys=True)
    with open(os.path.join(out_dir, REPORT_FILE), "w") as fd:
        json.dump(report.to_dict(), fd, indent=2, sort_keys=True)
        fd.write("\n")
