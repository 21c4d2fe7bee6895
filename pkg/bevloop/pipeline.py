"""Per-scan loop detection: describe, retrieve, check constellations, refine."""
import logging
from concurrent.futures import Executor, ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Tuple

from bevloop.bev import BevConfig, BevImage, PointCloud, rasterize
from bevloop.constellation import (
    Constellation,
    ConstellationConfig,
    ConstellationMatch,
    Se2Transform,
    build_constellation,
    match_constellations,
)
from bevloop.contour import ContourAbstraction, ContourConfig, abstract_image
from bevloop.gmm import CorrelationResult, Gmm25D, GmmConfig, build_gmm, optimize
from bevloop.retrieval import (
    LayeredDatabase,
    RetrievalConfig,
    RetrievalKey,
    make_scan_keys,
)
from bevloop.utils import (
    STAGE_CAC_CHECK,
    STAGE_GEN_CONTOURS,
    STAGE_L2_OPTIM,
    STAGE_RETRIEVAL,
    STAGE_UPDATE_DB,
    ConfigError,
    EmptyMixtureError,
    StageTimer,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    exclusion_window: int = 150
    max_candidates: int = 200
    max_optimized: int = 10
    parallel_candidates: bool = False
    max_workers: Optional[int] = None

    def __post_init__(self):
        if self.exclusion_window < 0:
            raise ConfigError("pipeline.exclusion_window must be >= 0")
        if self.max_candidates < 1 or self.max_optimized < 1:
            raise ConfigError("pipeline candidate caps must be >= 1")
        if self.max_workers is not None and self.max_workers < 1:
            raise ConfigError("pipeline.max_workers must be >= 1 or null")


@dataclass(frozen=True)
class DetectorConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    contour: ContourConfig = field(default_factory=ContourConfig)
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def __post_init__(self):
        for section, levels in (
            ("constellation", self.constellation.levels),
            ("gmm", self.gmm.levels),
            ("retrieval", self.retrieval.levels),
        ):
            if max(levels) > self.bev.n_levels:
                raise ConfigError(
                    "%s.levels %r exceed the %d bev slices"
                    % (section, levels, self.bev.n_levels)
                )
        if self.retrieval.base_level > self.bev.n_levels:
            raise ConfigError("retrieval.base_level exceeds the bev slices")

    @property
    def contour_levels(self) -> Tuple[int, ...]:
        levels = set(self.constellation.levels) | set(self.gmm.levels)
        return tuple(sorted(levels | set(self.retrieval.levels)))


class ScanDescriptor:
    """Everything a scan contributes to detection, derived from one cloud."""

    def __init__(
        self,
        scan_id: int,
        image: Optional[BevImage],
        cas: Dict[int, List[ContourAbstraction]],
        keys: List[RetrievalKey],
        constellations: Dict[Tuple[int, int], Constellation],
        gmm: Optional[Gmm25D],
    ):
        self.scan_id = scan_id
        self.image = image
        self.cas = cas
        self.keys = keys
        self.constellations = constellations
        self.gmm = gmm

    def __repr__(self):
        return "<ScanDescriptor id=%r cas=%d keys=%d>" % (
            self.scan_id,
            sum(len(group) for group in self.cas.values()),
            len(self.keys),
        )

    @property
    def self_term(self) -> Optional[float]:
        return None if self.gmm is None else self.gmm.self_term

    def compact(self) -> "ScanDescriptor":
        """Copy without the BEV image, for keeping in the history."""
        return ScanDescriptor(
            self.scan_id, None, self.cas, self.keys, self.constellations, self.gmm
        )


class LoopResult(NamedTuple):
    """Best candidate of one query.

    ``stage_timings`` from find_loop() stop at the optimization; the detector
    fills in the database update once it has run.
    """

    query_id: int
    candidate_id: int
    score: float
    pose: Se2Transform
    stage_timings: Dict[str, float]
    survivors: int


class Funnel(NamedTuple):
    retrieved: int = 0
    cac_survivors: int = 0
    optimized: int = 0


class ScanReport(NamedTuple):
    scan_id: int
    result: Optional[LoopResult]
    timings: Dict[str, float]
    funnel: Funnel

    @property
    def total_ms(self) -> float:
        return sum(self.timings.values())


def preprocess(
    scan_id: int,
    cloud: PointCloud,
    cfg: DetectorConfig,
    timer: Optional[StageTimer] = None,
) -> ScanDescriptor:
    timer = timer or StageTimer()
    with timer.stage(STAGE_GEN_CONTOURS):
        image = rasterize(cloud, cfg.bev)
        cas = abstract_image(image, cfg.contour_levels, cfg.contour.min_pixels)
        keys = make_scan_keys(image, cas, cfg.retrieval)
        constellations = {}
        for key in keys:
            anchor = cas[key.level][key.seq - 1]
            constellations[(key.level, key.seq)] = build_constellation(
                anchor, cas, cfg.constellation
            )
        try:
            gmm = build_gmm(cas, cfg.gmm.levels, cfg.gmm)
        except EmptyMixtureError:
            gmm = None
        else:
            gmm.self_term  # cached once per scan
    return ScanDescriptor(scan_id, image, cas, keys, constellations, gmm)


def _retrieve(desc, db, history, cfg):
    """Candidate scan ids ordered by best key distance, with their anchor pairs."""
    best = {}  # type: Dict[int, float]
    pairs = {}  # type: Dict[int, List[Tuple[int, int, int]]]
    for key in desc.keys:
        for hit in db.query(key, cfg.retrieval.candidates_per_key):
            if desc.scan_id - hit.scan_id <= cfg.pipeline.exclusion_window:
                continue
            if hit.scan_id not in history:
                continue
            pairs.setdefault(hit.scan_id, []).append((key.level, key.seq, hit.seq))
            if hit.distance < best.get(hit.scan_id, float("inf")):
                best[hit.scan_id] = hit.distance
    ranked = sorted(best, key=lambda scan_id: (best[scan_id], scan_id))
    return ranked[: cfg.pipeline.max_candidates], pairs


def _check_candidate(
    desc, candidate, anchor_pairs, cfg
) -> Optional[ConstellationMatch]:
    best = None
    for level, query_seq, candidate_seq in anchor_pairs:
        c2 = candidate.constellations.get((level, candidate_seq))
        if c2 is None:
            continue
        match = match_constellations(
            desc.constellations[(level, query_seq)], c2, cfg.constellation
        )
        if match is None:
            continue
        if best is None or len(match.survivors) > len(best.survivors):
            best = match
    return best


def _map(executor: Optional[Executor], fn, items):
    if executor is None:
        return [fn(item) for item in items]
    return list(executor.map(fn, items))


def find_loop(
    desc: ScanDescriptor,
    db: LayeredDatabase,
    history: Dict[int, ScanDescriptor],
    cfg: DetectorConfig,
    timer: Optional[StageTimer] = None,
    executor: Optional[Executor] = None,
) -> Tuple[Optional[LoopResult], Funnel]:
    """detect_loop() plus the size of every stage of the candidate funnel."""
    timer = timer or StageTimer()
    if not desc.keys or desc.gmm is None:
        return None, Funnel()

    with timer.stage(STAGE_RETRIEVAL):
        candidates, pairs = _retrieve(desc, db, history, cfg)

    with timer.stage(STAGE_CAC_CHECK):
        checked = _map(
            executor,
            lambda scan_id: _check_candidate(
                desc, history[scan_id], pairs[scan_id], cfg
            ),
            candidates,
        )
        matches = [
            (scan_id, match)
            for scan_id, match in zip(candidates, checked)
            if match is not None and history[scan_id].gmm is not None
        ]
        matches.sort(key=lambda item: (-len(item[1].survivors), item[0]))
        selected = matches[: cfg.pipeline.max_optimized]

    with timer.stage(STAGE_L2_OPTIM):
        refined = _map(
            executor,
            lambda item: optimize(
                desc.gmm, history[item[0]].gmm, item[1].transform, cfg.gmm
            ),
            selected,
        )

    funnel = Funnel(len(candidates), len(matches), len(selected))
    logger.debug("scan %r funnel: %r", desc.scan_id, funnel)
    if not selected:
        return None, funnel

    best_index = max(
        range(len(selected)), key=lambda i: (refined[i].score, -selected[i][0])
    )
    scan_id, match = selected[best_index]
    result = refined[best_index]  # type: CorrelationResult
    return (
        LoopResult(
            query_id=desc.scan_id,
            candidate_id=scan_id,
            score=result.score,
            pose=result.transform.scaled(cfg.bev.resolution),
            stage_timings=dict(timer.durations),
            survivors=len(match.survivors),
        ),
        funnel,
    )


def detect_loop(
    desc: ScanDescriptor,
    db: LayeredDatabase,
    history: Dict[int, ScanDescriptor],
    cfg: DetectorConfig,
    timer: Optional[StageTimer] = None,
    executor: Optional[Executor] = None,
) -> Optional[LoopResult]:
    """Best past scan for *desc*, or None; the caller thresholds the score."""
    return find_loop(desc, db, history, cfg, timer, executor)[0]


def add_to_database(desc: ScanDescriptor, db: LayeredDatabase):
    db.insert(desc.scan_id, desc.keys)
    db.step()


class LoopDetector:
    """Online detector: every processed scan is queried first, then inserted."""

    def __init__(
        self, cfg: Optional[DetectorConfig] = None, db: Optional[LayeredDatabase] = None
    ):
        self.cfg = cfg or DetectorConfig()
        self.db = db or LayeredDatabase.from_config(self.cfg.retrieval)
        self.history = {}  # type: Dict[int, ScanDescriptor]
        self._executor = None  # type: Optional[ThreadPoolExecutor]
        if self.cfg.pipeline.parallel_candidates:
            self._executor = ThreadPoolExecutor(
                max_workers=self.cfg.pipeline.max_workers
            )

    def __repr__(self):
        return "<LoopDetector scans=%d db=%r>" % (len(self.history), self.db)

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        self.close()

    def close(self):
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def process(self, scan_id: int, cloud: PointCloud) -> ScanReport:
        if scan_id in self.history:
            raise ValueError("scan id %r was already processed" % scan_id)
        timer = StageTimer()
        desc = preprocess(scan_id, cloud, self.cfg, timer)
        result, funnel = find_loop(
            desc, self.db, self.history, self.cfg, timer, self._executor
        )
        with timer.stage(STAGE_UPDATE_DB):
            add_to_database(desc, self.db)
            self.history[scan_id] = desc.compact()
        timings = dict(timer.durations)
        if result is not None:
            result = result._replace(stage_timings=timings)
        return ScanReport(scan_id, result, timings, funnel)
