import logging
import math
import time
from collections import OrderedDict
from contextlib import contextmanager
from typing import Dict, Iterator, Optional

import numpy as np

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

# stage names, in the order they are reported
STAGE_GEN_CONTOURS = "gen_contours"
STAGE_RETRIEVAL = "retrieval"
STAGE_CAC_CHECK = "cac_check"
STAGE_L2_OPTIM = "l2_optim"
STAGE_UPDATE_DB = "update_db"
STAGES = (
    STAGE_GEN_CONTOURS,
    STAGE_RETRIEVAL,
    STAGE_CAC_CHECK,
    STAGE_L2_OPTIM,
    STAGE_UPDATE_DB,
)


class BevLoopError(Exception):
    pass


class ConfigError(BevLoopError, ValueError):
    pass


class DataFormatError(BevLoopError, ValueError):
    def __init__(
        self,
        message: str,
        filename: Optional[str] = None,
        offset: Optional[int] = None,
        line: Optional[int] = None,
    ):
        super().__init__(message)
        self.filename = filename
        self.offset = offset
        self.line = line


class SchemaError(DataFormatError):
    pass


class EmptyMixtureError(BevLoopError):
    pass


class SingularCovarianceError(BevLoopError, ArithmeticError):
    pass


def create_format_error(
    message: str,
    filename: Optional[str] = None,
    offset: Optional[int] = None,
    line: Optional[int] = None,
    error_class=DataFormatError,
) -> DataFormatError:
    parts = [message]
    if filename is not None:
        parts.append("file %r" % str(filename))
    if offset is not None:
        parts.append("byte offset %d" % offset)
    if line is not None:
        parts.append("line %d" % line)
    return error_class(": ".join(parts), filename, offset, line)


def check_finite(values, name: str) -> np.ndarray:
    array = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(array)):
        raise ValueError("%s contains non-finite values" % name)
    return array


def setup_logging(level="INFO"):
    """Configure the root logger once for command-line use."""
    if isinstance(level, str):
        level = getattr(logging, level.upper(), None)
        if not isinstance(level, int):
            raise ConfigError("unknown log level: %r" % level)
    root = logging.getLogger()
    if not root.handlers:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter(LOG_FORMAT))
        root.addHandler(handler)
    root.setLevel(level)


def wrap_angle(theta):
    """Wrap angles into (-pi, pi]. Works on scalars and arrays."""
    wrapped = np.pi - np.mod(np.pi - np.asarray(theta, dtype=np.float64), 2 * np.pi)
    wrapped = np.where(wrapped <= -np.pi, wrapped + 2 * np.pi, wrapped)
    if np.ndim(wrapped) == 0:
        return float(wrapped)
    return wrapped


def rotation_matrix(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class StageTimer:
    """Accumulates wall-clock milliseconds per pipeline stage."""

    def __init__(self):
        self.durations = OrderedDict(
            (stage, 0.0) for stage in STAGES
        )  # type: Dict[str, float]

    def __repr__(self):
        return "<StageTimer %s>" % " ".join(
            "%s=%.2fms" % item for item in self.durations.items()
        )

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = (time.perf_counter() - start) * 1000.0
            self.durations[name] = self.durations.get(name, 0.0) + elapsed

    def merge(self, other: Dict[str, float]):
        for name, value in other.items():
            self.durations[name] = self.durations.get(name, 0.0) + value

    @property
    def total(self) -> float:
        return sum(self.durations.values())
