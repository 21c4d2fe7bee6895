from bevloop.bev import BevConfig, BevImage, PointCloud, rasterize
from bevloop.config import RunConfig, load_config
from bevloop.constellation import Se2Transform
from bevloop.dataset import read_sequence
from bevloop.pipeline import DetectorConfig, LoopDetector, LoopResult
from bevloop.version import VERSION as __version__

__all__ = [
    "BevConfig",
    "BevImage",
    "DetectorConfig",
    "LoopDetector",
    "LoopResult",
    "PointCloud",
    "RunConfig",
    "Se2Transform",
    "load_config",
    "rasterize",
    "read_sequence",
]
