"""Layered run configuration.

Values are resolved in this order, later wins: dataclass defaults, the
preset, the YAML config file, ``--set section.key=value`` overrides and
finally dedicated command-line flags.
"""
import dataclasses
import logging
import os
import typing
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Optional

import yaml

from bevloop.bev import BevConfig
from bevloop.constellation import ConstellationConfig, Tolerance
from bevloop.contour import ContourConfig
from bevloop.dataset import DatasetConfig, SceneParams
from bevloop.evaluation import EvalConfig
from bevloop.gmm import GmmConfig
from bevloop.pipeline import DetectorConfig, PipelineConfig
from bevloop.retrieval import RetrievalConfig
from bevloop.utils import ConfigError

logger = logging.getLogger(__name__)

DEFAULT_PRESET = "kitti"
PRESETS = {
    "kitti": {},
    # sensors with a wide upward field of view see more of tall structures
    "wide-fov": {
        "bev": {"slice_heights": [-0.5, 0.0, 0.5, 1.0, 1.75, 2.75, 4.0, 6.0]},
        "constellation": {"thresholds": {"h_m": {"t_p": 0.35, "t_a": 0.5}}},
    },
}  # type: Dict[str, Dict[str, Any]]


@dataclass(frozen=True)
class RunConfig:
    bev: BevConfig = field(default_factory=BevConfig)
    contour: ContourConfig = field(default_factory=ContourConfig)
    constellation: ConstellationConfig = field(default_factory=ConstellationConfig)
    gmm: GmmConfig = field(default_factory=GmmConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    synth: SceneParams = field(default_factory=SceneParams)
    preset: str = DEFAULT_PRESET

    @property
    def detector(self) -> DetectorConfig:
        return DetectorConfig(
            bev=self.bev,
            contour=self.contour,
            constellation=self.constellation,
            gmm=self.gmm,
            retrieval=self.retrieval,
            pipeline=self.pipeline,
        )

    def to_dict(self) -> Dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    def dump(self, path):
        with open(path, "w") as fd:
            yaml.safe_dump(self.to_dict(), fd, sort_keys=True)


def _plain(value):
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    return value


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    """Deep-merge two nested mappings; *override* wins."""
    result = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(result.get(key), dict):
            result[key] = merge(result[key], value)
        else:
            result[key] = value
    return result


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError("%s must be a mapping, got %r" % (path or "config", data))
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            dotted = ".".join(filter(None, [path, str(key)]))
            raise ConfigError("unknown config key %r" % dotted)
    kwargs = {}
    for key, value in data.items():
        hint = hints[key]
        child = ".".join(filter(None, [path, key]))
        if hint is Tolerance and isinstance(value, (list, tuple)):
            if len(value) != 2:
                raise ConfigError("%s must be [t_p, t_a]" % child)
            value = Tolerance(*value)
        elif dataclasses.is_dataclass(hint):
            value = _build(hint, value, child)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError("invalid value in %s: %s" % (path or "config", e)) from e


def load_config_file(path) -> Dict[str, Any]:
    if not os.path.exists(path):
        raise FileNotFoundError("config file not found: %s" % path)
    with open(path) as fd:
        try:
            data = yaml.safe_load(fd)
        except yaml.YAMLError as e:
            raise ConfigError("cannot parse config file %s: %s" % (path, e)) from e
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("config file %s must hold a mapping" % path)
    return data


def parse_override(text: str) -> Dict[str, Any]:
    """``a.b.c=value`` into ``{"a": {"b": {"c": value}}}``; value parsed as YAML."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError("override must look like section.key=value: %r" % text)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError("cannot parse override value %r: %s" % (raw, e)) from e
    result = value
    for part in reversed(key.strip().split(".")):
        result = {part: result}
    return result


# one rule, read by detection and by evaluation
EXCLUSION_SECTIONS = ("pipeline", "eval")


def tie_exclusion_window(layer: Dict[str, Any]) -> Dict[str, Any]:
    """Copy an exclusion window set in one section of *layer* to the other.

    Both sections must agree when a layer sets both.
    """
    values = [
        layer[section]["exclusion_window"]
        for section in EXCLUSION_SECTIONS
        if isinstance(layer.get(section), dict) and "exclusion_window" in layer[section]
    ]
    if not values:
        return layer
    if any(value != values[0] for value in values):
        raise ConfigError(
            "pipeline.exclusion_window and eval.exclusion_window differ: %r" % values
        )
    tied = {
        section: {"exclusion_window": values[0]}
        for section in EXCLUSION_SECTIONS
        if isinstance(layer.get(section, {}), dict)
    }
    return merge(layer, tied)


def build_config(
    data: Optional[Dict[str, Any]] = None,
    overrides: Iterable[str] = (),
    flags: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    file_data = tie_exclusion_window(data or {})
    for override in overrides:
        file_data = merge(file_data, tie_exclusion_window(parse_override(override)))
    file_data = merge(file_data, tie_exclusion_window(flags or {}))
    preset = file_data.get("preset", DEFAULT_PRESET)
    if preset not in PRESETS:
        raise ConfigError(
            "unknown preset %r (known: %s)" % (preset, ", ".join(sorted(PRESETS)))
        )
    merged = merge(PRESETS[preset], file_data)
    merged["preset"] = preset
    config = _build(RunConfig, merged, "")
    # the detector cross-checks levels against the slices
    config.detector
    return config


def load_config(
    path=None, overrides: Iterable[str] = (), flags: Optional[Dict[str, Any]] = None
) -> RunConfig:
    data = load_config_file(path) if path else {}
    config = build_config(data, overrides, flags)
    logger.debug("effective config: %r", config)
    return config
