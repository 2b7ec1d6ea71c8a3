"""
Run configuration: one JSON file with optional sections

    {"synth": {...}, "preprocess": {...}, "train": {...}, "model": {...}}

Each section holds fields of SynthConfig, PreprocessConfig, TrainConfig and
ModelArch (channel counts excluded; they come from the data). Missing sections
and fields keep their defaults.
"""

import dataclasses
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Union

from dsp import FilterSpec, MbllParams, PreprocessConfig
from errors import ConfigError
from harness import TrainConfig
from model import ModelArch
from signalio import SynthConfig

logger = logging.getLogger(__name__)

SECTIONS = ("synth", "preprocess", "train", "model")
DATA_DEFINED_ARCH_FIELDS = ("eeg_channels", "fnirs_channels")


@dataclass(frozen=True)
class RunConfig:
    """
    Attributes:
        synth: synthetic generator settings
        preprocess: raw-session preprocessing settings
        train: settings of both training stages
        model: ModelArch overrides (everything but the channel counts)
    """

    synth: SynthConfig = field(default_factory=SynthConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    model: Dict[str, Any] = field(default_factory=dict)

    def validate(self) -> "RunConfig":
        self.synth.validate()
        self.preprocess.validate()
        self.train.validate()
        ModelArch(eeg_channels=1, fnirs_channels=1, **self.model).validate()
        return self

    def with_seed(self, seed: Optional[int]) -> "RunConfig":
        """Overrides the seed of every seeded section."""
        if seed is None:
            return self
        return replace(self, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    def arch(self, eeg_channels: int, fnirs_channels: int) -> ModelArch:
        return ModelArch(eeg_channels=eeg_channels, fnirs_channels=fnirs_channels, **self.model).validate()


def _check_keys(section: str, values: dict, allowed) -> None:
    if not isinstance(values, dict):
        raise ConfigError(f"section must be an object, got {type(values).__name__}", field=section)
    for key in values:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in section {section!r}", field=f"{section}.{key}")


def _build(cls, section: str, values: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, values, names)
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(str(exc), field=section) from None


def _filter(section: str, values: dict) -> FilterSpec:
    return _build(FilterSpec, section, values)


def _preprocess(values: dict) -> PreprocessConfig:
    names = {f.name for f in dataclasses.fields(PreprocessConfig)}
    _check_keys("preprocess", values, names)
    values = dict(values)
    for key in ("eeg_band", "fnirs_band"):
        if key in values:
            values[key] = _filter(f"preprocess.{key}", values[key])
    if "mbll" in values:
        mbll = dict(values["mbll"])
        _check_keys("preprocess.mbll", mbll, {f.name for f in dataclasses.fields(MbllParams)})
        if "extinction" in mbll:
            mbll["extinction"] = tuple(tuple(float(x) for x in row) for row in mbll["extinction"])
        if "dpf" in mbll:
            mbll["dpf"] = tuple(float(x) for x in mbll["dpf"])
        values["mbll"] = MbllParams(**mbll)
    if "excluded_rois" in values:
        values["excluded_rois"] = frozenset(values["excluded_rois"])
    return PreprocessConfig(**values)


def _train(values: dict) -> TrainConfig:
    values = dict(values)
    if values.get("align_groups") is not None:
        values["align_groups"] = tuple(values["align_groups"])
    return _build(TrainConfig, "train", values)


def _model(values: dict) -> Dict[str, Any]:
    allowed = {f.name for f in dataclasses.fields(ModelArch)} - set(DATA_DEFINED_ARCH_FIELDS)
    _check_keys("model", values, allowed)
    values = dict(values)
    if "block_widths" in values:
        values["block_widths"] = tuple(values["block_widths"])
    return values


def parse_run_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object", field="config")
    _check_keys("config", raw, SECTIONS)
    cfg = RunConfig(
        synth=_build(SynthConfig, "synth", raw.get("synth", {})),
        preprocess=_preprocess(raw.get("preprocess", {})),
        train=_train(raw.get("train", {})),
        model=_model(raw.get("model", {})),
    )
    return cfg.validate()


def load_run_config(path: Optional[Union[str, Path]]) -> RunConfig:
    """Reads a configuration file; no path gives the defaults."""
    if path is None:
        return RunConfig().validate()
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}", field="config") from None
    logger.info("Config: loaded %s", path)
    return parse_run_config(raw)
