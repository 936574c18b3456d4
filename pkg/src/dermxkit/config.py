"""TOML run configuration with strict keys.

Top-level keys mirror :class:`TrainConfig` field names. Optional tables:
``[augmentation]`` (AugmentationConfig fields), ``[model]`` (DermXConfig
fields) and ``[eval]`` (see :class:`EvalConfig`). Any key not named after a
field is an error, so a typo such as ``lamda_a`` cannot pass silently.
"""

import dataclasses
import sys
from dataclasses import dataclass

from .errors import ConfigError
from .model import DermXConfig
from .training import AugmentationConfig, TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = 0.5
    tau: float = 0.05
    cam_binarize: float = 0.5
    fill: str = "mean"  # "mean" or "black"
    occlusion_source: str = "model"  # "model" or "expert"
    eval_at: str = "image"  # "image" or "feature"
    pooled: bool = False  # localization: pool pixel sums over images instead of averaging
    correct_reference: str = "labels"  # "labels" or "expected"
    overlays: int = 8  # overlay images written per run; 0 disables

    def __post_init__(self):
        choices = {
            "fill": ("mean", "black"),
            "occlusion_source": ("model", "expert"),
            "eval_at": ("image", "feature"),
            "correct_reference": ("labels", "expected"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"eval.{key} must be one of {allowed}, got {getattr(self, key)!r}")
        for key in ("threshold", "tau", "cam_binarize"):
            if not 0.0 <= getattr(self, key) <= 1.0:
                raise ConfigError(f"eval.{key} must lie in [0, 1]")


@dataclass
class RunConfig:
    train: TrainConfig
    model: dict  # DermXConfig overrides
    eval: EvalConfig

    def asdict(self):
        return {"train": self.train.asdict(), "model": dict(self.model), "eval": dataclasses.asdict(self.eval)}


def _field_names(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(table, cls, where):
    unknown = sorted(set(table) - _field_names(cls))
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {', '.join(unknown)}")


def parse_config(doc):
    doc = dict(doc)
    aug = doc.pop("augmentation", {})
    model = doc.pop("model", {})
    ev = doc.pop("eval", {})
    for name, table in (("augmentation", aug), ("model", model), ("eval", ev)):
        if not isinstance(table, dict):
            raise ConfigError(f"[{name}] must be a table")
    _check_keys(doc, TrainConfig, "top level")
    _check_keys(aug, AugmentationConfig, "[augmentation]")
    _check_keys(model, DermXConfig, "[model]")
    _check_keys(ev, EvalConfig, "[eval]")
    if "input_size" in model:
        model["input_size"] = tuple(model["input_size"])
    try:
        train = TrainConfig(**doc, augmentation=AugmentationConfig(**aug))
        evc = EvalConfig(**ev)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(train, model, evc)


def load_config(path=None):
    if path is None:
        return parse_config({})
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(doc)
