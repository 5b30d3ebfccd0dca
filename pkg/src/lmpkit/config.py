"""JSON experiment configs.

A config has the sections ``dataset``, ``train``, ``selection``,
``clustering``, ``pck`` and ``output_dir``. Every field has a default, so
``{}`` is a valid config; unknown keys are rejected. Validation failures
surface as :class:`ConfigError` carrying a JSON pointer to the bad value.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .clustering import ClusteringConfig, DistanceMetric
from .errors import ConfigError
from .maskout import MaskMode
from .metrics import MatchMode, PckConfig
from .pooling import PoolKind
from .selection import SelectionConfig
from .synth import DEFAULT_REPEATED, DEFAULT_UNIQUE, SceneSpec
from .trainer import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DatasetSection(_Section):
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = Field(4, ge=1)
    unique_patterns_per_class: int = Field(2, ge=1)
    num_unique_per_image: int = Field(2, ge=1)
    num_repeated_distractors: int = Field(3, ge=0)
    noise_sigma: float = Field(0.05, ge=0)
    min_separation: float = Field(10.0, ge=0)
    unique_glyphs: tuple[str, ...] = DEFAULT_UNIQUE
    repeated_glyphs: tuple[str, ...] = DEFAULT_REPEATED
    n_train_per_class: int = Field(500, ge=1)
    n_test_per_class: int = Field(100, ge=0)
    seed: int = 0

    def scene_spec(self) -> SceneSpec:
        fields = self.model_dump(exclude={"n_train_per_class", "n_test_per_class", "seed"})
        return SceneSpec(**fields)


class TrainSection(_Section):
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(8, ge=1)
    learning_rate: float = Field(0.01, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    pooling_kind: PoolKind = PoolKind.LEAKY_MAX
    epsilon: float = Field(0.1, gt=0)
    seed: int = 0
    enable_maskout: bool = False
    maskout_start_epoch: int = Field(2, ge=1)
    mask_radius: Optional[float] = Field(None, gt=0)
    mask_mode: MaskMode = MaskMode.SQUARE
    widths: tuple[int, ...] = (16, 32, 32)
    strides: tuple[int, ...] = (1, 2, 2)
    conv_bias: bool = True
    conv_bias_init: float = 0.0
    init_active_fraction: Optional[float] = Field(None, gt=0, le=1)


class SelectionSection(_Section):
    keep_count: Optional[int] = Field(None, ge=1)
    keep_fraction: Optional[float] = Field(None, gt=0, le=1)


class ClusteringSection(_Section):
    k: int = Field(5, ge=1)
    n: int = Field(3, ge=1)
    thr: float = Field(3.0, ge=0)
    dist_floor: float = Field(0.5, gt=0)
    metric: DistanceMetric = DistanceMetric.EUCLIDEAN


class PckSection(_Section):
    alpha: float = Field(0.1, gt=0)
    match_mode: MatchMode = MatchMode.GT_CONSUMED


class ExperimentConfig(_Section):
    dataset: DatasetSection = DatasetSection()
    train: TrainSection = TrainSection()
    selection: SelectionSection = SelectionSection()
    clustering: ClusteringSection = ClusteringSection()
    pck: PckSection = PckSection()
    output_dir: str = "lmpkit_out"
    version: Literal[1] = 1

    # -- conversions to library objects --

    def scene_spec(self) -> SceneSpec:
        return self.dataset.scene_spec()

    def selection_config(self) -> SelectionConfig:
        return SelectionConfig(**self.selection.model_dump())

    def clustering_config(self) -> ClusteringConfig:
        return ClusteringConfig(**self.clustering.model_dump())

    def pck_config(self) -> PckConfig:
        return PckConfig(**self.pck.model_dump())

    def train_config(self) -> TrainConfig:
        return TrainConfig(selection=self.selection_config(), clustering=self.clustering_config(),
                           **self.train.model_dump())

    def resolved(self) -> dict:
        return self.model_dump(mode="json")


def _pointer(loc) -> str:
    parts = [str(p).replace("~", "~0").replace("/", "~1") for p in loc]
    return "/" + "/".join(parts) if parts else ""


def _build(doc) -> ExperimentConfig:
    try:
        cfg = ExperimentConfig.model_validate(doc)
    except ValidationError as exc:
        err = exc.errors()[0]
        raise ConfigError(err["msg"], _pointer(err["loc"])) from None
    # cross-field checks that live in the library dataclasses
    for section, build in (("dataset", cfg.scene_spec), ("selection", cfg.selection_config),
                           ("train", cfg.train_config)):
        try:
            build()
        except ValueError as exc:
            raise ConfigError(str(exc), "/" + section) from None
    return cfg


def _coerce(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides) -> dict:
    """Apply ``dotted.key=value`` strings; values are parsed as JSON when possible."""
    doc = json.loads(json.dumps(doc))
    for item in overrides or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = doc
        for i, p in enumerate(parts[:-1]):
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError("cannot descend into a non-object", _pointer(parts[:i + 1]))
            node = nxt
        node[parts[-1]] = _coerce(value)
    return doc


def load_config(path=None, overrides=()) -> ExperimentConfig:
    """Read a JSON config (or start from defaults when ``path`` is None)."""
    doc = {}
    if path is not None:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    return _build(apply_overrides(doc, overrides))


def write_resolved(cfg: ExperimentConfig, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.resolved.json"
    path.write_text(json.dumps(cfg.resolved(), indent=2, sort_keys=True) + "\n")
    return path
