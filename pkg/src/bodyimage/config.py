"""Pipeline configuration: one TOML document drives every command."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Any

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .model import TrainConfig
from .scene import ArmGeometry, BackgroundStyle, ConfigurationError, SceneConfig

WORKSPACE_ENV = "BODYIMAGE_WORKSPACE"
PRESETS = ("desk", "paper")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field."""


@dataclass(frozen=True)
class DatasetSection:
    n_train: int = 2000
    n_test: int = 500
    seed: int = 1


@dataclass(frozen=True)
class SegmentSection:
    probe_size: int = 100
    max_iters: int = 200
    tol: float = 1e-7
    seed: int = 3
    bins: int = 100
    mask_samples: int = 4


@dataclass(frozen=True)
class SweepSection:
    steps: int = 9


@dataclass(frozen=True)
class PipelineConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    dataset: DatasetSection = field(default_factory=DatasetSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    segment: SegmentSection = field(default_factory=SegmentSection)
    sweep: SweepSection = field(default_factory=SweepSection)
    workspace: Path = Path("workspace")

    # Each stage hash covers its own section plus everything upstream of it.
    def stage_hash(self, stage: str) -> str:
        parts: dict[str, Any] = {"scene": _scene_dict(self.scene), "dataset": asdict(self.dataset)}
        if stage in ("train", "segment", "eval", "sweep"):
            parts["train"] = asdict(self.train)
        if stage in ("segment", "eval", "sweep"):
            parts["segment"] = asdict(self.segment)
        if stage == "sweep":
            parts["sweep"] = asdict(self.sweep)
        if stage not in ("gen-data", "train", "segment", "eval", "sweep"):
            raise ValueError(f"unknown stage {stage!r}")
        blob = json.dumps(parts, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Override every stage seed (the ``--seed`` flag)."""
        return replace(self, dataset=replace(self.dataset, seed=seed), train=replace(self.train, seed=seed),
                       segment=replace(self.segment, seed=seed))


def _scene_dict(scene: SceneConfig) -> dict:
    d = asdict(scene)
    return json.loads(json.dumps(d))  # tuples -> lists, for a stable hash


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


class _Section:
    """Strict accessor that remembers which keys were consumed."""

    def __init__(self, data: dict, path: str):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a table")
        self.data = dict(data)
        self.path = path

    def _where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def sub(self, key: str) -> "_Section":
        return _Section(self.data.pop(key, {}), self._where(key))

    def get(self, key: str, kind, default):
        if key not in self.data:
            return default
        value = self.data.pop(key)
        where = self._where(key)
        try:
            return kind(value)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{where}: {exc}") from None

    def finish(self) -> None:
        if self.data:
            raise ConfigError(f"{self._where(sorted(self.data)[0])}: unknown field")


def _integer(value) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise TypeError(f"expected an integer, got {value!r}")
    return value


def _real(value) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise TypeError(f"expected a number, got {value!r}")
    return float(value)


def _boolean(value) -> bool:
    if not isinstance(value, bool):
        raise TypeError(f"expected true or false, got {value!r}")
    return value


def _string(value) -> str:
    if not isinstance(value, str):
        raise TypeError(f"expected a string, got {value!r}")
    return value


def _reals(n: int | None = None):
    def convert(value):
        if not isinstance(value, list):
            raise TypeError(f"expected a list of numbers, got {value!r}")
        out = tuple(_real(v) for v in value)
        if n is not None and len(out) != n:
            raise ValueError(f"expected {n} numbers, got {len(out)}")
        return out
    return convert


def _pairs(value):
    if not isinstance(value, list):
        raise TypeError(f"expected a list of pairs, got {value!r}")
    return tuple(_reals(2)(v) for v in value)


def _triples(value):
    if not isinstance(value, list):
        raise TypeError(f"expected a list of RGB triples, got {value!r}")
    return tuple(_reals(3)(v) for v in value)


def _build(where: str, factory, **kwargs):
    try:
        return factory(**kwargs)
    except (ConfigurationError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(data: dict, base_dir: Path | None = None) -> PipelineConfig:
    root = _Section(data, "")
    base_dir = Path(base_dir) if base_dir is not None else Path.cwd()

    scene = root.sub("scene")
    geo = scene.sub("geometry")
    g0 = ArmGeometry()
    geometry = _build("scene.geometry", ArmGeometry,
                      link_lengths=geo.get("link_lengths", _reals(), g0.link_lengths),
                      link_widths=geo.get("link_widths", _reals(), g0.link_widths),
                      base_anchor=geo.get("base_anchor", _reals(2), g0.base_anchor),
                      base_orientation=geo.get("base_orientation", _real, g0.base_orientation),
                      body_color=geo.get("body_color", _triples, g0.body_color))
    geo.finish()
    bg = scene.sub("background")
    b0 = BackgroundStyle()
    background = _build("scene.background", BackgroundStyle,
                        split_range=bg.get("split_range", _reals(2), b0.split_range),
                        upper_range=bg.get("upper_range", _reals(2), b0.upper_range),
                        lower_range=bg.get("lower_range", _reals(2), b0.lower_range),
                        upper_color=bg.get("upper_color", _reals(3), b0.upper_color),
                        lower_color=bg.get("lower_color", _reals(3), b0.lower_color),
                        min_shapes=bg.get("min_shapes", _integer, b0.min_shapes),
                        max_shapes=bg.get("max_shapes", _integer, b0.max_shapes),
                        size_range=bg.get("size_range", _reals(2), b0.size_range))
    bg.finish()
    s0 = SceneConfig()
    render_dims = (scene.get("render_height", _integer, s0.render_dims[0]),
                   scene.get("render_width", _integer, s0.render_dims[1]))
    scene_cfg = _build("scene", SceneConfig, geometry=geometry,
                       joint_ranges=scene.get("joint_ranges", _pairs, s0.joint_ranges),
                       render_dims=render_dims,
                       downsample=scene.get("downsample", _integer, s0.downsample),
                       background=background,
                       mask_reduce=scene.get("mask_reduce", _string, s0.mask_reduce))
    scene.finish()
    ds = root.sub("dataset")
    d0 = DatasetSection()
    dataset = DatasetSection(n_train=ds.get("n_train", _integer, d0.n_train),
                             n_test=ds.get("n_test", _integer, d0.n_test),
                             seed=ds.get("seed", _integer, d0.seed))
    ds.finish()
    if dataset.n_train < 1:
        raise ConfigError("dataset.n_train: must be at least 1")
    if dataset.n_test < 1:
        raise ConfigError("dataset.n_test: must be at least 1")

    tr = root.sub("train")
    t_fields = {f.name: f for f in fields(TrainConfig)}
    kinds = {int: _integer, float: _real, bool: _boolean, str: _string}
    t_kwargs = {}
    for name, f in t_fields.items():
        default_kind = type(f.default) if f.default is not None else int
        t_kwargs[name] = tr.get(name, kinds[default_kind], f.default)
    tr.finish()
    for name, value in t_kwargs.items():
        if name in ("iterations", "batch_size") and value < 1:
            raise ConfigError(f"train.{name}: must be at least 1")
    try:
        train = TrainConfig(**t_kwargs)
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None

    sg = root.sub("segment")
    g = SegmentSection()
    segment = SegmentSection(probe_size=sg.get("probe_size", _integer, g.probe_size),
                             max_iters=sg.get("max_iters", _integer, g.max_iters),
                             tol=sg.get("tol", _real, g.tol),
                             seed=sg.get("seed", _integer, g.seed),
                             bins=sg.get("bins", _integer, g.bins),
                             mask_samples=sg.get("mask_samples", _integer, g.mask_samples))
    sg.finish()
    for name in ("probe_size", "max_iters", "bins"):
        if getattr(segment, name) < 1:
            raise ConfigError(f"segment.{name}: must be at least 1")
    if segment.mask_samples < 0:
        raise ConfigError("segment.mask_samples: must be nonnegative")

    sw = root.sub("sweep")
    sweep = SweepSection(steps=sw.get("steps", _integer, SweepSection.steps))
    sw.finish()
    if sweep.steps < 2:
        raise ConfigError("sweep.steps: must be at least 2")

    paths = root.sub("paths")
    workspace = paths.get("workspace", _string, None)
    paths.finish()
    root.finish()
    if workspace is None:
        workspace = os.environ.get(WORKSPACE_ENV, "workspace")
    workspace_path = Path(workspace)
    if not workspace_path.is_absolute():
        workspace_path = base_dir / workspace_path
    return PipelineConfig(scene_cfg, dataset, train, segment, sweep, workspace_path)


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    try:
        data = tomllib.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"{path}: no such config file") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config(data, base_dir=path.parent)


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("bodyimage").joinpath("presets", f"{name}.toml").read_text()
