"""Experiment configuration: strict YAML with unknown-key rejection, plus named presets.

A config file has these top-level sections (all optional except a dataset source)::

    name: clean_gt
    seed: 0
    threads: 1
    out: runs/clean_gt
    dataset: path/to/dataset        # or a `simulator:` section, never both
    depth_mode: gt                  # none | gt | noisy
    nfl_preset: monogs_estimated_depth
    weights: {lambda_depth: 0.4, lambda_nfl_tracking: 0.0, ...}
    shading: {beta: 0.0, gamma: 2.2, tau: 0.95, crop_fraction: 0.75, ...}
    slam: {tracking_iters: 200, window: 10, ...}
    simulator: {tube: {...}, trajectory: {...}, lighting: {...}, ...}
"""

from __future__ import annotations

import dataclasses
import hashlib
import typing
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import yaml

from .dataset import normalize_depth_mode
from .losses import NFL_PRESETS, LossWeights, ShadingParams, preset_weights
from .simulator import SimConfig
from .slam import SlamConfig

# SlamConfig fields that live in other sections of the file; the simulator
# seed likewise comes from the top-level seed
_SLAM_EXCLUDED = ("weights", "shading", "seed")


class ConfigError(ValueError):
    pass


def _coerce(tp, value, where: str):
    if dataclasses.is_dataclass(tp):
        return _from_dict(tp, value, where)
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_coerce(args[0], v, where) for v in value)
        if len(args) != len(value):
            raise ConfigError(f"{where}: expected {len(args)} values, got {len(value)}")
        return tuple(_coerce(a, v, where) for a, v in zip(args, value))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def _from_dict(cls, data, where: str, exclude=()):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(data).__name__}")
    hints = typing.get_type_hints(cls)
    names = [f.name for f in dataclasses.fields(cls) if f.name not in exclude]
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {k: _coerce(hints[k], v, f"{where}.{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _to_plain(obj, exclude=()):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)
                if f.name not in exclude}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    threads: int = 1
    out: Optional[str] = None
    dataset: Optional[str] = None
    simulator: Optional[SimConfig] = None
    depth_mode: str = "gt"
    nfl_preset: Optional[str] = None
    weights: LossWeights = field(default_factory=LossWeights)
    shading: ShadingParams = field(default_factory=ShadingParams)
    slam: SlamConfig = field(default_factory=SlamConfig)

    # -- construction ---------------------------------------------------------
    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        data = dict(data)
        slam = data.pop("slam", None)
        sim = data.pop("simulator", None)
        cfg = _from_dict(cls, data, "config", exclude=("slam", "simulator"))
        cfg.slam = _from_dict(SlamConfig, slam, "config.slam", exclude=_SLAM_EXCLUDED)
        if sim is not None:
            cfg.simulator = _from_dict(SimConfig, sim, "config.simulator", exclude=("seed",))
        cfg.check()
        return cfg

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML: {exc}") from None
        return cls.from_dict(data or {})

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        cfg = cls.from_yaml(text)
        # relative dataset paths are resolved against the config file
        if cfg.dataset is not None and not Path(cfg.dataset).is_absolute():
            cfg.dataset = str((path.parent / cfg.dataset).resolve())
        return cfg

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        d = _to_plain(self)
        d["slam"] = _to_plain(self.slam, exclude=_SLAM_EXCLUDED)
        if self.simulator is not None:
            d["simulator"] = _to_plain(self.simulator, exclude=("seed",))
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def digest(self) -> str:
        return hashlib.sha256(self.to_yaml().encode()).hexdigest()

    # -- validation -----------------------------------------------------------
    def check(self) -> None:
        """Structural checks that need no file system access."""
        if (self.dataset is None) == (self.simulator is None):
            raise ConfigError("exactly one of `dataset` and `simulator` must be given")
        try:
            self.depth_mode = normalize_depth_mode(self.depth_mode)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.nfl_preset is not None:
            if self.nfl_preset not in NFL_PRESETS:
                raise ConfigError(f"unknown nfl_preset {self.nfl_preset!r}; "
                                  f"choose from {sorted(NFL_PRESETS)}")
            if self.weights.lambda_nfl_tracking or self.weights.lambda_nfl_mapping:
                raise ConfigError("give either nfl_preset or explicit lambda_nfl_* weights, not both")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def validate(self) -> None:
        """Full validation, including that referenced paths and depth maps exist."""
        self.check()
        if self.dataset is not None:
            root = Path(self.dataset)
            if not root.is_dir():
                raise ConfigError(f"dataset directory {root} does not exist")
            need = {"gt": "depth_gt", "noisy": "depth_noisy"}.get(self.depth_mode)
            if need and not (root / need).is_dir():
                raise ConfigError(f"depth_mode {self.depth_mode!r} needs {need}/ in {root}")

    # -- resolution -----------------------------------------------------------
    def resolved_weights(self) -> LossWeights:
        w = self.weights
        if self.nfl_preset is None:
            return w
        return preset_weights(self.nfl_preset, w.lambda_depth, w.lambda_reg)

    def slam_config(self) -> SlamConfig:
        return dataclasses.replace(self.slam, weights=self.resolved_weights(),
                                   shading=self.shading, seed=self.seed)

    def simulator_config(self) -> SimConfig:
        if self.simulator is None:
            raise ConfigError("config has no simulator section")
        return dataclasses.replace(self.simulator, seed=self.seed)


def preset_names() -> list:
    root = resources.files("nflba") / "configs"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def load_preset(name: str) -> ExperimentConfig:
    """Load a config shipped with the package, e.g. ``reference_default``."""
    res = resources.files("nflba") / "configs" / f"{name}.yaml"
    if not res.is_file():
        raise ConfigError(f"unknown preset {name!r}; available: {preset_names()}")
    return ExperimentConfig.from_yaml(res.read_text())


def load_config(ref: Any) -> ExperimentConfig:
    """A path to a YAML file, or the name of a shipped preset."""
    p = Path(str(ref))
    if p.suffix in (".yaml", ".yml") or p.exists():
        return ExperimentConfig.load(p)
    return load_preset(str(ref))
