"""Run configuration: strict YAML/JSON parsing into nested dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .datasets import NOISE_KINDS, DomainSpec, NoiseParams, benchmark_specs
from .losses import LossConfig
from .model import get_profile
from .train import TrainConfig, desk_config


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    generator_seed: int = 1234
    source_images_per_class: int = 200
    target_images_per_class: int = 40
    targets: tuple[str, ...] = ("mild", "strong")


@dataclass
class ProtocolConfig:
    n_way: int = 5
    k_shot: int = 5
    n_query: int = 15
    episodes: int = 100
    k_values: tuple[int, ...] = (5,)
    transductive: bool = True
    finetune_mode: str = "finetune"


@dataclass
class AblationConfig:
    variants: tuple[str, ...] = ("baseline", "SAE", "SAE*", "NSAE(-)", "NSAE")
    combos: tuple[str, ...] = ("CE+CE", "BSR+CE", "CE+D", "BSR+D")


@dataclass
class NoiseStudyConfig:
    kinds: tuple[str, ...] = NOISE_KINDS
    settings: tuple[str, ...] = ("a", "b")
    combo: str = "BSR+CE"
    params: NoiseParams = field(default_factory=NoiseParams)


@dataclass
class IccConfig:
    reps: int = 600
    classes_per_rep: int = 5
    domains: tuple[str, ...] = ("source", "strong")


@dataclass
class RunConfig:
    seed: int = 0
    profile: str = "fast32"
    out: str = "runs"
    jobs: int = 1
    train_preset: str = "desk"  # desk | paper
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    ablation: AblationConfig = field(default_factory=AblationConfig)
    noise_study: NoiseStudyConfig = field(default_factory=NoiseStudyConfig)
    icc: IccConfig = field(default_factory=IccConfig)

    @property
    def image_size(self) -> int:
        return get_profile(self.profile).image_size

    def domain_specs(self) -> dict[str, DomainSpec]:
        return benchmark_specs(self.image_size, self.data.generator_seed)

    def content(self) -> dict:
        """Everything that can influence results (output location and parallelism excluded)."""
        d = asdict(self)
        d.pop("out")
        d.pop("jobs")
        return d

    def hash(self) -> str:
        return content_hash(self.content())


def content_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------- strict parsing
def _convert(tp, value, where: str):
    origin = typing.get_origin(tp)
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {type(value).__name__}")
        return build(tp, value, where)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if value is None:
            return None
        return _convert(args[0], value, where)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list")
        args = typing.get_args(tp)
        inner = args[0] if len(args) == 2 and args[1] is Ellipsis else None
        if inner is None:
            return tuple(_convert(a, v, f"{where}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
        return tuple(_convert(inner, v, f"{where}[{i}]") for i, v in enumerate(value))
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


def build(cls, data: dict, where: str = "config", base=None):
    """Instantiate dataclass ``cls`` from ``data``; unknown keys are errors.
    Missing keys come from ``base`` (an instance) or the class defaults."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(names)}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        sub = f"{where}.{f.name}"
        if f.name in data:
            value = data[f.name]
            if base is not None and dataclasses.is_dataclass(hints[f.name]) and isinstance(value, dict):
                kwargs[f.name] = build(hints[f.name], value, sub, getattr(base, f.name))
            else:
                kwargs[f.name] = _convert(hints[f.name], value, sub)
        elif base is not None:
            kwargs[f.name] = getattr(base, f.name)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from None


def parse_config(data: dict | None, seed: int | None = None, profile: str | None = None,
                 out: str | None = None, jobs: int | None = None) -> RunConfig:
    """Build a RunConfig; command-line overrides win over file values.
    ``train`` keys override the selected preset."""
    data = dict(data or {})
    if seed is not None:
        data["seed"] = seed
    if profile is not None:
        data["profile"] = profile
    if out is not None:
        data["out"] = out
    if jobs is not None:
        data["jobs"] = jobs
    train = data.pop("train", {}) or {}
    cfg = build(RunConfig, data)
    try:
        get_profile(cfg.profile)
    except ValueError as err:
        raise ConfigError(str(err)) from None
    if cfg.train_preset == "desk":
        preset = desk_config(cfg.profile, cfg.seed)
    elif cfg.train_preset == "paper":
        preset = TrainConfig(seed=cfg.seed)
    else:
        raise ConfigError(f"train_preset must be 'desk' or 'paper', got {cfg.train_preset!r}")
    if not isinstance(train, dict):
        raise ConfigError("config.train: expected a mapping")
    if train.get("seed", cfg.seed) != cfg.seed:
        raise ConfigError("config.train.seed: set the master seed at the top level")
    cfg.train = build(TrainConfig, train, "config.train", base=preset)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig) -> None:
    from .losses import FINETUNE_CLS, PRETRAIN_CLS

    for combo in cfg.ablation.combos + (cfg.noise_study.combo,):
        parts = combo.split("+")
        if len(parts) != 2 or parts[0] not in PRETRAIN_CLS or parts[1] not in FINETUNE_CLS:
            raise ConfigError(f"bad loss combination {combo!r}; expected e.g. 'BSR+CE'")
    allowed = ("baseline", "SAE", "SAE*", "NSAE(-)", "NSAE")
    for v in cfg.ablation.variants:
        if v not in allowed:
            raise ConfigError(f"unknown ablation variant {v!r}; allowed: {allowed}")
    for k in cfg.noise_study.kinds:
        if k not in NOISE_KINDS:
            raise ConfigError(f"unknown noise kind {k!r}")
    for s in cfg.noise_study.settings:
        if s not in ("a", "b"):
            raise ConfigError(f"noise settings are 'a' and 'b', got {s!r}")
    for t in cfg.data.targets:
        if t not in ("mild", "strong"):
            raise ConfigError(f"unknown target domain {t!r}")
    if cfg.protocol.finetune_mode not in ("finetune", "none"):
        raise ConfigError("protocol.finetune_mode must be 'finetune' or 'none'")
    if cfg.protocol.episodes < 1 or cfg.jobs < 1:
        raise ConfigError("episodes and jobs must be >= 1")


def load_config(path=None, **overrides) -> RunConfig:
    data = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: invalid YAML/JSON: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    return parse_config(data, **overrides)


def config_echo(cfg: RunConfig) -> str:
    return yaml.safe_dump(json.loads(json.dumps(asdict(cfg))), sort_keys=True)
