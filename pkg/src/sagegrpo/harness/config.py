"""Run configuration: a flat ``section.key = value`` text file, parsed strictly.

Blank lines and ``#`` comments are ignored. Top-level keys (``seed``,
``out_dir``) have no section prefix. Unknown keys, malformed values and
invalid enum tags raise :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..dynamics import DEFAULT_ETA, StrategyKind, VarianceStrategy
from ..errors import ConfigError, InvalidArgumentError
from ..flownet import DataSpec, VelocityNet
from ..rlcore import RewardComponent, RewardSpec, RewardTag
from ..schedule import Regime, build_schedule
from ..trustregion import KlControllerState, KLMode


@dataclass
class ScheduleConfig:
    regime: str = "clamped"
    T: int = 10
    sigma_max: float = 1.0
    floor: float = 3e-3


@dataclass
class StrategyConfig:
    kind: str = "precise"
    eta: float = DEFAULT_ETA


@dataclass
class NetConfig:
    hidden: tuple = (64, 64, 64)
    sigma_features: int = 8
    cond_features: int = 8


@dataclass
class DataConfig:
    n_modes: int = 8
    radius: float = 4.0
    mode_std: float = 0.3


@dataclass
class PretrainConfig:
    steps: int = 5000
    lr: float = 0.1
    batch_size: int = 256
    cond_dropout: float = 0.5


@dataclass
class RewardConfig:
    # "tag[:index]=weight" items separated by ";"
    components: str = "target_mode:0=1.0"


@dataclass
class GrpoConfig:
    group_size: int = 8
    updates: int = 300
    lr: float = 1e-3
    condition: int = -1
    epsilon: float = 1e-8
    equalize: bool = True
    sensitivity: str = "full"


@dataclass
class TrustRegionConfig:
    mode: str = "dual"
    anchor_interval: int = 20
    beta_pos: float = 1.0
    beta_vel: float = 0.5


@dataclass
class ControllerConfig:
    lambda_min: float = 1e-7
    lambda_max: float = 1e-5
    warmup_steps: int = 100
    history: int = 10
    d_target: float = 1e-2
    band: float = 0.5
    # which KL feeds the controller: sum (active terms, unweighted), position, velocity
    observe: str = "sum"


@dataclass
class AnalysisConfig:
    samples: int = 10000
    flowgrpo_sigma_max: float = 0.9


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs/default"
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    strategy: StrategyConfig = field(default_factory=StrategyConfig)
    net: NetConfig = field(default_factory=NetConfig)
    data: DataConfig = field(default_factory=DataConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    grpo: GrpoConfig = field(default_factory=GrpoConfig)
    trustregion: TrustRegionConfig = field(default_factory=TrustRegionConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    # -- builders ----------------------------------------------------------

    def build_schedule(self):
        s = self.schedule
        return _wrap("schedule", lambda: build_schedule(s.regime, s.T, s.sigma_max, s.floor))

    def build_strategy(self, **overrides):
        kw = {"kind": self.strategy.kind, "eta": self.strategy.eta, **overrides}
        return _wrap("strategy", lambda: VarianceStrategy(**kw))

    def build_data(self):
        d = self.data
        return _wrap("data", lambda: DataSpec.ring(d.n_modes, d.radius, d.mode_std))

    def build_net(self):
        n = self.net
        net = _wrap("net", lambda: VelocityNet(2, n.hidden, self.data.n_modes,
                                               n.sigma_features, n.cond_features))
        # init stream is distinct from the pretraining stream, which uses the bare seed
        return net.initialize(np.random.default_rng([self.seed, 1]))

    def build_reward(self):
        return parse_reward(self.reward.components, self.build_data().mode_centers)

    def build_controller(self):
        c = self.controller
        return KlControllerState(c.lambda_min, c.lambda_max, c.warmup_steps, c.history,
                                 c.d_target, c.band)

    @property
    def condition(self):
        return None if self.grpo.condition < 0 else self.grpo.condition

    def validate(self):
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed", "must be an unsigned 64-bit integer")
        self.build_schedule()
        self.build_strategy()
        self.build_data()
        self.build_reward()
        if not self.net.hidden or min(self.net.hidden) < 1:
            raise ConfigError("net.hidden", "needs at least one positive layer width")
        _wrap("controller", self.build_controller)
        _enum("trustregion.mode", KLMode, self.trustregion.mode)
        if self.controller.observe not in ("sum", "position", "velocity"):
            raise ConfigError("controller.observe", "must be sum, position or velocity")
        if self.grpo.sensitivity not in ("full", "velocity"):
            raise ConfigError("grpo.sensitivity", "must be full or velocity")
        if self.grpo.group_size < 2:
            raise ConfigError("grpo.group_size", "must be >= 2")
        if self.grpo.updates < 0:
            raise ConfigError("grpo.updates", "must be >= 0")
        if self.grpo.condition >= self.data.n_modes:
            raise ConfigError("grpo.condition", "must be -1 or a mode index")
        return self


def _wrap(section, build):
    try:
        return build()
    except InvalidArgumentError as exc:
        raise ConfigError(section, str(exc)) from exc


def _enum(name, enum_cls, value):
    try:
        return enum_cls(value)
    except ValueError:
        choices = ", ".join(m.value for m in enum_cls)
        raise ConfigError(name, f"{value!r} is not one of {choices}") from None


def parse_reward(text, mode_centers):
    components = []
    for item in filter(None, (part.strip() for part in text.split(";"))):
        head, sep, weight = item.partition("=")
        if not sep:
            raise ConfigError("reward.components", f"missing '=weight' in {item!r}")
        tag, _, index = head.strip().partition(":")
        tag = _enum("reward.components", RewardTag, tag.strip())
        if tag is RewardTag.CUSTOM:
            raise ConfigError("reward.components", "custom components are Python-API only")
        try:
            comp = RewardComponent(tag, float(weight), int(index) if index else None)
        except ValueError as exc:
            raise ConfigError("reward.components", str(exc)) from exc
        if comp.index is not None and not 0 <= comp.index < len(mode_centers):
            raise ConfigError("reward.components", f"mode index {comp.index} out of range")
        components.append(comp)
    try:
        return RewardSpec(components, mode_centers)
    except InvalidArgumentError as exc:
        raise ConfigError("reward.components", str(exc)) from exc


def _coerce(name, annotation, raw):
    raw = raw.strip()
    try:
        if annotation in ("int", int):
            return int(raw)
        if annotation in ("float", float):
            return float(raw)
        if annotation in ("bool", bool):
            lowered = raw.lower()
            if lowered in ("true", "1", "yes"):
                return True
            if lowered in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if annotation in ("tuple", tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
        return raw
    except ValueError:
        raise ConfigError(name, f"cannot parse {raw!r} as {annotation}") from None


def _field_types(obj):
    return {f.name: f.type for f in dataclasses.fields(obj)}


def apply_setting(cfg, key, raw):
    section, dot, name = key.partition(".")
    top = _field_types(cfg)
    if not dot:
        if key not in top or dataclasses.is_dataclass(getattr(cfg, key)):
            raise ConfigError(key, "unknown configuration key")
        setattr(cfg, key, _coerce(key, top[key], raw))
        return cfg
    sub = getattr(cfg, section, None) if section in top else None
    if sub is None or not dataclasses.is_dataclass(sub):
        raise ConfigError(key, "unknown configuration section")
    types = _field_types(sub)
    if name not in types:
        raise ConfigError(key, "unknown configuration key")
    setattr(sub, name, _coerce(key, types[name], raw))
    return cfg


def parse_config(text, base=None):
    cfg = base if base is not None else RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        apply_setting(cfg, key.strip(), value)
    return cfg.validate()


def load_config(path=None, seed=None, out_dir=None):
    cfg = RunConfig()
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("--config", str(exc)) from exc
        cfg = parse_config(text, cfg)
    if seed is not None:
        cfg.seed = int(seed)
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg.validate()


def dump_config(cfg):
    lines = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            for g in dataclasses.fields(value):
                lines.append(f"{f.name}.{g.name} = {_format(getattr(value, g.name))}")
        else:
            lines.append(f"{f.name} = {_format(value)}")
    return "\n".join(lines) + "\n"


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


__all__ = [
    "RunConfig", "load_config", "parse_config", "dump_config", "parse_reward",
    "Regime", "StrategyKind",
]
