"""Run configuration: nested dataclasses loaded from and written to JSON.

A config file must spell out every field; ``load_config`` reports each
missing, unknown or out-of-range field at once. ``RunConfig()`` holds the
built-in defaults, and ``dump_config`` writes a complete file.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .grpo import GrpoHyper
from .microworld import GenerationSpec

CONFIG_VERSION = 1


@dataclass
class ScenesConfig:
    train: int = 64
    eval: int = 32
    pretrain: int = 256


@dataclass
class PolicyConfig:
    hidden: int = 48
    init_scale: float = 1.0
    max_len: int = 32
    param_cap: int = 50_000


@dataclass
class WarmStartConfig:
    """Supervised pretraining of the shared base model on disjoint scenes."""

    steps: int = 300
    lr: float = 3e-3
    batch: int = 32


@dataclass
class RoleConfig:
    steps: int = 20
    passes: int = 1
    temperature: float = 1.0
    grpo: GrpoHyper = field(default_factory=GrpoHyper)


@dataclass
class RewardConfig:
    lam: float = 0.5
    bleu_threshold: float = 0.6


@dataclass
class CurationConfig:
    N: int = 8
    m: int = 8
    tau_low: float = 0.25
    tau_high: float = 0.75
    budget: int = 256


@dataclass
class EvalConfig:
    probe_per_kind: int = 4
    frozen_per_scene: int = 8


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    iterations: int = 3
    generation: GenerationSpec = field(default_factory=GenerationSpec)
    scenes: ScenesConfig = field(default_factory=ScenesConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    warm_start: WarmStartConfig = field(default_factory=WarmStartConfig)
    questioner: RoleConfig = field(default_factory=lambda: RoleConfig(grpo=GrpoHyper(lr=3e-3)))
    reasoner: RoleConfig = field(default_factory=lambda: RoleConfig(grpo=GrpoHyper(lr=1e-3)))
    rewards: RewardConfig = field(default_factory=RewardConfig)
    curation: CurationConfig = field(default_factory=CurationConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return _to_dict(self)

    def validate(self) -> list[str]:
        p = []
        if self.version != CONFIG_VERSION:
            p.append(f"version: expected {CONFIG_VERSION}, got {self.version}")
        if not 0 <= self.seed < 2**64:
            p.append("seed: must be an unsigned 64-bit integer")
        if self.iterations < 0:
            p.append("iterations: must be >= 0")
        try:
            self.generation.validate()
        except Exception as exc:  # SpecError carries the reason
            p.append(f"generation: {exc}")
        s = self.scenes
        if s.train < 1:
            p.append("scenes.train: must be >= 1")
        if s.eval < 1:
            p.append("scenes.eval: must be >= 1")
        if s.pretrain < 0:
            p.append("scenes.pretrain: must be >= 0")
        if self.policy.hidden < 1:
            p.append("policy.hidden: must be >= 1")
        if self.policy.max_len < 1:
            p.append("policy.max_len: must be >= 1")
        if self.policy.init_scale < 0:
            p.append("policy.init_scale: must be >= 0")
        w = self.warm_start
        if w.steps < 0:
            p.append("warm_start.steps: must be >= 0")
        if w.steps and s.pretrain < 1:
            p.append("scenes.pretrain: warm start needs pretraining scenes")
        if not w.lr > 0:
            p.append("warm_start.lr: must be positive")
        if w.batch < 1:
            p.append("warm_start.batch: must be >= 1")
        for role in ("questioner", "reasoner"):
            r = getattr(self, role)
            if r.steps < 1:
                p.append(f"{role}.steps: must be >= 1")
            if r.passes < 1:
                p.append(f"{role}.passes: must be >= 1")
            if not r.temperature > 0:
                p.append(f"{role}.temperature: must be positive")
            p += [f"{role}.grpo.{msg}" for msg in r.grpo.validate()]
        if self.rewards.lam < 0:
            p.append("rewards.lam: must be >= 0")
        if not 0 < self.rewards.bleu_threshold <= 1:
            p.append("rewards.bleu_threshold: must lie in (0, 1]")
        c = self.curation
        if c.N < 1:
            p.append("curation.N: must be >= 1")
        if c.m < 2:
            p.append("curation.m: must be >= 2")
        if not 0 <= c.tau_low <= 1:
            p.append("curation.tau_low: must lie in [0, 1]")
        if not 0 <= c.tau_high <= 1:
            p.append("curation.tau_high: must lie in [0, 1]")
        if c.tau_low > c.tau_high:
            p.append("curation.tau_low: must not exceed curation.tau_high")
        if c.budget < 1:
            p.append("curation.budget: must be >= 1")
        if self.eval.probe_per_kind < 1:
            p.append("eval.probe_per_kind: must be >= 1")
        if self.eval.frozen_per_scene < 1:
            p.append("eval.frozen_per_scene: must be >= 1")
        return p


def _to_dict(obj) -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            v = _to_dict(v)
        elif isinstance(v, tuple):
            v = list(v)
        out[f.name] = v
    return out


def _types(cls) -> dict:
    import typing

    return typing.get_type_hints(cls)


def _from_dict(cls, data, prefix: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{prefix or '<root>'}: expected an object")
        return cls()
    hints = _types(cls)
    names = [f.name for f in dataclasses.fields(cls)]
    for key in data:
        if key not in names:
            problems.append(f"{prefix}{key}: unknown field")
    kwargs = {}
    for name in names:
        where = f"{prefix}{name}"
        if name not in data:
            problems.append(f"{where}: missing")
            continue
        typ, value = hints[name], data[name]
        if dataclasses.is_dataclass(typ):
            kwargs[name] = _from_dict(typ, value, where + ".", problems)
        else:
            kwargs[name] = _coerce(typ, value, where, problems)
    try:
        return cls(**kwargs)
    except TypeError:
        return cls()


def _coerce(typ, value, where: str, problems: list[str]):
    text = str(typ)
    if typ is bool:
        ok = isinstance(value, bool)
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif typ is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        value = float(value) if ok else value
    elif "tuple" in text:
        ok = isinstance(value, list) and all(isinstance(x, str) for x in value)
        value = tuple(value) if ok else value
    else:
        ok = True
    if not ok:
        problems.append(f"{where}: wrong type {type(value).__name__}")
    return value


def config_from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _from_dict(RunConfig, data, "", problems)
    if not problems:
        problems = cfg.validate()
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError([f"<file>: not valid JSON ({exc})"]) from None
    except OSError as exc:
        raise ConfigError([f"<file>: cannot read ({exc})"]) from None
    return config_from_dict(data)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
