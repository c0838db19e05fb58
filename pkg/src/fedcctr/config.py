"""Experiment configuration: TOML sections mapped onto dataclasses and validated as a whole."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .adaldp import ACCOUNTANTS, MODES
from .nn_core import ConfigError


@dataclass
class DataSection:
    source: str = "synthetic"              # synthetic | files
    interactions: str = ""                 # JSON-lines path when source = files
    item_meta: str = ""
    users: int = 200
    items_per_domain: int = 500
    latent_dim: int = 8
    sparsity: float = 0.97
    categories: int = 8
    popularity_skew: float = 1.0
    noise: float = 0.5
    min_user_interactions: int = 10
    min_item_frequency: int = 10
    min_domain_events: int = 3


@dataclass
class AugmentationSection:
    enabled: bool = True
    backend: str = "mock"                  # mock | http
    temperature: float = 0.4
    top_p: float = 0.45
    candidates: int = 10
    cache_dir: str = ""
    timeout: float = 60.0
    model: str = ""


@dataclass
class ModelSection:
    d_id: int = 32
    d_feat: int = 16
    d_pos: int = 16
    d_other: int = 16
    heads: int = 8
    ffn_mult: int = 4
    mlp_widths: List[int] = field(default_factory=lambda: [512, 256, 128])
    dropout: float = 0.1
    max_len: int = 20
    lambda1: float = 0.3
    lambda2: float = 0.5
    alpha: float = 0.5
    tau: float = 0.1


@dataclass
class FederationSection:
    rounds: int = 100
    eta: float = 5e-4
    rho: float = 0.01
    batch_size: int = 32
    local_steps: int = 1
    optimizer: str = "sgd"                 # sgd | adamw
    weight_decay: float = 0.01


@dataclass
class PrivacySection:
    enabled: bool = True
    epsilon: float = 1.0
    delta: float = 1e-5
    zeta: float = 2.0
    theta: float = 1.0
    sigma_0: float = 1.0
    decay: float = 0.997
    mode: str = "decrement"
    accountant: str = "appendix"


@dataclass
class EvaluationSection:
    ks: List[int] = field(default_factory=lambda: [2, 5, 10])


@dataclass
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    data: DataSection = field(default_factory=DataSection)
    augmentation: AugmentationSection = field(default_factory=AugmentationSection)
    model: ModelSection = field(default_factory=ModelSection)
    federation: FederationSection = field(default_factory=FederationSection)
    privacy: PrivacySection = field(default_factory=PrivacySection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> Dict[str, Any]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def validate(self) -> None:
        validate(self)


_SECTIONS = {f.name: f.type for f in dataclasses.fields(ExperimentConfig) if f.name not in ("seed", "threads")}
_SECTION_TYPES = {
    "data": DataSection, "augmentation": AugmentationSection, "model": ModelSection,
    "federation": FederationSection, "privacy": PrivacySection, "evaluation": EvaluationSection,
}


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
        return list(value)
    return value


def _section(cls, name: str, values: Mapping[str, Any]):
    if not isinstance(values, Mapping):
        raise ConfigError(f"[{name}] must be a table")
    obj = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {name}.{key}")
        setattr(obj, key, _coerce(f"{name}.{key}", value, getattr(obj, key)))
    return obj


def from_mapping(raw: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config from parsed TOML; unknown sections or keys are rejected."""
    cfg = ExperimentConfig()
    for key, value in raw.items():
        if key in ("seed", "threads"):
            setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
        elif key in _SECTION_TYPES:
            setattr(cfg, key, _section(_SECTION_TYPES[key], key, value))
        else:
            raise ConfigError(f"unknown key {key}")
    return cfg


def load_config(path: Optional[Path]) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return from_mapping(raw)


def apply_override(cfg: ExperimentConfig, dotted: str) -> None:
    """Apply ``section.key=value`` (value parsed as a TOML literal, bare words as strings)."""
    if "=" not in dotted:
        raise ConfigError(f"override must look like section.key=value, got {dotted!r}")
    key, text = dotted.split("=", 1)
    try:
        value = tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        value = text
    parts = key.strip().split(".")
    if len(parts) == 1:
        from_mapping({parts[0]: value})
        setattr(cfg, parts[0], _coerce(parts[0], value, getattr(cfg, parts[0])))
        return
    if len(parts) != 2 or parts[0] not in _SECTION_TYPES:
        raise ConfigError(f"unknown key {key}")
    section = getattr(cfg, parts[0])
    if not hasattr(section, parts[1]):
        raise ConfigError(f"unknown key {key}")
    setattr(section, parts[1], _coerce(key, value, getattr(section, parts[1])))


def _require(cond: bool, field_name: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"{field_name}: {msg}")


def validate(cfg: ExperimentConfig) -> None:
    """Whole-config checks; raises :class:`ConfigError` naming the offending field."""
    d, a, m, f, p = cfg.data, cfg.augmentation, cfg.model, cfg.federation, cfg.privacy
    _require(cfg.threads >= 1, "threads", "must be >= 1")
    _require(d.source in ("synthetic", "files"), "data.source", "must be 'synthetic' or 'files'")
    if d.source == "files":
        _require(bool(d.interactions), "data.interactions", "required when data.source = 'files'")
    else:
        _require(d.users >= 2 and d.items_per_domain >= 2, "data.users", "synthetic counts must be >= 2")
        _require(0.0 < d.sparsity < 1.0, "data.sparsity", f"must be in (0, 1), got {d.sparsity}")
        n_events = round((1.0 - d.sparsity) * d.users * d.items_per_domain)
        _require(n_events >= d.users, "data.sparsity",
                 f"{d.sparsity} leaves {n_events} events per domain for {d.users} users")
        _require(d.latent_dim >= 1, "data.latent_dim", "must be >= 1")
    _require(d.min_domain_events >= 3, "data.min_domain_events", "must be >= 3 for the leave-one-out split")
    _require(a.backend in ("mock", "http"), "augmentation.backend", "must be 'mock' or 'http'")
    _require(a.candidates >= 1, "augmentation.candidates", "must be >= 1")
    _require(0.0 <= a.temperature <= 2.0, "augmentation.temperature", "must be in [0, 2]")
    _require(0.0 < a.top_p <= 1.0, "augmentation.top_p", "must be in (0, 1]")
    for name in ("d_id", "d_feat", "d_pos", "d_other", "heads", "ffn_mult", "max_len"):
        _require(getattr(m, name) >= 1, f"model.{name}", "must be >= 1")
    _require((m.d_id + m.d_feat + m.d_pos) % m.heads == 0, "model.heads", "must divide d_id + d_feat + d_pos")
    _require(len(m.mlp_widths) >= 1 and all(w >= 1 for w in m.mlp_widths), "model.mlp_widths", "must be positive")
    _require(0.0 <= m.dropout < 1.0, "model.dropout", "must be in [0, 1)")
    _require(0.0 <= m.lambda1 <= 1.0, "model.lambda1", f"must be in [0, 1], got {m.lambda1}")
    _require(0.0 <= m.lambda2 <= 1.0, "model.lambda2", f"must be in [0, 1], got {m.lambda2}")
    _require(m.alpha >= 0.0, "model.alpha", "must be >= 0")
    _require(m.tau > 0.0, "model.tau", f"must be > 0, got {m.tau}")
    _require(f.rounds >= 0, "federation.rounds", "must be >= 0")
    _require(f.eta > 0.0, "federation.eta", "must be > 0")
    _require(0.0 < f.rho <= 1.0, "federation.rho", f"must be in (0, 1], got {f.rho}")
    _require(f.batch_size >= 1, "federation.batch_size", "must be >= 1")
    _require(f.local_steps >= 1, "federation.local_steps", "must be >= 1")
    _require(f.optimizer in ("sgd", "adamw"), "federation.optimizer", "must be 'sgd' or 'adamw'")
    _require(p.zeta > 1.0, "privacy.zeta", f"must be > 1, got {p.zeta}")
    _require(p.epsilon > 0.0, "privacy.epsilon", "must be > 0")
    _require(0.0 < p.delta < 1.0, "privacy.delta", "must be in (0, 1)")
    _require(p.theta > 0.0, "privacy.theta", "must be > 0")
    _require(p.sigma_0 >= 0.0, "privacy.sigma_0", "must be >= 0")
    _require(0.0 < p.decay <= 1.0, "privacy.decay", "must be in (0, 1]")
    _require(p.mode in MODES, "privacy.mode", f"must be one of {MODES}")
    _require(p.accountant in ACCOUNTANTS, "privacy.accountant", f"must be one of {ACCOUNTANTS}")
    _require(len(cfg.evaluation.ks) >= 1 and all(k >= 1 for k in cfg.evaluation.ks), "evaluation.ks",
             "must be positive")


def dump_toml(cfg: ExperimentConfig) -> str:
    """Render a config back to TOML (used for the resolved-config echo)."""
    def lit(v: Any) -> str:
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, float):
            return "inf" if math.isinf(v) else repr(v)
        if isinstance(v, str):
            return json.dumps(v)
        if isinstance(v, list):
            return "[" + ", ".join(lit(x) for x in v) + "]"
        return str(v)

    lines = [f"seed = {cfg.seed}", f"threads = {cfg.threads}"]
    for name in _SECTION_TYPES:
        lines.append(f"\n[{name}]")
        for k, v in dataclasses.asdict(getattr(cfg, name)).items():
            lines.append(f"{k} = {lit(v)}")
    return "\n".join(lines) + "\n"
