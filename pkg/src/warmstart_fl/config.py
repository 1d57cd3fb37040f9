"""Experiment configuration, presets, file loading and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from .federation import PartitionSpec, TrainConfig
from .globalization import FTConfig
from .personalization import DSDConfig
from .warmstart import WarmConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

START_MODES = ("random", "public_pretrain", "generic_synthetic", "warm")
PERSONALIZATION_MODES = ("none", "local_ft", "sd", "dsd")
PRESETS = ("emp_study", "one_shot", "five_rounds", "unseen", "ablation_ft", "ablation_dsd",
           "comm_cost", "scale_clients")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    partition: PartitionSpec = field(default_factory=PartitionSpec)
    classifier_hidden: Tuple[int, ...] = (64,)
    train: TrainConfig = field(default_factory=TrainConfig)
    warm: WarmConfig = field(default_factory=WarmConfig)
    ft: FTConfig = field(default_factory=FTConfig)
    dsd: DSDConfig = field(default_factory=DSDConfig)
    start: str = "warm"
    personalization: str = "dsd"
    rounds: int = 5
    seeds: Tuple[int, ...] = (0,)
    holdout_folds: bool = False
    audit: bool = True
    audit_top_k: int = 3
    record_wall_time: bool = False
    label: str = ""
    # Each entry is a dict of dotted-key overrides run as its own mode.
    variants: Tuple[Dict[str, Any], ...] = ()

    def validate(self) -> "ExperimentConfig":
        if self.start not in START_MODES:
            raise ConfigError(f"start: expected one of {START_MODES}, got {self.start!r}")
        if self.personalization not in PERSONALIZATION_MODES:
            raise ConfigError(f"personalization: expected one of {PERSONALIZATION_MODES}, "
                              f"got {self.personalization!r}")
        if self.rounds < 0:
            raise ConfigError("rounds: must be >= 0")
        if not self.seeds:
            raise ConfigError("seeds: at least one seed required")
        if self.ft.per_class < 1:
            raise ConfigError("ft.per_class: must be >= 1")
        try:
            self.partition.validate()
        except ValueError as exc:
            raise ConfigError(f"partition: {exc}") from None
        for v in self.variants:
            apply_overrides(dataclasses.replace(self, variants=()), v).validate()
        return self

    def mode_label(self) -> str:
        if self.label:
            return self.label
        return f"{self.start}/{'ft' if self.ft.enabled else 'noft'}/{self.personalization}"

    def to_dict(self) -> Dict[str, Any]:
        return _jsonable(dataclasses.asdict(self))

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def resolved_variants(self) -> List["ExperimentConfig"]:
        base = dataclasses.replace(self, variants=())
        if not self.variants:
            return [base]
        return [apply_overrides(base, v) for v in self.variants]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


# ----------------------------------------------------------------------------- overrides

def _coerce(value: Any, current: Any, key: str) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(current, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            value = [value]
        return tuple(value)
    # None-valued fields (e.g. warm.lora_layers) keep whatever was given, lists as tuples
    return tuple(value) if isinstance(value, list) else value


def set_key(cfg, dotted: str, value: Any):
    """Return a copy of the (nested, frozen) dataclass ``cfg`` with ``dotted`` set."""
    head, _, rest = dotted.partition(".")
    names = {f.name for f in dataclasses.fields(cfg)}
    if head not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    current = getattr(cfg, head)
    if rest:
        if not dataclasses.is_dataclass(current):
            raise ConfigError(f"{head!r} has no sub-keys (got {dotted!r})")
        return dataclasses.replace(cfg, **{head: set_key(current, rest, value)})
    if dataclasses.is_dataclass(current):
        if not isinstance(value, dict):
            raise ConfigError(f"{dotted}: expected a table")
        for k, v in value.items():
            current = set_key(current, k, v)
        return dataclasses.replace(cfg, **{head: current})
    return dataclasses.replace(cfg, **{head: _coerce(value, current, dotted)})


def apply_overrides(cfg: ExperimentConfig, overrides: Dict[str, Any]) -> ExperimentConfig:
    for k, v in overrides.items():
        cfg = set_key(cfg, k, v)
    return cfg


def parse_override(text: str) -> Tuple[str, Any]:
    """``key=value`` with a JSON value, falling back to the raw string."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _flatten(doc: Dict[str, Any], prefix: str = "") -> Dict[str, Any]:
    out = {}
    for k, v in doc.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict) and k != "variants":
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _line_of(text: str, key: str) -> Optional[int]:
    leaf = key.rsplit(".", 1)[-1]
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip().startswith((leaf, f'"{leaf}"')):
            return n
    return None


def load_config(path, base: Optional[ExperimentConfig] = None) -> ExperimentConfig:
    """Read a TOML (or ``.json``) file on top of ``base`` (defaults if omitted)."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text()
    try:
        doc = json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    cfg = base or ExperimentConfig()
    for key, value in _flatten(doc).items():
        try:
            cfg = set_key(cfg, key, value)
        except ConfigError as exc:
            line = _line_of(text, key)
            where = f"{path}:{line}" if line else str(path)
            raise ConfigError(f"{where}: {exc}") from None
    return cfg.validate()


# ----------------------------------------------------------------------------- presets

def preset(name: str) -> ExperimentConfig:
    base = ExperimentConfig()
    if name == "emp_study":
        cfg = dataclasses.replace(base, personalization="local_ft", ft=FTConfig(enabled=False), variants=(
            {"start": "random", "label": "random"},
            {"start": "public_pretrain", "label": "public_pretrain"},
            {"start": "warm", "label": "warm"},
        ))
    elif name == "one_shot":
        cfg = dataclasses.replace(base, rounds=0, personalization="local_ft", variants=(
            {"start": "warm", "label": "warm-oneshot"},
            {"start": "generic_synthetic", "label": "generic-oneshot"},
            {"start": "random", "rounds": 1, "ft.enabled": False, "label": "fedavg-oneshot"},
        ))
    elif name == "five_rounds":
        cfg = dataclasses.replace(base, rounds=5, variants=(
            {"start": "random", "ft.enabled": False, "personalization": "local_ft", "label": "fedavg"},
            {"start": "public_pretrain", "ft.enabled": False, "personalization": "local_ft",
             "label": "public_pretrain"},
            {"start": "generic_synthetic", "ft.enabled": False, "personalization": "local_ft",
             "label": "generic_synthetic"},
            {"start": "warm", "label": "warm"},
        ))
    elif name == "unseen":
        cfg = dataclasses.replace(base, holdout_folds=True, audit=False, personalization="local_ft", variants=(
            {"start": "warm", "label": "warm"},
            {"start": "random", "ft.enabled": False, "label": "fedavg"},
        ))
    elif name == "ablation_ft":
        cfg = dataclasses.replace(base, variants=(
            {"ft.enabled": True, "label": "ft"},
            {"ft.enabled": False, "label": "noft"},
        ))
    elif name == "ablation_dsd":
        cfg = dataclasses.replace(base, audit=False, variants=(
            {"personalization": "dsd", "label": "dsd"},
            {"personalization": "sd", "label": "sd"},
            {"personalization": "local_ft", "label": "local_ft"},
        ))
    elif name == "comm_cost":
        cfg = dataclasses.replace(base, rounds=15, audit=False, personalization="local_ft", variants=(
            {"start": "random", "ft.enabled": False, "label": "fedavg"},
            {"start": "warm", "label": "warm"},
        ))
    elif name == "scale_clients":
        cfg = dataclasses.replace(base, audit=False, partition=dataclasses.replace(
            base.partition, n_clients=10 * base.partition.n_clients))
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {PRESETS}")
    return cfg.validate()
