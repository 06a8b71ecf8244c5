"""Run configuration: JSON schema with exhaustive key validation.

Every field has a default, so ``{}`` (plus a kind) is a valid config.
``--override a.b=value`` parses ``value`` as JSON and falls back to a plain
string.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from typing import Optional

SCHEMA_VERSION = 1
KINDS = ("train", "calibrate-ptq", "finetune-qlora", "sample", "analyze-error", "evaluate", "ablate")


class ConfigError(ValueError):
    pass


@dataclass
class ScheduleCfg:
    beta_min: float = 0.1
    beta_max: float = 20.0
    T: float = 1.0
    t_min: float = 1e-4


@dataclass
class GridCfg:
    steps: int = 20
    spacing: str = "logsnr"          # logsnr | time | quadratic
    sampler: str = "dpm2"            # ddim | dpm1 | dpm2 | plms
    plms_order: int = 4


@dataclass
class DistributionCfg:
    kind: str = "ring"               # ring | gaussian
    n_modes: int = 8
    radius: float = 4.0
    std: float = 0.3
    mean: list = field(default_factory=lambda: [0.0, 0.0])


@dataclass
class NetCfg:
    hidden_widths: list = field(default_factory=lambda: [64, 64])
    time_embed_dim: int = 16
    max_frequency: float = 1e4
    train_steps: int = 5000
    batch_size: int = 256
    lr: float = 1e-3


@dataclass
class QuantCfg:
    w_bits: int = 8                  # WxAy: weights x bits
    a_bits: int = 8                  # activations y bits
    method: str = "sa"               # sa | naive | none
    pairing: str = "first_to_second"  # first_to_second | second_to_first
    recon_iterations: int = 300
    recon_batch_pairs: int = 8
    calib_seeds: int = 1
    calib_chains: int = 256


@dataclass
class QLoRACfg:
    steps: list = field(default_factory=lambda: [100, 50, 20])
    batch_size: int = 4
    rank: int = 32
    epochs: int = 40
    w_cos: float = 1.0
    w_mota: float = 1.0
    pairing: str = "first_to_second"  # first_to_second | second_to_first | same
    lr: float = 1e-3
    lr_quant: float = 1e-3
    n_chains: int = 64


@dataclass
class ErrorCfg:
    deltas: list = field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    h_values: list = field(default_factory=lambda: [0.2, 0.1, 0.05, 0.025])
    h_delta: float = 1e-2
    lam_start: float = 0.0
    chains: int = 256
    sensitivity_delta: float = 1e-2
    sensitivity_seeds: int = 5


@dataclass
class EvalCfg:
    chains: int = 4096
    reference: int = 4096
    dump_chains: int = 64
    floor_pairs: int = 8


@dataclass
class AblateCfg:
    compare: str = "plain-qlora"     # plain-qlora | naive-ptq | none
    seeds: int = 1


@dataclass
class RunConfig:
    kind: str = "sample"
    version: int = SCHEMA_VERSION
    seed: int = 0
    out_dir: str = "runs/default"
    model_checkpoint: Optional[str] = None
    quant_checkpoint: Optional[str] = None
    schedule: ScheduleCfg = field(default_factory=ScheduleCfg)
    grid: GridCfg = field(default_factory=GridCfg)
    distribution: DistributionCfg = field(default_factory=DistributionCfg)
    net: NetCfg = field(default_factory=NetCfg)
    quant: QuantCfg = field(default_factory=QuantCfg)
    qlora: QLoRACfg = field(default_factory=QLoRACfg)
    error: ErrorCfg = field(default_factory=ErrorCfg)
    eval: EvalCfg = field(default_factory=EvalCfg)
    ablate: AblateCfg = field(default_factory=AblateCfg)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


_CHOICES = {
    ("grid", "spacing"): ("logsnr", "time", "quadratic"),
    ("grid", "sampler"): ("ddim", "dpm1", "dpm2", "plms"),
    ("distribution", "kind"): ("ring", "gaussian"),
    ("quant", "method"): ("sa", "naive", "none"),
    ("quant", "pairing"): ("first_to_second", "second_to_first"),
    ("qlora", "pairing"): ("first_to_second", "second_to_first", "same"),
    ("ablate", "compare"): ("plain-qlora", "naive-ptq", "none"),
}


def _build(cls, data, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) {', '.join(path + k for k in unknown)}")
    defaults = cls()
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{path}{name}.")
        else:
            kwargs[name] = _coerce(value, default, f"{path}{name}")
    return cls(**kwargs)


def _coerce(value, default, where: str):
    if default is None:
        if value is not None and not isinstance(value, str):
            raise ConfigError(f"{where} must be a string or null")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be a list")
        return list(value)
    return value


def validate(cfg: RunConfig) -> RunConfig:
    if cfg.version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {cfg.version}")
    if cfg.kind not in KINDS:
        raise ConfigError(f"kind must be one of {', '.join(KINDS)}; got {cfg.kind!r}")
    for (section, key), choices in _CHOICES.items():
        v = getattr(getattr(cfg, section), key)
        if v not in choices:
            raise ConfigError(f"{section}.{key} must be one of {', '.join(choices)}; got {v!r}")
    if cfg.seed < 0:
        raise ConfigError("seed must be non-negative")
    if cfg.grid.steps < 1:
        raise ConfigError("grid.steps must be >= 1")
    for name in ("w_bits", "a_bits"):
        if not 2 <= getattr(cfg.quant, name) <= 8:
            raise ConfigError(f"quant.{name} must be in [2, 8]")
    steps = cfg.qlora.steps
    if not steps or any(not isinstance(s, int) or s < 1 for s in steps) or any(
            a <= b for a, b in zip(steps, steps[1:])):
        raise ConfigError("qlora.steps must be a strictly decreasing list of positive integers")
    if cfg.qlora.epochs < 0 or cfg.qlora.batch_size < 1 or cfg.qlora.rank < 1:
        raise ConfigError("qlora.epochs >= 0, batch_size >= 1 and rank >= 1 are required")
    if len(cfg.error.deltas) < 4 or len(cfg.error.h_values) < 4:
        raise ConfigError("error sweeps need at least 4 points each")
    if any(d < 0 for d in cfg.error.deltas):
        raise ConfigError("error.deltas must be non-negative")
    if cfg.net.train_steps < 0 or cfg.quant.recon_iterations < 0:
        raise ConfigError("iteration counts must be non-negative")
    if cfg.eval.chains < 1 or cfg.eval.reference < 1:
        raise ConfigError("eval.chains and eval.reference must be positive")
    if cfg.distribution.kind == "gaussian" and len(cfg.distribution.mean) < 1:
        raise ConfigError("distribution.mean must be non-empty")
    return cfg


def from_dict(data: dict) -> RunConfig:
    return validate(_build(RunConfig, data, ""))


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    """Set dotted keys in a raw config dict; unknown keys surface on build."""
    data = json.loads(json.dumps(data))
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {text!r} descends into a non-object")
        node[path[-1]] = value
    return data


def load(path, overrides=None) -> RunConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(data, overrides))
