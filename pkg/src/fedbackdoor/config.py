"""Experiment configuration: TOML schema, defaults and validation.

Every table maps onto a frozen dataclass below; unknown keys are rejected so
typos surface before training starts. ``ConfigError`` messages name the
offending dotted field.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .attacks import ALGORITHMS
from .data import TRIGGER_KINDS

DEFENSE_NAMES = ("none", "indicator", "multikrum", "deepsight", "foolsgold", "rflbat", "flame", "norm_clip")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic"  # synthetic | idx
    num_classes: int = 10
    dim: int = 8
    per_class: int = 500
    test_per_class: int = 100
    noise: float = 0.6
    margin: int = 0  # near-constant background frame width (synthetic only)
    seed: int | None = None  # template seed; defaults to master_seed
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "mlp"  # mlp | cnn
    hidden: int = 64
    channels: int = 8


@dataclass(frozen=True)
class BenignConfig:
    local_iterations: int = 2
    lr: float = 0.05
    batch: int = 64


@dataclass(frozen=True)
class PartitionConfig:
    alpha: float = 0.2
    seed: int | None = None


@dataclass(frozen=True)
class TriggerConfig:
    kind: str = "pixel"
    size: int = 3
    value: float = 1.0
    row: int = 0
    col: int = 0
    ratio: float = 0.2
    source_class: int = 0  # semantic: class whose reserved samples carry the feature
    pool_size: int = 400  # edge / semantic: reserved samples (half held out for BA)


@dataclass(frozen=True)
class PretrainSection:
    iterations: int = 10
    lr: float = 0.05


@dataclass(frozen=True)
class ThreeDFedSection:
    lambda_c: float = 0.1
    noise_scale: float = 0.01
    decoy_count: int = 0


@dataclass(frozen=True)
class AttackSection:
    enabled: bool = False
    algorithm: str = "vanilla"
    plr: float = 0.05
    iterations: int = 200
    poison_count: int = 200
    batch: int = 64
    target_label: int = 0
    start_round: int = 1
    duration: int = 0
    cohort_size: int = 1
    scale_gamma: float = 1.0
    pgd_radius: float = math.inf
    neurotoxin_k: float = 0.25
    dba: bool = False
    adaptive: bool = False
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    pretrain: PretrainSection = field(default_factory=PretrainSection)
    threedfed: ThreeDFedSection = field(default_factory=ThreeDFedSection)


@dataclass(frozen=True)
class DefenseConfig:
    name: str = "none"
    start_round: int = 1  # earlier rounds run plain FedAVG (warm-up of the global model)
    multikrum_f: int | None = None  # default: largest f with 2f+2 < n
    multikrum_m: int | None = None  # default: n - f
    deepsight_tau: float = 0.5
    deepsight_probes: int = 256
    rflbat_eps1: float = 2.0
    rflbat_k: int = 2
    flame_eps: float = 3705.0
    flame_delta: float = 0.001
    flame_on_models: bool = True
    clip_bound: float = 1.0  # norm_clip defense
    ncd_bound: float | None = None  # indicator: clip every update before inspection


@dataclass(frozen=True)
class IndicatorConfig:
    source: str = "noise"  # noise | synthetic
    size: int = 800
    iterations: int = 200
    lr: float = 0.01
    lam: float = 0.1
    epsilon: float = 95.0
    batch: int = 64
    force: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    master_seed: int = 0
    num_clients: int = 100
    clients_per_round: int = 10
    total_rounds: int = 10
    workers: int = 1
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    benign: BenignConfig = field(default_factory=BenignConfig)
    partition: PartitionConfig = field(default_factory=PartitionConfig)
    attack: AttackSection = field(default_factory=AttackSection)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    indicator: IndicatorConfig = field(default_factory=IndicatorConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        d = self.to_dict()
        d.pop("workers")  # parallelism never changes results
        blob = json.dumps(d, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def attack_window(self) -> range:
        a = self.attack
        return range(a.start_round, a.start_round + a.duration) if a.enabled else range(0)


# ---------------------------------------------------------------- loading

def _build(cls, raw: dict, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a table")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown field {prefix}{unknown[0]}")
    kw = {}
    for name, value in raw.items():
        default = getattr(cls(), name)
        if hasattr(default, "__dataclass_fields__"):
            kw[name] = _build(type(default), value, f"{prefix}{name}.")
        else:
            kw[name] = _coerce(value, default, f"{prefix}{name}")
    return cls(**kw)


def _coerce(value, default, name):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean")
        return value
    if isinstance(default, float) or (default is None and isinstance(value, (int, float)) and not isinstance(value, bool)):
        if isinstance(value, str) and value.lower() in ("inf", "infinity"):
            return math.inf
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number")
        return float(value) if isinstance(default, float) else value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{name}: expected a string")
    return value


def from_dict(raw: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, raw, "")
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        raw = tomllib.loads(p.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {p}") from None
    except tomllib.TOMLDecodeError as e:
        raise ConfigError(f"{p}: {e}") from None
    return from_dict(raw)


def load_raw(path) -> dict:
    return tomllib.loads(Path(path).read_text())


def set_dotted(raw: dict, key: str, value) -> dict:
    """Copy of ``raw`` with the dotted ``key`` set to ``value``."""
    out = copy.deepcopy(raw)
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"{key}: {p} is not a table")
    node[parts[-1]] = value
    return out


def parse_value(text: str):
    """A TOML scalar literal (``0.05``, ``true``, ``"x"``) or a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


# ---------------------------------------------------------------- validation

def _require(cond: bool, name: str, msg: str):
    if not cond:
        raise ConfigError(f"{name}: {msg}")


def validate(cfg: ExperimentConfig) -> None:
    _require(cfg.num_clients >= 1, "num_clients", "must be >= 1")
    _require(1 <= cfg.clients_per_round <= cfg.num_clients, "clients_per_round", "must lie in [1, num_clients]")
    _require(cfg.total_rounds >= 0, "total_rounds", "must be >= 0")
    _require(cfg.workers >= 1, "workers", "must be >= 1")
    d = cfg.dataset
    _require(d.kind in ("synthetic", "idx"), "dataset.kind", "must be 'synthetic' or 'idx'")
    if d.kind == "synthetic":
        _require(d.num_classes >= 2, "dataset.num_classes", "must be >= 2")
        _require(d.dim >= 3, "dataset.dim", "must be >= 3")
        _require(d.per_class >= 1 and d.test_per_class >= 1, "dataset.per_class", "must be >= 1")
    else:
        for k in ("train_images", "train_labels", "test_images", "test_labels"):
            _require(bool(getattr(d, k)), f"dataset.{k}", "required for idx datasets")
    _require(cfg.model.arch in ("mlp", "cnn"), "model.arch", "must be 'mlp' or 'cnn'")
    b = cfg.benign
    _require(b.local_iterations >= 0, "benign.local_iterations", "must be >= 0")
    _require(b.lr > 0, "benign.lr", "must be positive")
    _require(b.batch >= 2, "benign.batch", "must be >= 2")
    _require(cfg.partition.alpha > 0, "partition.alpha", "must be positive")
    a = cfg.attack
    if a.enabled:
        _require(a.algorithm in ALGORITHMS, "attack.algorithm", f"must be one of {ALGORITHMS}")
        _require(a.plr > 0, "attack.plr", "must be positive")
        _require(a.iterations >= 0, "attack.iterations", "must be >= 0")
        _require(a.poison_count >= 0, "attack.poison_count", "must be >= 0")
        _require(a.start_round >= 1, "attack.start_round", "must be >= 1")
        _require(a.duration >= 0, "attack.duration", "must be >= 0")
        _require(1 <= a.cohort_size <= cfg.clients_per_round, "attack.cohort_size",
                 "must lie in [1, clients_per_round]")
        _require(0 <= a.target_label < _num_classes(cfg), "attack.target_label", "outside the label space")
        _require(a.scale_gamma >= 1.0, "attack.scale_gamma", "must be >= 1")
        _require(0.0 < a.neurotoxin_k < 1.0, "attack.neurotoxin_k", "must lie in (0, 1)")
        _require(a.pgd_radius > 0, "attack.pgd_radius", "must be positive")
        _require(a.trigger.kind in TRIGGER_KINDS and a.trigger.kind != "dba_local", "attack.trigger.kind",
                 "must be pixel, blend, semantic or edge")
        _require(0.0 < a.trigger.ratio <= 1.0, "attack.trigger.ratio", "must lie in (0, 1]")
        if a.dba:
            _require(a.trigger.kind == "pixel", "attack.dba", "needs a pixel trigger")
        if a.algorithm == "threedfed":
            _require(a.threedfed.decoy_count < a.cohort_size, "attack.threedfed.decoy_count",
                     "must leave at least one backdoor member")
            _require(a.cohort_size - a.threedfed.decoy_count >= 2 or a.threedfed.noise_scale == 0,
                     "attack.threedfed.noise_scale", "zero-sum noise needs two backdoor members")
    df = cfg.defense
    _require(df.name in DEFENSE_NAMES, "defense.name", f"must be one of {DEFENSE_NAMES}")
    _require(df.start_round >= 1, "defense.start_round", "must be >= 1")
    n = cfg.clients_per_round
    if df.name == "multikrum":
        f = default_krum_f(n) if df.multikrum_f is None else df.multikrum_f
        _require(2 * f + 2 < n, "defense.multikrum_f", "needs 2f+2 < clients_per_round")
        if df.multikrum_m is not None:
            _require(1 <= df.multikrum_m <= n, "defense.multikrum_m", "must lie in [1, clients_per_round]")
    if df.name in ("rflbat", "flame"):
        _require(n >= 3, "clients_per_round", f"{df.name} needs at least 3 clients per round")
    _require(df.flame_eps > 0, "defense.flame_eps", "must be positive")
    _require(0.0 < df.flame_delta < 1.0, "defense.flame_delta", "must lie in (0, 1)")
    _require(df.clip_bound > 0, "defense.clip_bound", "must be positive")
    _require(df.ncd_bound is None or df.ncd_bound > 0, "defense.ncd_bound", "must be positive")
    ind = cfg.indicator
    if df.name == "indicator":
        _require(ind.source in ("noise", "synthetic"), "indicator.source", "must be 'noise' or 'synthetic'")
        _require(ind.size >= 1, "indicator.size", "must be >= 1")
        _require(ind.iterations >= 1, "indicator.iterations", "must be >= 1")
        _require(ind.lr > 0, "indicator.lr", "must be positive")
        _require(ind.lam >= 0, "indicator.lam", "must be >= 0")
        _require(0.0 <= ind.epsilon <= 100.0, "indicator.epsilon", "must lie in [0, 100]")


def _num_classes(cfg: ExperimentConfig) -> int:
    return cfg.dataset.num_classes


def default_krum_f(n: int) -> int:
    return max((n - 3) // 2, 0)


def with_overrides(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    out = replace(cfg, **kw)
    validate(out)
    return out
