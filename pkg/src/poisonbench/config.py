"""Run configuration: strict JSON parsing, resolution, and hashing.

Unknown keys are rejected outright; silent hyperparameter drift is the
failure mode this exists to prevent.  Every command writes the resolved
configuration and its hash next to its outputs.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .attacks import config_type
from .errors import ConfigError
from .perturb import PatchSpec


def _take(section, name, allowed):
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)} (allowed: {sorted(allowed)})")


@dataclass
class DataConfig:
    source: str = "synthetic"
    seed: int = 11
    image_size: int = 16
    class_count: int = 10
    per_class: int = 250
    test_per_class: int = 100
    pretrain_seed: int = 505
    pretrain_per_class: int = 250
    pretrain_test_per_class: int = 50
    paths: dict = field(default_factory=dict)

    def validate(self):
        if self.source not in ("synthetic", "cifar_binary"):
            raise ConfigError(f"data.source must be synthetic|cifar_binary, got {self.source!r}")
        if self.source == "cifar_binary":
            missing = {"train", "test"} - set(self.paths)
            if missing:
                raise ConfigError(f"data.paths missing {sorted(missing)} for cifar_binary")
            allowed = {"train", "test", "pretrain_train", "pretrain_test"}
            _take(self.paths, "data.paths", allowed)


@dataclass
class PretrainConfig:
    arch: str = "conv_small"
    hp_set: str = "auto"  # auto: B for plain nets, C for batch-norm nets
    epoch_scale: int = 10
    n_checkpoints: int = 10
    seed: int = 1000
    augment: bool = False
    adversarial: bool = False
    adversarial_steps: int = 5
    adversarial_epsilon: float = 16.0 / 255.0


@dataclass
class AttackSection:
    name: str = "fc"
    params: dict = field(default_factory=dict)

    def build_config(self):
        cls = config_type(self.name)
        allowed = {f.name for f in fields(cls)}
        params = dict(self.params)
        patch_size = params.pop("patch_size", None)
        patch_path = params.pop("patch_path", None)
        unknown = set(params) - allowed
        if unknown:
            raise ConfigError(f"attack.params: unknown keys {sorted(unknown)} for {self.name!r}")
        cfg = cls(**params)
        if patch_path is not None:
            if "patch" not in allowed:
                raise ConfigError(f"attack {self.name!r} takes no patch")
            cfg.patch = PatchSpec.load(patch_path)
        elif patch_size is not None:
            if "patch" not in allowed:
                raise ConfigError(f"attack {self.name!r} takes no patch")
            cfg.patch = PatchSpec.checkerboard(int(patch_size))
        return cfg


@dataclass
class BenchmarkSection:
    mode: str = "transfer_ffe"
    threat: str = "white_box"
    n_trials: int = 100
    budget: int = 25
    victim_archs: tuple = ("conv_wide", "conv_tiny")
    ensemble_size: int = 1
    fixed_target_class: int | None = None
    fixed_base_class: int | None = None
    eval_flip: bool = False
    whole_class_metric: bool = True
    scratch_augment: bool = False
    finetune_hp_set: str = "G"
    finetune_epoch_scale: int = 1
    sweep_budgets: tuple = ()
    sweep_fraction: float = 0.01

    def __post_init__(self):
        self.victim_archs = tuple(self.victim_archs)
        self.sweep_budgets = tuple(self.sweep_budgets)


@dataclass
class RuntimeConfig:
    deterministic: bool = True
    parallelism: int = 1
    out_dir: str = ""


@dataclass
class RunConfig:
    data: DataConfig
    pretrain: PretrainConfig
    attack: AttackSection
    benchmark: BenchmarkSection
    runtime: RuntimeConfig

    def resolved(self):
        doc = {
            "data": asdict(self.data),
            "pretrain": asdict(self.pretrain),
            "attack": {"name": self.attack.name, "params": _jsonable(self.attack.params)},
            "benchmark": asdict(self.benchmark),
            "runtime": asdict(self.runtime),
        }
        return doc

    def canonical_json(self):
        return json.dumps(self.resolved(), sort_keys=True, indent=2) + "\n"

    def config_hash(self):
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()[:12]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in sorted(obj.items())}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def _build_section(cls, section, name):
    allowed = {f.name for f in fields(cls)}
    _take(section, name, allowed)
    return cls(**section)


def parse_config(doc):
    """Strict parse of a config JSON document (a dict)."""
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    _take(doc, "config", {"data", "pretrain", "attack", "benchmark", "runtime"})
    data = _build_section(DataConfig, doc.get("data", {}), "data")
    data.validate()
    pretrain = _build_section(PretrainConfig, doc.get("pretrain", {}), "pretrain")
    attack_sec = doc.get("attack", {})
    _take(attack_sec, "attack", {"name", "params"})
    attack = AttackSection(name=attack_sec.get("name", "fc"), params=attack_sec.get("params", {}))
    benchmark = _build_section(BenchmarkSection, doc.get("benchmark", {}), "benchmark")
    runtime = _build_section(RuntimeConfig, doc.get("runtime", {}), "runtime")
    cfg = RunConfig(data=data, pretrain=pretrain, attack=attack, benchmark=benchmark, runtime=runtime)
    cfg.attack.build_config()  # validate attack params eagerly
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}")
    return parse_config(doc)


def default_config():
    return parse_config({})
