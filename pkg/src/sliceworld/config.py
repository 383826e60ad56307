"""Run configuration: flat ``key = value`` text files with dotted keys.

One file describes a whole run (generator, architecture, losses, stages,
eval options). Values are JSON literals (bare words read as strings).
Unknown keys are rejected; a canonical copy of the resolved config is
written into every output directory.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .errors import ConfigError
from .model import ArchConfig
from .objectives import LossConfig
from .phantom import GeneratorConfig
from .trainer import StageConfig, finetune_config, pretrain_config


@dataclass
class EvalConfig:
    """Options for the evaluation commands."""

    ks: tuple = (1, 3, 5)
    budgets: tuple = (1.0, 0.5, 0.25)
    modes: tuple = ("lesion_zero", "uncertainty_zero")
    bootstrap_resamples: int = 10000
    sig_file_a: str = ""
    sig_file_b: str = ""
    sig_metric: str = "bleu1"
    report_from: str = ""
    report_probes_from: str = ""
    render: bool = False


@dataclass
class RunConfig:
    seed: int = 0
    jobs: int = 1
    run_name: str = ""
    dataset_dir: str = ""
    checkpoint: str = ""
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    pretrain: StageConfig = field(default_factory=pretrain_config)
    finetune: StageConfig = field(default_factory=finetune_config)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.generator.validate()
        self.arch.validate()
        self.loss.validate()
        self.pretrain.validate()
        self.finetune.validate()
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


_SECTIONS = ("generator", "arch", "loss", "pretrain", "finetune", "eval")
_TOP_FIELDS = ("seed", "jobs", "run_name", "dataset_dir", "checkpoint")


def _coerce(value, target_type, key):
    if target_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if target_type is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if target_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if target_type is str:
        if not isinstance(value, str):
            raise ConfigError(f"{key}: expected a string, got {value!r}")
        return value
    if target_type is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return tuple(value)
    raise ConfigError(f"{key}: unsupported field type {target_type}")


def set_value(cfg: RunConfig, dotted: str, value):
    """Assign one dotted key, with type checking against the dataclasses."""
    parts = dotted.split(".")
    if len(parts) == 1:
        name = parts[0]
        if name not in _TOP_FIELDS:
            raise ConfigError(f"unknown config key '{dotted}'")
        target = cfg
    elif len(parts) == 2 and parts[0] in _SECTIONS:
        target = getattr(cfg, parts[0])
        name = parts[1]
        if name not in {f.name for f in fields(target)}:
            raise ConfigError(f"unknown config key '{dotted}'")
    else:
        raise ConfigError(f"unknown config key '{dotted}'")
    current = getattr(target, name)
    ftype = type(current) if current is not None else str
    if isinstance(current, tuple):
        ftype = tuple
    setattr(target, name, _coerce(value, ftype, dotted))


def parse_value(text: str):
    """JSON literal, with bare words falling back to plain strings."""
    text = text.strip()
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_file(path) -> dict:
    """Read ``key = value`` lines; '#' starts a comment."""
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            out[key.strip()] = parse_value(value)
    return out


def flatten(cfg: RunConfig) -> dict:
    flat = {name: getattr(cfg, name) for name in _TOP_FIELDS}
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            value = getattr(obj, f.name)
            if isinstance(value, tuple):
                value = list(value)
            flat[f"{section}.{f.name}"] = value
    return flat


def to_text(cfg: RunConfig) -> str:
    lines = [f"{key} = {json.dumps(value)}" for key, value in
             sorted(flatten(cfg).items())]
    return "\n".join(lines) + "\n"


def resolve(config_path=None, sets=(), seed=None, jobs=None) -> RunConfig:
    """Build a RunConfig from an optional file plus overrides.

    Stage seeds follow the top-level seed unless set explicitly.
    """
    cfg = RunConfig()
    assigned = set()
    if config_path:
        for key, value in parse_file(config_path).items():
            set_value(cfg, key, value)
            assigned.add(key)
    for assignment in sets:
        if "=" not in assignment:
            raise ConfigError(f"--set needs key=value, got '{assignment}'")
        key, _, value = assignment.partition("=")
        set_value(cfg, key.strip(), parse_value(value))
        assigned.add(key.strip())
    if seed is not None:
        cfg.seed = int(seed)
    if jobs is not None:
        cfg.jobs = int(jobs)
    if "pretrain.seed" not in assigned:
        cfg.pretrain.seed = cfg.seed
    if "finetune.seed" not in assigned:
        cfg.finetune.seed = cfg.seed
    cfg.validate()
    return cfg


def write_config_copy(cfg: RunConfig, directory):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "config.txt").write_text(to_text(cfg))
