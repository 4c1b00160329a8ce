"""Run configuration: one YAML file holding every numeric setting of a run.

All keys are required and unknown keys are rejected. The config hash
(sha256 of the canonical JSON form) is recorded in every output.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .corpus import DatasetConfig
from .encoders import EncoderConfig
from .separator import SeparatorConfig
from .summarizer import OptimizerConfig, SummarizerConfig

SECTIONS = ("dataset", "encoder", "summarizer", "separator", "summarizer_training", "separator_training",
            "finetune", "seed", "threads")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FinetuneSection:
    lambdas: tuple[float, ...]
    default_lambda: float
    freeze_summarizer: bool
    optimizer: OptimizerConfig


@dataclass(frozen=True)
class RunConfig:
    dataset: DatasetConfig
    encoder: EncoderConfig
    summarizer: SummarizerConfig
    separator: SeparatorConfig
    summarizer_training: OptimizerConfig
    separator_training: OptimizerConfig
    finetune: FinetuneSection
    seed: int
    threads: int
    raw: dict

    @property
    def hash(self) -> str:
        return config_hash(self.raw)


def config_hash(raw: dict) -> str:
    return hashlib.sha256(json.dumps(raw, sort_keys=True).encode()).hexdigest()[:16]


def _exact_keys(d, keys, where: str) -> None:
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected a mapping")
    unknown = set(d) - set(keys)
    missing = set(keys) - set(d)
    if unknown or missing:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}, missing keys {sorted(missing)}")


def parse_config(raw: dict) -> RunConfig:
    _exact_keys(raw, SECTIONS, "run config")
    try:
        ft = raw["finetune"]
        _exact_keys(ft, ("lambdas", "default_lambda", "freeze_summarizer", "optimizer"), "finetune")
        finetune = FinetuneSection(tuple(float(x) for x in ft["lambdas"]), float(ft["default_lambda"]),
                                   bool(ft["freeze_summarizer"]), OptimizerConfig.from_dict(ft["optimizer"]))
        cfg = RunConfig(
            dataset=DatasetConfig.from_dict(raw["dataset"]),
            encoder=EncoderConfig.from_dict(raw["encoder"]),
            summarizer=SummarizerConfig.from_dict(raw["summarizer"]),
            separator=SeparatorConfig.from_dict(raw["separator"]),
            summarizer_training=OptimizerConfig.from_dict(raw["summarizer_training"]),
            separator_training=OptimizerConfig.from_dict(raw["separator_training"]),
            finetune=finetune,
            seed=int(raw["seed"]),
            threads=int(raw["threads"]),
            raw=raw,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if cfg.separator.n_sources != cfg.dataset.n_sources:
        raise ConfigError("separator.n_sources must equal dataset.n_sources")
    if any(lam < 0 for lam in cfg.finetune.lambdas) or cfg.finetune.default_lambda < 0:
        raise ConfigError("lambda values must be >= 0")
    if cfg.threads < 1:
        raise ConfigError("threads must be >= 1")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"config file {path} not found")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return parse_config(raw)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.raw, sort_keys=True)


def dataset_dict(cfg: RunConfig) -> dict:
    return asdict(cfg.dataset)
