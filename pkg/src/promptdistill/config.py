"""Experiment configuration files (INI key/value text).

Example::

    [dataset]
    n_samples = 200
    volume_extent = 16
    seed = 0

    [split]
    train_fraction = 0.8
    seed = 0

    [encoder]
    stem_channels = 8
    stage_channels = 8, 16, 32

    [train]
    epochs = 30
    lr_decay_epochs = 9, 18

    [experiment]
    seeds = 0, 1, 2, 3, 4

Every section and key is optional; omitted values take the desk-scale defaults.
"""

from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .model import EncoderConfig
from .synthdata import CHANNEL_COUNTS, DatasetSpec
from .training import TrainConfig

OUT_ENV = "PROMPTDISTILL_OUT"
DEFAULT_OUT = "runs"


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(",", " ").split())
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _section_kwargs(parser: configparser.ConfigParser, section: str, cls, skip=()) -> dict:
    if not parser.has_section(section):
        return {}
    defaults = {f.name: f.default for f in fields(cls)}
    out = {}
    for key, raw in parser.items(section):
        if key in skip:
            continue
        if key not in defaults:
            raise ConfigError(f"[{section}] unknown key {key!r}")
        try:
            out[key] = _parse_value(raw, defaults[key])
        except ValueError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from exc
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    dataset_path: str | None = None
    train_fraction: float = 0.8
    split_seed: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    out_dir: str = DEFAULT_OUT
    template_channels: str = "ce"
    jobs: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("at least one repeat seed is required")
        if self.template_channels not in ("ce", "all"):
            raise ConfigError(f"template_channels must be 'ce' or 'all', got {self.template_channels!r}")
        if not 0 < self.train_fraction < 1:
            raise ConfigError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    # encoders differ only in their input channel count
    def template_encoder(self) -> EncoderConfig:
        return replace(self.encoder, in_channels=CHANNEL_COUNTS[self.template_channels])

    def promptnet_encoder(self) -> EncoderConfig:
        return replace(self.encoder, in_channels=CHANNEL_COUNTS["ne"])

    def train_config(self, seed: int, prompt_mode: str | None = None) -> TrainConfig:
        return replace(self.train, seed=seed, prompt_mode=prompt_mode or self.train.prompt_mode)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset.to_dict(),
            "dataset_path": self.dataset_path,
            "split": {"train_fraction": self.train_fraction, "seed": self.split_seed},
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "experiment": {"seeds": list(self.seeds), "template_channels": self.template_channels},
        }

    def digest(self, **extra) -> str:
        """Short hash of everything that shapes a result, excluding the repeat seed."""
        d = self.to_dict()
        d["train"].pop("seed")
        d["experiment"].pop("seeds")
        d["dataset_path"] = None
        d.update(extra)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def to_ini(self) -> str:
        """Round-trippable INI echo of the full configuration."""
        def fmt(v):
            if isinstance(v, (list, tuple)):
                return ", ".join(str(x) for x in v)
            return str(v)

        lines = ["[dataset]"]
        if self.dataset_path:
            lines.append(f"path = {self.dataset_path}")
        lines += [f"{k} = {fmt(v)}" for k, v in self.dataset.to_dict().items()]
        lines += ["", "[split]", f"train_fraction = {self.train_fraction}", f"seed = {self.split_seed}"]
        lines += ["", "[encoder]"] + [f"{k} = {fmt(v)}" for k, v in self.encoder.to_dict().items() if k != "in_channels"]
        lines += ["", "[train]"] + [f"{k} = {fmt(v)}" for k, v in self.train.to_dict().items() if k != "seed"]
        lines += [
            "", "[experiment]", f"seeds = {fmt(self.seeds)}", f"out_dir = {self.out_dir}",
            f"template_channels = {self.template_channels}", f"jobs = {self.jobs}",
        ]
        return "\n".join(lines) + "\n"


def load_config(path: str | os.PathLike | None = None, text: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        text = p.read_text()
    if text:
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
    unknown = set(parser.sections()) - {"dataset", "split", "encoder", "train", "experiment"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    try:
        dataset = DatasetSpec(**_section_kwargs(parser, "dataset", DatasetSpec, skip=("path",)))
        dataset.validate()
        encoder = EncoderConfig(**_section_kwargs(parser, "encoder", EncoderConfig))
        train = TrainConfig(**_section_kwargs(parser, "train", TrainConfig))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    kwargs: dict = {"dataset": dataset, "encoder": encoder, "train": train}
    if parser.has_option("dataset", "path"):
        kwargs["dataset_path"] = parser.get("dataset", "path").strip()
    if parser.has_section("split"):
        for key, raw in parser.items("split"):
            if key == "train_fraction":
                kwargs["train_fraction"] = float(raw)
            elif key == "seed":
                kwargs["split_seed"] = int(raw)
            else:
                raise ConfigError(f"[split] unknown key {key!r}")
    if parser.has_section("experiment"):
        for key, raw in parser.items("experiment"):
            if key == "seeds":
                kwargs["seeds"] = _parse_value(raw, ())
            elif key in ("out_dir", "template_channels"):
                kwargs[key] = raw.strip()
            elif key == "jobs":
                kwargs["jobs"] = int(raw)
            else:
                raise ConfigError(f"[experiment] unknown key {key!r}")
    return ExperimentConfig(**kwargs)


def resolve_out_dir(cli_out: str | None, config: ExperimentConfig) -> Path:
    """``--out`` wins, then the PROMPTDISTILL_OUT environment variable, then the config."""
    if cli_out:
        return Path(cli_out)
    env = os.environ.get(OUT_ENV)
    if env:
        return Path(env)
    return Path(config.out_dir)
