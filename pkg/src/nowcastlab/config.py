"""Experiment configuration: INI grammar, validation, canonical hashing.

A config file is standard INI text with fixed sections; every key is
optional and falls back to the package default.  Unknown sections or
keys are rejected so typos fail loudly.  The config hash is the
SHA-256 of the canonicalized effective snapshot (all defaults applied,
sections and keys sorted), so two files meaning the same experiment
hash identically, and every artifact can embed the hash it was built
from.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass
from pathlib import Path

from .autoencoder import AutoencoderConfig, AutoencoderLossConfig
from .denoiser import DenoiserConfig
from .forecaster import ForecasterConfig
from .synthetic_radar import GeneratorConfig


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class DatasetCounts:
    n_train: int = 48
    n_val: int = 8
    n_test: int = 8


@dataclass(frozen=True)
class ScheduleSettings:
    n_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02


@dataclass(frozen=True)
class SamplerSettings:
    n_sample_steps: int = 20
    guidance: float = 1.5


@dataclass(frozen=True)
class TrainBudget:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 5e-4
    lr_min: float = 0.0
    weight_decay: float = 0.01
    checkpoint_every: int = 500
    p_drop: float = 0.1    # condition-drop rate; used by the diffusion stage only


@dataclass(frozen=True)
class MetricsSettings:
    thresholds: tuple[float, ...] = (16.0, 74.0, 133.0, 160.0, 181.0, 219.0)
    pools: tuple[int, ...] = (1, 4)
    ssim_window: int = 7


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    master_seed: int = 0
    ensemble_size: int = 10
    generator: GeneratorConfig = GeneratorConfig()
    dataset: DatasetCounts = DatasetCounts()
    forecaster: ForecasterConfig = ForecasterConfig()
    autoencoder: AutoencoderConfig = AutoencoderConfig()
    ae_loss: AutoencoderLossConfig = AutoencoderLossConfig()
    denoiser: DenoiserConfig = DenoiserConfig()
    schedule: ScheduleSettings = ScheduleSettings()
    sampler: SamplerSettings = SamplerSettings()
    train_det: TrainBudget = TrainBudget(lr=1e-3)
    train_ae: TrainBudget = TrainBudget(lr=1e-4)
    train_diff: TrainBudget = TrainBudget(steps=5000, lr=5e-4)
    metrics: MetricsSettings = MetricsSettings()

    def validate(self) -> None:
        try:
            self.generator.validate()
            self.forecaster.validate()
            self.autoencoder.validate()
            self.denoiser.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        gen, ae, dn = self.generator, self.autoencoder, self.denoiser
        if gen.height % ae.reduction or gen.width % ae.reduction:
            raise ConfigError(
                f"frame extents {gen.height}x{gen.width} not divisible by the "
                f"autoencoder reduction {ae.reduction}")
        expect = (gen.t_in, gen.t_out, ae.latent_channels,
                  gen.height // ae.reduction, gen.width // ae.reduction)
        got = (dn.t_in, dn.t_out, dn.latent_channels, dn.latent_height, dn.latent_width)
        if expect != got:
            raise ConfigError(
                f"denoiser latent geometry {got} inconsistent with generator/"
                f"autoencoder {expect}")
        if (self.forecaster.in_frames, self.forecaster.out_frames) != (gen.t_in, gen.t_out):
            raise ConfigError("forecaster frame counts inconsistent with generator")
        if self.ensemble_size < 1:
            raise ConfigError(f"ensemble_size must be >= 1, got {self.ensemble_size}")
        if not (0.0 <= self.train_diff.p_drop < 1.0):
            raise ConfigError(f"p_drop must be in [0,1), got {self.train_diff.p_drop}")
        if not (0 < self.schedule.beta_start <= self.schedule.beta_end < 1):
            raise ConfigError(
                f"beta endpoints ({self.schedule.beta_start}, {self.schedule.beta_end}) invalid")
        if not (1 <= self.sampler.n_sample_steps <= self.schedule.n_steps):
            raise ConfigError(
                f"sampler steps {self.sampler.n_sample_steps} outside "
                f"[1, {self.schedule.n_steps}]")
        if len(self.metrics.thresholds) == 0 or len(self.metrics.pools) == 0:
            raise ConfigError("metrics thresholds and pools must be non-empty")
        if list(self.metrics.thresholds) != sorted(self.metrics.thresholds) or \
                len(set(self.metrics.thresholds)) != len(self.metrics.thresholds):
            raise ConfigError("metrics thresholds must be strictly increasing")


def _parse_int(raw: str) -> int:
    return int(raw.strip())


def _parse_float(raw: str) -> float:
    return float(raw.strip())


def _parse_str(raw: str) -> str:
    return raw.strip()


def _parse_float_list(raw: str):
    return tuple(float(x) for x in raw.replace(",", " ").split())


def _parse_int_list(raw: str):
    return tuple(int(x) for x in raw.replace(",", " ").split())


def _parse_optional_int(raw: str):
    raw = raw.strip()
    return None if raw.lower() == "none" else int(raw)


_GENERATOR_KEYS = {
    "height": _parse_int, "width": _parse_int, "t_in": _parse_int,
    "t_out": _parse_int, "n_blobs": _parse_int,
    "blob_scale_min": _parse_float, "blob_scale_max": _parse_float,
    "blob_peak_min": _parse_float, "blob_peak_max": _parse_float,
    "velocity_max": _parse_float, "cell_birth_rate": _parse_float,
    "cell_lifetime_mean": _parse_float,
    "cell_scale_min": _parse_float, "cell_scale_max": _parse_float,
    "cell_peak_min": _parse_float, "cell_peak_max": _parse_float,
}

_SCHEMA: dict[str, dict] = {
    "experiment": {"name": _parse_str, "master_seed": _parse_int,
                   "ensemble_size": _parse_int},
    "generator": _GENERATOR_KEYS,
    "dataset": {"n_train": _parse_int, "n_val": _parse_int, "n_test": _parse_int},
    "forecaster": {"base_width": _parse_int, "n_downsamples": _parse_int,
                   "translator_width": _parse_int, "translator_depth": _parse_int,
                   "norm_groups": _parse_int},
    "autoencoder": {"latent_channels": _parse_int, "base_width": _parse_int,
                    "n_downsamples": _parse_int, "norm_groups": _parse_int},
    "denoiser": {"n_blocks": _parse_int, "embed_dim": _parse_int,
                 "agg_dim": _parse_optional_int, "patch_size": _parse_int,
                 "n_heads": _parse_int, "frames_per_split": _parse_int,
                 "mlp_ratio": _parse_float},
    "schedule": {"n_steps": _parse_int, "beta_start": _parse_float,
                 "beta_end": _parse_float},
    "sampler": {"n_sample_steps": _parse_int, "guidance": _parse_float},
    "train.det": {"steps": _parse_int, "batch_size": _parse_int, "lr": _parse_float,
                  "lr_min": _parse_float, "weight_decay": _parse_float,
                  "checkpoint_every": _parse_int},
    "train.ae": {"steps": _parse_int, "batch_size": _parse_int, "lr": _parse_float,
                 "lr_min": _parse_float, "weight_decay": _parse_float,
                 "checkpoint_every": _parse_int,
                 "kl_weight": _parse_float, "adv_weight": _parse_float},
    "train.diff": {"steps": _parse_int, "batch_size": _parse_int, "lr": _parse_float,
                   "lr_min": _parse_float, "weight_decay": _parse_float,
                   "checkpoint_every": _parse_int, "p_drop": _parse_float},
    "metrics": {"thresholds": _parse_float_list, "pools": _parse_int_list,
                "ssim_window": _parse_int},
}


def _section_values(parser: configparser.ConfigParser, section: str) -> dict:
    """Typed values of one section, rejecting unknown keys."""
    if not parser.has_section(section):
        return {}
    schema = _SCHEMA[section]
    values = {}
    for key, raw in parser.items(section):
        if key not in schema:
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        try:
            values[key] = schema[key](raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for [{section}] {key}: {raw!r}") from exc
    return values


def parse_config_text(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown section [{section}]")

    exp = _section_values(parser, "experiment")
    gen_vals = _section_values(parser, "generator")
    master_seed = exp.get("master_seed", 0)
    generator = GeneratorConfig(master_seed=master_seed, **gen_vals)
    dataset = DatasetCounts(**_section_values(parser, "dataset"))
    autoencoder = AutoencoderConfig(**_section_values(parser, "autoencoder"))
    forecaster = ForecasterConfig(in_frames=generator.t_in, out_frames=generator.t_out,
                                  **_section_values(parser, "forecaster"))
    denoiser = DenoiserConfig(
        t_in=generator.t_in, t_out=generator.t_out,
        latent_channels=autoencoder.latent_channels,
        latent_height=generator.height // autoencoder.reduction,
        latent_width=generator.width // autoencoder.reduction,
        **_section_values(parser, "denoiser"))

    ae_vals = _section_values(parser, "train.ae")
    ae_loss = AutoencoderLossConfig(
        kl_weight=ae_vals.pop("kl_weight", AutoencoderLossConfig.kl_weight),
        adv_weight=ae_vals.pop("adv_weight", AutoencoderLossConfig.adv_weight))
    diff_vals = _section_values(parser, "train.diff")

    config = ExperimentConfig(
        name=exp.get("name", "experiment"),
        master_seed=master_seed,
        ensemble_size=exp.get("ensemble_size", 10),
        generator=generator,
        dataset=dataset,
        forecaster=forecaster,
        autoencoder=autoencoder,
        ae_loss=ae_loss,
        denoiser=denoiser,
        schedule=ScheduleSettings(**_section_values(parser, "schedule")),
        sampler=SamplerSettings(**_section_values(parser, "sampler")),
        train_det=dataclasses.replace(TrainBudget(lr=1e-3),
                                      **_section_values(parser, "train.det")),
        train_ae=dataclasses.replace(TrainBudget(lr=1e-4), **ae_vals),
        train_diff=dataclasses.replace(TrainBudget(steps=5000, lr=5e-4), **diff_vals),
        metrics=MetricsSettings(**_section_values(parser, "metrics")),
    )
    config.validate()
    return config


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config_text(text)


def with_seed(config: ExperimentConfig, seed: int) -> ExperimentConfig:
    """Rebind the master seed (CLI --seed overrides the file value)."""
    generator = dataclasses.replace(config.generator, master_seed=seed)
    return dataclasses.replace(config, master_seed=seed, generator=generator)


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_fmt(v) for v in value)
    return str(value)


def effective_snapshot(config: ExperimentConfig) -> dict[str, dict[str, str]]:
    """Every effective key/value as strings, defaults included."""
    def fields_of(obj, skip=()):
        return {f.name: _fmt(getattr(obj, f.name))
                for f in dataclasses.fields(obj) if f.name not in skip}

    def budget(budget_obj, with_p_drop=False, extra=None):
        skip = () if with_p_drop else ("p_drop",)
        vals = fields_of(budget_obj, skip=skip)
        if extra:
            vals.update(extra)
        return vals

    return {
        "experiment": {"name": config.name, "master_seed": str(config.master_seed),
                       "ensemble_size": str(config.ensemble_size)},
        "generator": fields_of(config.generator, skip=("master_seed",)),
        "dataset": fields_of(config.dataset),
        "forecaster": fields_of(config.forecaster,
                                skip=("in_frames", "out_frames", "in_channels")),
        "autoencoder": fields_of(config.autoencoder, skip=("in_channels",)),
        "denoiser": fields_of(config.denoiser,
                              skip=("t_in", "t_out", "latent_channels",
                                    "latent_height", "latent_width")),
        "schedule": fields_of(config.schedule),
        "sampler": fields_of(config.sampler),
        "train.det": budget(config.train_det),
        "train.ae": budget(config.train_ae,
                           extra={"kl_weight": _fmt(config.ae_loss.kl_weight),
                                  "adv_weight": _fmt(config.ae_loss.adv_weight)}),
        "train.diff": budget(config.train_diff, with_p_drop=True),
        "metrics": fields_of(config.metrics),
    }


def canonical_text(config: ExperimentConfig) -> str:
    snapshot = effective_snapshot(config)
    lines = []
    for section in sorted(snapshot):
        lines.append(f"[{section}]")
        for key in sorted(snapshot[section]):
            lines.append(f"{key} = {snapshot[section][key]}")
    return "\n".join(lines) + "\n"


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_text(config).encode("utf-8")).hexdigest()


def write_config(path: str | Path, config: ExperimentConfig) -> None:
    """Emit an INI file whose parse round-trips to the same effective config."""
    snapshot = effective_snapshot(config)
    lines = []
    for section, values in snapshot.items():
        lines.append(f"[{section}]")
        lines.extend(f"{key} = {value}" for key, value in values.items())
        lines.append("")
    Path(path).write_text("\n".join(lines))
