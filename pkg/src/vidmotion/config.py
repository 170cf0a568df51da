"""Run configuration: one JSON document drives every command.

Validation is strict: unknown keys are rejected at every level so typos fail
loudly instead of silently running defaults.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

from . import injection as I
from . import network as N


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


@dataclass
class ScheduleConfig:
    timesteps: int = 1000
    beta_min: float = 1e-4
    beta_max: float = 2e-2


@dataclass
class TrainingConfig:
    steps: int = 300
    lr: float = 3e-5


@dataclass
class SamplerConfig:
    steps: int = 50
    guidance: float = 7.5


@dataclass
class Config:
    seed: int = 0
    model: N.NetConfig = field(default_factory=N.NetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    injection: I.InjectionSettings = field(default_factory=I.InjectionSettings)
    align_first_frame_only: bool = False
    control_on_recon: bool = True
    prompt_source: str = ""
    prompt_target: str = ""
    paths: dict[str, str] = field(default_factory=dict)


_SECTION_FIELDS = {
    "model": {"frames", "image_size", "channels", "widths", "time_width", "pool"},
    "schedule": {"timesteps", "beta_min", "beta_max"},
    "training": {"steps", "lr"},
    "sampler": {"steps", "guidance"},
    "injection": {"enabled", "inject_mid", "drop_masked_tokens", "window_fraction"},
    "alignment": {"first_frame_only", "control_on_recon"},
    "prompts": {"source", "target"},
    "paths": {"source_video", "source_masks", "source_skeletons",
              "ref_skeletons", "ref_masks", "checkpoint"},
}
_TOP_KEYS = {"seed"} | set(_SECTION_FIELDS)


def _check_keys(section: str, blob: dict) -> None:
    if not isinstance(blob, dict):
        raise ConfigError(f"section {section!r} must be an object")
    unknown = set(blob) - _SECTION_FIELDS[section]
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {sorted(unknown)}")


def config_from_dict(blob: dict) -> Config:
    if not isinstance(blob, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(blob) - _TOP_KEYS
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    cfg = Config()
    cfg.seed = int(blob.get("seed", 0))
    if "model" in blob:
        _check_keys("model", blob["model"])
        m = blob["model"]
        cfg.model = N.NetConfig(
            frames=int(m.get("frames", 8)),
            image_size=int(m.get("image_size", 32)),
            channels=int(m.get("channels", 4)),
            widths=tuple(m.get("widths", (32, 64))),
            time_width=int(m.get("time_width", 32)),
            pool=int(m.get("pool", 4)),
            schedule_steps=int(blob.get("schedule", {}).get("timesteps", 1000)),
        )
    elif "schedule" in blob:
        cfg.model = N.NetConfig(
            schedule_steps=int(blob["schedule"].get("timesteps", 1000)))
    for section, target in (("schedule", ScheduleConfig),
                            ("training", TrainingConfig),
                            ("sampler", SamplerConfig)):
        if section in blob:
            _check_keys(section, blob[section])
            setattr(cfg, section, target(**blob[section]))
    if "injection" in blob:
        _check_keys("injection", blob["injection"])
        cfg.injection = I.InjectionSettings(**blob["injection"])
    if "alignment" in blob:
        _check_keys("alignment", blob["alignment"])
        cfg.align_first_frame_only = bool(
            blob["alignment"].get("first_frame_only", False))
        cfg.control_on_recon = bool(
            blob["alignment"].get("control_on_recon", True))
    if "prompts" in blob:
        _check_keys("prompts", blob["prompts"])
        cfg.prompt_source = str(blob["prompts"].get("source", ""))
        cfg.prompt_target = str(blob["prompts"].get("target", ""))
    if "paths" in blob:
        _check_keys("paths", blob["paths"])
        cfg.paths = {k: str(v) for k, v in blob["paths"].items()}
    _validate(cfg)
    return cfg


def _validate(cfg: Config) -> None:
    if cfg.model.image_size % cfg.model.pool != 0:
        raise ConfigError(f"image_size {cfg.model.image_size} not divisible "
                          f"by pool {cfg.model.pool}")
    if len(cfg.model.widths) != 2:
        raise ConfigError("widths must list exactly two level widths")
    if cfg.training.steps < 0 or cfg.training.lr <= 0:
        raise ConfigError("training needs steps >= 0 and lr > 0")
    if cfg.sampler.steps < 1:
        raise ConfigError("sampler needs at least one step")
    if cfg.sampler.guidance < 0:
        raise ConfigError("guidance must be >= 0")
    if not 0.0 <= cfg.injection.window_fraction <= 1.0:
        raise ConfigError("injection window_fraction must lie in [0, 1]")


def load_config(path) -> Config:
    with open(path) as fh:
        text = fh.read()
    blob = json.loads(text)  # json.JSONDecodeError carries line/column
    return config_from_dict(blob)
