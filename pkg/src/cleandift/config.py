"""Flat key-value run configuration with documented defaults, named presets,
TOML file loading and command-line overrides (precedence: CLI > file >
preset > defaults). Unknown keys are rejected."""

from __future__ import annotations

import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

# Every key with its default. Comments document units / choices.
DEFAULTS: dict[str, object] = {
    # forward process
    "schedule.T": 100,
    "schedule.family": "cosine",  # cosine | linear
    # toy denoiser
    "backbone.image_size": 32,
    "backbone.base_channels": 32,
    "backbone.stage_multipliers": "1,2,2",
    "backbone.timestep_embed_dim": 64,
    # teacher training
    "teacher.steps": 600,
    "teacher.batch_size": 16,
    "teacher.learning_rate": 2e-3,
    # consolidation
    "distill.metric": "cosine",  # cosine | l2 | l1
    "distill.use_heads": True,
    "distill.bins": 3,  # stratification bins per image
    "distill.steps": 800,
    "distill.batch_size": 8,
    "distill.learning_rate": 1e-4,
    "distill.warmup_steps": 100,
    "distill.head_conditioning": "film",  # film | adarms
    "distill.head_gating": "swiglu",  # swiglu | swish
    "distill.head_pretraining": "none",  # none | joint | frozen_after_pretrain
    "distill.head_pretrain_steps": 150,
    "distill.ablate_steps": 60,  # per-cell budget for the ablation grid
    # evaluation
    "eval.match_stage": 1,  # second-coarsest tap
    "eval.alpha": 0.1,
    "eval.ensemble_n": 1,  # DIFT-style baseline preset would use 8
    "eval.timesteps": "",  # comma list; empty = 8 evenly spaced over [1, T]
    "eval.knn_k": 10,
    "eval.probe_epochs": 60,
    "eval.probe_stage": 1,
    "eval.seg_seeds": 3,
    # synthetic data
    "data.num_distill": 256,
    "data.num_teacher": 256,
    "data.num_pairs": 64,
    "data.num_probe_train": 48,
    "data.num_probe_test": 24,
    "data.num_heldout": 16,
}

PRESETS: dict[str, dict[str, object]] = {
    "tiny": {
        "schedule.T": 40,
        "teacher.steps": 60,
        "distill.steps": 40,
        "distill.warmup_steps": 10,
        "distill.head_pretrain_steps": 20,
        "distill.ablate_steps": 10,
        "eval.timesteps": "1,20,39",
        "eval.probe_epochs": 15,
        "data.num_distill": 32,
        "data.num_teacher": 32,
        "data.num_pairs": 8,
        "data.num_probe_train": 8,
        "data.num_probe_test": 4,
        "data.num_heldout": 8,
    },
    "default": {},
    # Hyperparameters used at foundation-model scale, kept for documentation;
    # not tuned for a from-scratch toy teacher.
    "paper_scale": {
        "schedule.T": 1000,
        "distill.steps": 400,
        "distill.batch_size": 8,
        "distill.learning_rate": 2e-6,
        "distill.bins": 3,
    },
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("true", "1", "yes"):
            return True
        if str(value).lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"{key}: expected boolean, got {value!r}")
    if isinstance(default, int):
        try:
            return int(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected integer, got {value!r}") from None
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{key}: expected number, got {value!r}") from None
    return str(value)


class RunConfig:
    def __init__(self, values: dict[str, object]):
        self.values = dict(values)

    def __getitem__(self, key: str):
        return self.values[key]

    def int_list(self, key: str) -> list[int]:
        raw = str(self.values[key]).strip()
        if not raw:
            return []
        return [int(x) for x in raw.split(",")]

    def stage_multipliers(self) -> tuple[int, ...]:
        return tuple(int(x) for x in str(self.values["backbone.stage_multipliers"]).split(","))

    def eval_timesteps(self) -> list[int]:
        ts = self.int_list("eval.timesteps")
        if ts:
            return ts
        import numpy as np

        T = int(self.values["schedule.T"])
        return sorted(set(np.linspace(1, T - 1, 8).round().astype(int).tolist()))

    def to_json(self) -> str:
        return json.dumps(self.values, indent=1, sort_keys=True)


def load_config(
    preset: str = "default",
    config_path: str | None = None,
    overrides: dict[str, object] | None = None,
) -> RunConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(DEFAULTS)
    values.update(PRESETS[preset])
    if config_path:
        with open(config_path, "rb") as f:
            data = tomllib.load(f)
        flat: dict[str, object] = {}
        for section, body in data.items():
            if isinstance(body, dict):
                for k, v in body.items():
                    flat[f"{section}.{k}"] = v
            else:
                flat[section] = body
        for key, val in flat.items():
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
            values[key] = _coerce(key, val)
    for key, val in (overrides or {}).items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, val)
    return RunConfig(values)
