"""Run configuration: JSON schema, validation and conversion to typed configs."""

from __future__ import annotations

import copy
import json
from dataclasses import fields
from pathlib import Path

import jsonschema

from ..annealing import AnnealConfig, ParallelAnnealConfig, uniform_schedule
from ..errors import ConfigError
from ..vae import DECODER_HIDDEN, ENCODER_HIDDEN, TrainConfig

SCHEMA_VERSION = 1

METHODS = (
    "MH",
    "HMC",
    "MH-EMC",
    "HMC-EMC",
    "VAE-SLMC",
    "CA-VAE-SLMC",
    "AA-VAE-SLMC",
    "CA-VAE-ESLMC",
    "AA-VAE-ESLMC",
)
ANNEALED = {"CA-VAE-SLMC", "AA-VAE-SLMC", "CA-VAE-ESLMC", "AA-VAE-ESLMC"}
PARALLEL = {"CA-VAE-ESLMC", "AA-VAE-ESLMC"}
EMC = {"MH-EMC", "HMC-EMC"}

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_posint = {"type": "integer", "minimum": 1}
_nullable_posint = {"type": ["integer", "null"], "minimum": 1}
_vector = {"type": "array", "items": _num, "minItems": 1}
_auto_or_pos = {"oneOf": [{"const": "auto"}, _pos]}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "seed", "method", "target", "steps"],
    "additionalProperties": False,
    "properties": {
        "version": {"const": SCHEMA_VERSION},
        "seed": {"type": "integer", "minimum": 0},
        "method": {"enum": list(METHODS)},
        "target": {
            "type": "object",
            "required": ["name"],
            "properties": {"name": {"enum": ["gmm", "toy", "spectral", "sensor", "optimization", "discrete"]}},
        },
        "beta": _pos,
        "steps": _posint,
        "chains": _posint,
        "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
        "initial_state": _vector,
        "output_dir": {"type": "string"},
        "metrics_every": _posint,
        "kernel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "rw_sigma": _auto_or_pos,
                "hmc_step_size": _auto_or_pos,
                "hmc_leapfrog_steps": _posint,
                "tune_steps": _posint,
            },
        },
        "emc": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "betas": _vector,
                "n_chains": _posint,
                "exchange_ar": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            },
        },
        "init": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": _posint,
                "sampler": {"enum": ["mh", "hmc", "exact"]},
                "stride": _posint,
                "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "chains": _posint,
            },
        },
        "anneal": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "beta0": _pos,
                "beta_final": _pos,
                "n_values": {"type": "integer", "minimum": 1},
                "schedule": _vector,
                "ar_min": {"type": "number", "minimum": 0, "maximum": 1},
                "ar_max": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "epsilon": _pos,
                "T_check": _posint,
                "T": _nullable_posint,
                "n_train": _posint,
                "thinning_stride": _posint,
                "burn_in": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "beta_candidates": _vector,
                "T_max": _nullable_posint,
                "selection": {"enum": ["largest", "smallest"]},
                "max_steps": _posint,
                "t_train": _nullable_posint,
            },
        },
        "parallel": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"betas0": _vector, "exchange": {"type": "boolean"}},
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _posint,
                "batch_size": _posint,
                "learning_rate": {"type": "number", "minimum": 0},
                "beta_vae": _pos,
                "logsigma_clamp": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2},
            },
        },
        "vae": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "encoder_hidden": {"type": "array", "items": _posint},
                "decoder_hidden": {"type": "array", "items": _posint},
                "latent_dim": _posint,
            },
        },
    },
}

DEFAULTS = {
    "chains": 1,
    "burn_in": 0.1,
    "metrics_every": 100,
    "kernel": {"rw_sigma": "auto", "hmc_step_size": "auto", "hmc_leapfrog_steps": 10, "tune_steps": 4000},
    "emc": {"n_chains": 4, "exchange_ar": [0.2, 0.4]},
    "init": {"n_samples": 40000, "sampler": "mh", "stride": 1, "burn_in": 0.1, "chains": 1},
    "anneal": {"beta0": 0.1, "beta_final": 1.0, "n_values": 20},
    "parallel": {"betas0": [0.1, 0.25], "exchange": True},
    "train": {"epochs": 150, "batch_size": 516, "learning_rate": 1e-3, "beta_vae": 1.0 / 120.0},
    "vae": {"encoder_hidden": list(ENCODER_HIDDEN), "decoder_hidden": list(DECODER_HIDDEN)},
}


def _json_path(error) -> str:
    parts = ["$"]
    for p in error.absolute_path:
        parts.append(f"[{p}]" if isinstance(p, int) else f".{p}")
    return "".join(parts)


def validate(raw: dict) -> dict:
    """Validate against :data:`SCHEMA` and fill defaults; returns a new dict."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(raw), key=lambda e: list(e.absolute_path))
    if errors:
        e = errors[0]
        raise ConfigError(e.message, _json_path(e))
    cfg = copy.deepcopy(raw)
    for key, value in DEFAULTS.items():
        if isinstance(value, dict):
            merged = copy.deepcopy(value)
            merged.update(cfg.get(key, {}))
            cfg[key] = merged
        else:
            cfg.setdefault(key, value)
    a = cfg["anneal"]
    if a["beta0"] > a["beta_final"]:
        raise ConfigError("beta0 must not exceed beta_final", "$.anneal.beta0")
    if "ar_min" in a and "ar_max" in a and a["ar_min"] >= a["ar_max"]:
        raise ConfigError("ar_min must be below ar_max", "$.anneal.ar_min")
    if "schedule" in a and a["schedule"][0] != a["beta0"]:
        raise ConfigError("schedule must start at beta0", "$.anneal.schedule")
    if "initial_state" in cfg and "dim" in cfg["target"] and len(cfg["initial_state"]) != cfg["target"]["dim"]:
        raise ConfigError("initial_state length does not match target dim", "$.initial_state")
    if cfg["init"]["chains"] > 1 and cfg["method"] in PARALLEL:
        raise ConfigError("several initial chains need a single-beta method", "$.init.chains")
    return cfg


def load_config(path) -> dict:
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}", "$") from exc
    return validate(raw)


def dump_config(cfg: dict) -> str:
    """Canonical JSON text (sorted keys, fixed indentation)."""
    return json.dumps(cfg, indent=2, sort_keys=True) + "\n"


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    clamp = tuple(t["logsigma_clamp"]) if "logsigma_clamp" in t else None
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], learning_rate=t["learning_rate"],
                       beta_vae=t["beta_vae"], logsigma_clamp=clamp)


def vae_kwargs(cfg: dict) -> dict:
    v = cfg["vae"]
    kw = {"encoder_hidden": tuple(v["encoder_hidden"]), "decoder_hidden": tuple(v["decoder_hidden"])}
    if "latent_dim" in v:
        kw["latent_dim"] = v["latent_dim"]
    return kw


_ANNEAL_FIELDS = {f.name for f in fields(AnnealConfig)}


def anneal_config(cfg: dict, initial_state=None, **overrides) -> AnnealConfig:
    a = dict(cfg["anneal"])
    n_values = a.pop("n_values")
    mode = "adaptive" if cfg["method"].startswith("AA-") else "constant"
    kw = {k: v for k, v in a.items() if k in _ANNEAL_FIELDS}
    kw.update(mode=mode, train=train_config(cfg), final_T=cfg["steps"])
    if initial_state is not None:
        kw["initial_state"] = list(initial_state)
    if mode == "constant" and "schedule" not in kw:
        kw["schedule"] = uniform_schedule(a["beta0"], a["beta_final"], n_values)
    kw.update(overrides)
    return AnnealConfig(**kw)


def parallel_config(cfg: dict, initial_state=None) -> ParallelAnnealConfig:
    base = anneal_config(cfg, initial_state, schedule=None, mode="adaptive")
    p = cfg["parallel"]
    n_values = None if cfg["method"].startswith("AA-") else cfg["anneal"]["n_values"]
    return ParallelAnnealConfig.ladder(p["betas0"], base, n_values=n_values, exchange=p["exchange"])
