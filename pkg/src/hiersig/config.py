"""Run configuration: schema, presets, env overrides, and content hashing.

A run is driven by a single YAML document with one section per pipeline
stage.  Every value has a desk-scale default; ``--scale paper`` swaps in the
publication-scale hyperparameters.  Environment variables of the form
``HIERSIG_<SECTION>__<KEY>`` (or ``HIERSIG_SEED``) override file values.

The config hash (first 16 hex chars of the sha256 of the canonical JSON,
excluding the ``run`` section) stamps every artifact this pipeline writes.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from pathlib import Path

import jsonschema
import yaml


class ConfigError(Exception):
    """Invalid or unparseable run configuration (CLI exit code 2)."""


class MissingArtifactError(Exception):
    """A required upstream artifact is absent (CLI exit code 3)."""


class NumericalError(Exception):
    """Training or evaluation hit a numerical failure (CLI exit code 4)."""


ENV_PREFIX = "HIERSIG_"

DESK_DEFAULTS: dict = {
    "seed": 42,
    "synth": {
        "subjects": 200,
        "weeks": 1,
        "coverage": 0.30,
        "recording_seconds": 16.0,
        "ppg_hz": 25.0,
        "acc_hz": 25.0,
        "tz_offset_min": -300,
        "start_date": "2024-01-01",
        "scenario": "all",
    },
    "sigproc": {
        "target_hz": 100.0,
        "segment_seconds": 15.0,
        "ppg_band": [1.0, 12.0],
        "acc_band": [0.5, 49.0],
        "transition_hz": 0.5,
        "stopband_db": 60.0,
        "ratio_denominator_cap": 1000,
        "workers": 0,
    },
    "features": {
        "refractory_s": 0.33,
        "threshold_frac": 0.5,
        "rolling_max_s": 3.0,
        "entropy_bins": 10,
        "pnn_threshold_ms": 30.0,
        "bin_seconds": 300,
        "workers": 0,
    },
    "stage1": {
        "embedding_dim": 64,
        "projection_dim": 128,
        "temperature": 0.04,
        "conv_channels": [16, 32, 64, 64],
        "conv_kernels": [7, 7, 7, 7],
        "conv_strides": [4, 2, 2, 2],
        "steps": 1500,
        "batch_size": 48,
        "subjects_per_batch": 24,
        "lr": 1.0e-3,
        "warmup_steps": 100,
        "weight_decay": 1.0e-6,
        "eval_every": 100,
        "holdout_segments": 512,
    },
    "stage2": {
        "model_dim": 64,
        "encoder_layers": 4,
        "decoder_layers": 2,
        "heads": 4,
        "mlp_dim": 192,
        "n_ctx": 252,
        "patch_sizes": [1, 2, 4],
        "iterations": 1200,
        "ablation_iterations": 400,
        "batch_size": 6,
        "lr": 8.0e-4,
        "warmup_frac": 0.125,
        "weight_decay": 0.0,
        "local_branch": True,
        "global_branch": True,
        "week_token": "pooled",
        "allow_missing_in_context": True,
        "holdout_weeks": 16,
        "eval_every": 100,
    },
    "baselines": {
        "dropout": 0.2,
        "lstm_hidden": 64,
        "rope_base": 10000.0,
        "attn_heads": 4,
        "supervised_lr": 1.0e-3,
        "supervised_batch": 16,
        "supervised_max_evals": 60,
        "patience": 10,
    },
    "eval": {
        "l2_grid": [1e-4, 1e-3, 1e-2, 1e-1, 1.0, 1e1, 1e2, 1e3, 1e4],
        "bootstrap_resamples": 1000,
        "pauc_fpr_max": 0.1,
        "scenarios": ["all", "day", "night", "weekday", "weekend"],
        "val_frac": 0.15,
        "test_frac": 0.15,
    },
    "run": {
        "workdir": "runs",
        "log_format": "text",
    },
}

# Publication-scale hyperparameters (Appendix-level defaults).  Only the keys
# that differ from desk scale are listed; they overlay the desk document.
PAPER_OVERRIDES: dict = {
    "stage1": {
        "embedding_dim": 256,
        "conv_channels": [32, 64, 128, 256],
        "conv_strides": [2, 2, 2, 2],
        "steps": 2_000_000,
        "batch_size": 1024,
        "subjects_per_batch": 512,
        "lr": 2.0e-4,
        "warmup_steps": 5000,
        "weight_decay": 1.0e-6,
        "eval_every": 1000,
    },
    "stage2": {
        "model_dim": 256,
        "encoder_layers": 6,
        "decoder_layers": 4,
        "mlp_dim": 768,
        "iterations": 600_000,
        "batch_size": 32,
        "lr": 8.0e-4,
        "eval_every": 1000,
    },
}

WEEK_BINS = 2016          # 7 days * 288 five-minute bins
TOD_BINS = 288
DOW_BINS = 7
BIN_SECONDS = 300
SEGMENT_SAMPLES = 1500    # 15 s at 100 Hz
SEGMENT_CHANNELS = 2
N_FEATURES = 19

_SCHEMA_TYPES = {
    bool: {"type": "boolean"},
    int: {"type": "integer"},
    float: {"type": "number"},
    str: {"type": "string"},
}


def _schema_for(value):
    if isinstance(value, bool):
        return _SCHEMA_TYPES[bool]
    if isinstance(value, int):
        return _SCHEMA_TYPES[int]
    if isinstance(value, float):
        return {"type": "number"}
    if isinstance(value, str):
        return {"type": "string"}
    if isinstance(value, list):
        return {"type": "array"}
    if isinstance(value, dict):
        return {
            "type": "object",
            "properties": {k: _schema_for(v) for k, v in value.items()},
            "additionalProperties": False,
        }
    raise TypeError(f"unsupported config value type: {type(value)!r}")


def config_schema() -> dict:
    """JSON schema derived from the defaults; unknown keys are rejected."""
    schema = _schema_for(DESK_DEFAULTS)
    schema["$schema"] = "https://json-schema.org/draft/2020-12/schema"
    schema["title"] = "hiersig run configuration"
    return schema


def _deep_merge(base: dict, overlay: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, val in overlay.items():
        here = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key: {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"config key {here!r} must be a mapping")
            out[key] = _deep_merge(base[key], val, here)
        else:
            out[key] = copy.deepcopy(val)
    return out


def _env_overrides(environ=None) -> dict:
    environ = os.environ if environ is None else environ
    overlay: dict = {}
    for name, raw in environ.items():
        if not name.startswith(ENV_PREFIX):
            continue
        spec = name[len(ENV_PREFIX):].lower()
        try:
            value = yaml.safe_load(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse env override {name}={raw!r}: {exc}")
        if "__" in spec:
            section, key = spec.split("__", 1)
            overlay.setdefault(section, {})[key] = value
        else:
            overlay[spec] = value
    return overlay


def load_config(path: str | Path | None = None, scale: str = "desk",
                overrides: dict | None = None, environ=None) -> dict:
    """Resolve the effective run config.

    Precedence (low to high): scale preset, config file, explicit
    ``overrides``, HIERSIG_* environment variables.
    """
    if scale not in ("desk", "paper"):
        raise ConfigError(f"unknown scale {scale!r}; expected 'desk' or 'paper'")
    cfg = copy.deepcopy(DESK_DEFAULTS)
    if scale == "paper":
        cfg = _deep_merge(cfg, PAPER_OVERRIDES)
    if path is not None:
        try:
            with open(path) as fh:
                doc = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config file {path}: {exc}")
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {path} must hold a mapping")
        cfg = _deep_merge(cfg, doc)
    if overrides:
        cfg = _deep_merge(cfg, overrides)
    env = _env_overrides(environ)
    if env:
        cfg = _deep_merge(cfg, env)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    try:
        jsonschema.validate(cfg, config_schema())
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.message} (at {'/'.join(map(str, exc.path))})")
    s1 = cfg["stage1"]
    if s1["conv_channels"][-1] != s1["embedding_dim"]:
        raise ConfigError("stage1.conv_channels must end at stage1.embedding_dim")
    if not (len(s1["conv_channels"]) == len(s1["conv_kernels"]) == len(s1["conv_strides"])):
        raise ConfigError("stage1 conv channel/kernel/stride lists must have equal length")
    if s1["temperature"] <= 0:
        raise ConfigError("stage1.temperature must be positive")
    if s1["subjects_per_batch"] < 2:
        raise ConfigError("stage1.subjects_per_batch must be >= 2")
    s2 = cfg["stage2"]
    if not (s2["local_branch"] or s2["global_branch"]):
        raise ConfigError("at least one stage2 decoder branch must be enabled")
    if s2["week_token"] not in ("pooled", "learnable"):
        raise ConfigError("stage2.week_token must be 'pooled' or 'learnable'")
    for p in s2["patch_sizes"]:
        if s2["n_ctx"] % p != 0:
            raise ConfigError(f"stage2.n_ctx={s2['n_ctx']} not divisible by patch size {p}")
        if WEEK_BINS % p != 0:
            raise ConfigError(f"patch size {p} does not divide the {WEEK_BINS}-bin week")
    if not 0 < s2["n_ctx"] < WEEK_BINS:
        raise ConfigError("stage2.n_ctx must lie strictly between 0 and 2016")
    ev = cfg["eval"]
    known = {"all", "day", "night", "weekday", "weekend"}
    bad = set(ev["scenarios"]) - known
    if bad:
        raise ConfigError(f"unknown scenarios: {sorted(bad)}")
    if not 0 < ev["pauc_fpr_max"] <= 1:
        raise ConfigError("eval.pauc_fpr_max must lie in (0, 1]")


def config_hash(cfg: dict) -> str:
    """16-byte (32 hex char) content hash over everything except ``run``."""
    hashed = {k: v for k, v in cfg.items() if k != "run"}
    blob = json.dumps(hashed, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:32]


def subseed(master_seed: int, *scope) -> int:
    """Stable 63-bit seed derived from the master seed and a scope path."""
    blob = json.dumps([master_seed, *scope], separators=(",", ":"))
    digest = hashlib.sha256(blob.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1
