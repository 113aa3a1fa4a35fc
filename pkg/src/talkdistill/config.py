"""Experiment configuration as a flat mapping of dotted keys.

Files are YAML; nested mappings are flattened on load, so ``train: {k: 2}``
and ``train.k: 2`` are equivalent. Precedence: CLI overrides, then file
values, then :data:`DEFAULTS`.
"""
from __future__ import annotations

import copy
import os
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULTS = {
    "run.seed": 0,
    "run.out": "runs/default",
    "data.source": "synthetic",
    "data.dir": None,
    "data.genre": 1,
    "data.min_eval": 500,
    "synthetic.input_dim": 16,
    "synthetic.n_subpops": 4,
    "synthetic.mixture": [0.4, 0.3, 0.25, 0.05],
    "synthetic.downstream": 3,
    "synthetic.noise_std": 0.3,
    "synthetic.n_pretrain": 20000,
    "synthetic.n_pretrain_eval": 2000,
    "synthetic.n_downstream_train": 200,
    "synthetic.n_downstream_eval": 2000,
    "synthetic.shared_hidden": 32,
    "synthetic.shift_scale": 1.0,
    "synthetic.center_scale": 1.0,
    "synthetic.kind": "mlp",
    "synthetic.seed": 0,
    "teacher.hidden": [512, 256],
    "teacher.dropout": 0.0,
    "teacher.lr": 1e-3,
    "teacher.steps": 1000,
    "teacher.batch_size": 256,
    "teacher.eval_every": 250,
    "teacher.seed": 0,
    "teacher.select": "best",
    "student.hidden": [128, 64],
    "student.dropout": 0.0,
    "channel.hidden": 256,
    "channel.msg_dim": 128,
    "channel.dropout": 0.1,
    "train.method": "TD",
    "train.k": 1,
    "train.interaction": True,
    "train.w1": 1.0,
    "train.w2": 1.0,
    "train.w3": 1.0,
    "train.lambda_logit": 1.0,
    "train.lambda_feature": 1.0,
    "train.lambda_fitnet": 1.0,
    "train.lambda_hybrid_logit": 1.0,
    "train.lambda_hybrid_feature": 1.0,
    "train.noise_sigma": 0.0,
    "train.ramp_student_steps": 0,
    "train.ramp_channel_steps": 0,
    "train.steps": 600,
    "train.batch_size": 256,
    "train.lr": 1e-3,
    "train.eval_every": 50,
    "train.log_every": 10,
    "train.select": "final",
    "log.wall_clock": True,
    "sweep.grid": {},
    "sweep.cells": [],
    "sweep.seeds": [0, 1, 2, 3, 4],
    "sweep.max_runs": 500,
    "analyze.per_class_n": 20,
}

# keys whose value is itself a mapping/list and must not be flattened
_OPAQUE = {"sweep.grid", "sweep.cells"}


def flatten(d, prefix=""):
    out = {}
    for key, value in d.items():
        full = f"{prefix}{key}"
        if isinstance(value, dict) and full not in _OPAQUE:
            out.update(flatten(value, f"{full}."))
        else:
            out[full] = value
    return out


def _check_keys(values, source):
    unknown = sorted(set(values) - set(DEFAULTS))
    if unknown:
        raise ConfigError(f"unknown config keys in {source}: {', '.join(unknown)}")


def parse_override(text):
    """``key=value`` with the value parsed as YAML (so ``3``, ``true``, ``[1,2]`` work)."""
    if "=" not in text:
        raise ConfigError(f"override must look like key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        return key.strip(), yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override {text!r}: {exc}") from None


def load(path=None, overrides=None):
    """Resolve defaults <- file <- overrides into a new flat dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            raw = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must be a mapping")
        values = flatten(raw)
        _check_keys(values, path)
        cfg.update(values)
    if overrides:
        values = dict(overrides)
        _check_keys(values, "overrides")
        cfg.update(values)
    if cfg["data.dir"] is None:
        cfg["data.dir"] = os.environ.get("TD_DATA_DIR")
    return cfg


def dump(cfg, path):
    Path(path).write_text(yaml.safe_dump(dict(sorted(cfg.items())), sort_keys=False))


def section(cfg, prefix):
    """Sub-mapping for ``prefix.`` with the prefix stripped."""
    p = prefix + "."
    return {k[len(p):]: v for k, v in cfg.items() if k.startswith(p)}
