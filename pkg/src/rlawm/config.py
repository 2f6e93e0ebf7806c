"""Run configuration: nested defaults, the desk/paper presets, JSON config
files, and dotted-key overrides. Precedence: defaults < preset < file < --set."""

import copy
import hashlib
import json
from pathlib import Path

from .errors import ConfigError

DEFAULTS = {
    "env": {
        "task": "push",          # push | play | bimodal
        "episodes": 120,
        "horizon": 48,
    },
    "tokens": {
        "patch_size": 8,
        "channels": 32,
        "backbone_seed": 0,
    },
    "renderer": {
        "base_channels": 64,
        "steps": 700,
        "batch_size": 16,
        "lr": 1e-3,
        "val_fraction": 0.1,
    },
    "rla": {
        "latent_tokens": 8,
        "latent_dim": 16,
        "layers": 4,
        "heads": 4,
        "width": 128,
        "steps": 1800,
        "batch_size": 16,
        "lr": 3e-4,
        "movement_bias": 0.9,
        "horizon_max": 8,
        "stats_pairs": 256,
    },
    "wm": {
        "width": 128,
        "heads": 4,
        "cond_layers": 3,
        "flow_layers": 3,
        "horizon_max": 8,
        "n_action_tokens": 1,
        "steps": 2200,
        "batch_size": 16,
        "lr": 3e-4,
        "ode_steps": 30,
        "mode": "flow",
        "movement_bias": 0.9,
    },
    "wam": {
        "width": 128,
        "fusion_layers": 2,
        "heads": 4,
        "n_pred": 8,
        "n_exec": 6,
        "labeled_fraction": 0.1,
        "steps": 1500,
        "batch_size": 32,
        "lr": 3e-4,
        "weight_decay": 1e-4,
        "rla_weight": 1.0,
        "n_checkpoints": 8,
        "sample_stride": 2,
        "preprocess": False,
    },
    "wmrl": {
        "n_envs": 8,
        "steps_per_env": 4,
        "updates": 40,
        "ppo_epochs": 8,
        "batch_cap": 224,
        "checkpoint_every": 10,
        "lr": 3e-4,
        "gamma": 0.9,
        "lam": 0.95,
        "clip": 0.2,
        "ent_coef": 1e-3,
        "vf_coef": 0.5,
        "lora_rank": 8,
        "lora_alpha": 8.0,
        "action_bound": 0.1,
        "reward_mode": "aligned",
        "reward_scale": 5.0,
        "ode_steps": 10,
        "max_transitions": 4,
        "workers": 1,
    },
    "eval": {
        "rollout_steps": 12,
        "chunk_size": 4,
        "seeds_start": 42,
        "seeds_count": 50,
        "max_steps": 60,
        "use_proprio": True,
        "preprocess": False,
    },
    "probe": {
        "alphas": [0.0, 0.25, 0.5, 0.75, 1.0],
        "pairs": 100,
        "horizon_min": 4,
    },
}

# Published-scale settings; not intended to run on desk hardware.
PAPER_PRESET = {
    "tokens": {"patch_size": 16, "channels": 1024},
    "renderer": {"base_channels": 1024},
    "rla": {"latent_tokens": 32, "latent_dim": 64, "layers": 12, "heads": 16,
            "width": 1024, "lr": 1e-4, "steps": 100000, "batch_size": 128,
            "horizon_max": 15},
    "wm": {"width": 1024, "heads": 16, "cond_layers": 8, "flow_layers": 8,
           "horizon_max": 15, "lr": 1e-4, "steps": 100000, "batch_size": 64,
           "ode_steps": 30},
    "wam": {"n_pred": 12, "n_exec": 8, "labeled_fraction": 0.05,
            "fusion_layers": 6, "width": 256, "heads": 8},
    "wmrl": {"n_envs": 112, "steps_per_env": 4, "updates": 2400,
             "ppo_epochs": 8, "batch_cap": 224, "checkpoint_every": 200,
             "lr": 1e-4, "ode_steps": 30, "max_transitions": 4},
    "eval": {"rollout_steps": 30, "chunk_size": 10, "max_steps": 100},
}

PRESETS = {"desk": {}, "paper": PAPER_PRESET}


def _merge(base: dict, overlay: dict, path: str = "") -> None:
    for key, value in overlay.items():
        full = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {full!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{full!r} expects a section, got {value!r}")
            _merge(base[key], value, full)
        else:
            if not _type_ok(base[key], value):
                raise ConfigError(
                    f"{full!r} expects {type(base[key]).__name__}, got {value!r}")
            base[key] = value


def _type_ok(default, value) -> bool:
    if isinstance(default, bool):
        return isinstance(value, bool)
    if isinstance(default, float):
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if isinstance(default, int):
        return isinstance(value, int) and not isinstance(value, bool)
    if isinstance(default, str):
        return isinstance(value, str)
    if isinstance(default, list):
        return isinstance(value, list)
    return True


def parse_set(expr: str) -> dict:
    """'wm.layers=3' -> {'wm': {'layers': 3}} with JSON value parsing."""
    if "=" not in expr:
        raise ConfigError(f"--set expects key=value, got {expr!r}")
    key, raw = expr.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = value
    for part in reversed(key.strip().split(".")):
        node = {part: node}
    return node


def resolve_config(preset: str = "desk", config_path=None, sets=None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    _merge(cfg, copy.deepcopy(PRESETS[preset]))
    if config_path:
        p = Path(config_path)
        if not p.exists():
            raise FileNotFoundError(f"config file {p} not found")
        try:
            overlay = json.loads(p.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file is not valid JSON: {e}") from e
        _merge(cfg, overlay)
    for expr in sets or []:
        _merge(cfg, parse_set(expr))
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(
        json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()
