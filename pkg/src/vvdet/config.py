"""Flat ``key = value`` configuration with dotted keys.

Values are Python literals (numbers, booleans, quoted or bare strings,
lists). Every key must appear in ``DEFAULTS``; unknown keys are rejected
with the full list of offenders. Precedence: defaults < file < ``--set``.
"""
from __future__ import annotations

import ast

DEFAULTS = {
    "seed": 0,
    # dataset
    "data.root": "data",
    "data.num_train": 200,
    "data.num_val": 50,
    "scene.half_range": 20.0,
    "scene.class_names": ["car", "pedestrian", "cone"],
    "scene.class_dims": [[4.5, 2.0, 1.6], [0.8, 0.8, 1.7], [0.3, 0.3, 0.6]],
    "scene.class_probs": [0.4, 0.3, 0.3],
    "scene.dim_jitter": 0.05,
    "scene.min_objects": 4,
    "scene.max_objects": 10,
    "scene.crowding": 0.2,
    "scene.ground_points": 1500,
    "scene.density": 20.0,
    "scene.density_falloff": 1.0,
    "scene.min_object_points": 5,
    "scene.max_object_points": 400,
    "scene.max_points": 5000,
    # model
    "model.tail": "v2",
    "model.voxel_size": [0.4, 0.4, 0.4],
    "model.z_min": -1.0,
    "model.vfe_widths": [32, 32],
    "model.backbone_channels": [16, 32, 64],
    "model.neck_widths": [32],
    "model.seg_widths": [32],
    "model.vote_threshold": 0.3,
    "model.vote_scale": 1.0,
    "model.train_votes_from_gt": True,
    "model.sir_widths": [32, 32],
    "model.sir_iterations": 2,
    "model.mixer_inputs": "virtual+multiscale-real",
    "model.mixer_width": 32,
    "model.mixer_channels": [32, 32, 32],
    "model.head_widths": [32],
    "model.head_skip": True,
    "model.task_groups": [[0], [1, 2]],
    "model.ccl_radius": 0.6,
    "model.norm": "none",
    # assignment
    "assign.strategy": "weighted-centroid",
    "assign.alpha": 0.5,
    "assign.margin": 0.0,
    "assign.k": 1,
    # losses
    "loss.gamma": 2.0,
    "loss.alpha": 0.25,
    "loss.w_cls": 1.0,
    "loss.w_reg": 1.0,
    "loss.w_vote": 1.0,
    "loss.balance": "object",
    # optimisation
    "train.epochs": 30,
    "train.lr": 0.003,
    "train.betas": [0.9, 0.99],
    "train.weight_decay": 0.01,
    "train.schedule": "onecycle",
    "train.augment": True,
    "train.max_scenes": 0,
    "train.eval_every": 1,
    "train.grad_clip": 10.0,
    "train.workers": 1,
    "train.out": "runs/default",
    # evaluation
    "eval.score_thresh": 0.1,
    "eval.nms_iou": 0.25,
    "eval.iou_thresholds": [0.5, 0.5, 0.5],
    "eval.max_scenes": 0,
}


class ConfigError(ValueError):
    pass


def parse_value(text):
    text = text.strip()
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if isinstance(value, tuple):
            value = list(value)
        if not isinstance(value, list):
            raise ConfigError(f"{key}: expected a list, got {value!r}")
        return value
    return str(value)


def parse_lines(lines, source="<config>"):
    out = {}
    for n, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value'")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


class Config(dict):
    def section(self, prefix):
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.items() if k.startswith(p)}


def _check_keys(layers):
    unknown = sorted({k for layer in layers for k in layer if k not in DEFAULTS})
    if unknown:
        raise ConfigError("unknown config key(s): " + ", ".join(unknown))


def load_config(path=None, overrides=()):
    """Defaults, then the file at ``path``, then ``key=value`` overrides."""
    layers = []
    if path:
        with open(path) as f:
            layers.append(parse_lines(f, path))
    layers.append(parse_lines(list(overrides), "--set"))
    _check_keys(layers)
    cfg = Config(DEFAULTS)
    for layer in layers:
        for k, v in layer.items():
            cfg[k] = _coerce(k, v)
    return cfg


def apply_overrides(cfg, overrides):
    """Copy of ``cfg`` with ``key=value`` overrides applied."""
    layer = parse_lines(list(overrides), "--set")
    _check_keys([layer])
    out = Config(DEFAULTS)
    out.update(cfg)
    for k, v in layer.items():
        out[k] = _coerce(k, v)
    return out


def dump_config(cfg):
    return "".join(f"{k} = {v!r}\n" for k, v in sorted(cfg.items()))
