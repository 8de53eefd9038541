"""Experiment configuration: YAML on disk, validated against the defaults, hashed canonically."""
import copy
import difflib
import hashlib
import json

import yaml

from .errors import ConfigError
from .models import ArchitectureSpec
from .seeding import substream_seed

_AUX = [
    {"family": "conv-residual", "depth": 8, "width": 16},
    {"family": "conv-mobile", "depth": 8, "width": 16},
    {"family": "attention", "depth": 4, "width": 64, "patch_size": 4},
]

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs",
    "dataset": {"name": "digits", "root": None, "classes": [3, 5, 8], "resolution": 16},
    "pool": {
        "auxiliaries": _AUX,
        "pretrain": {"warmup": 2, "decay": 28, "batch_size": 32, "unit": "epoch"},
        "pretrain_lr": {"conv-plain": 0.05, "conv-residual": 0.05, "conv-mobile": 0.05, "attention": 0.01},
    },
    "distill": {
        "baseline": "dm",
        "metadd": True,
        "iterations": 200,
        "lr_img": 1.0,
        "ipc": 10,
        "batch_real": 64,
        "batch_syn": None,
        "init": "real",
        "weights": {"ai": 1.0, "var": 1.0, "pos": 1.0, "normalize": True, "pos_sign": -1.0},
        "momentum": 0.0,
        "backbone": {"family": "conv-plain", "depth": 3, "width": 32},
        "cam_size": None,
        "max_cam_batch": 512,
        "snapshot_every": 50,
        "dc_outer_loop": 10,
        "dc_inner_steps": 10,
        "dc_lr_net": 0.01,
    },
    "eval": {
        "unseen": [
            {"family": "conv-plain", "depth": 2, "width": 48},
            {"family": "conv-residual", "depth": 4, "width": 24},
        ],
        "repeats": 3,
        "schedule": {"warmup": 150, "decay": 150, "batch_size": 64, "unit": "step"},
        "lr": {"conv-plain": 0.01, "conv-residual": 0.01, "conv-mobile": 0.02, "attention": 0.005},
        "snapshot_curve": True,
    },
    "erasure": {
        "target": {"family": "attention", "depth": 4, "width": 64, "patch_size": 4},
        "seeds": [0, 1, 2],
        "fill": "mean",
        "schedule": {"warmup": 2, "decay": 28, "batch_size": 32, "unit": "epoch"},
    },
    "cam_export": {"max_samples": 30, "colormap": None},
}

# keys whose value is free-form (lists of specs, optional dicts) and are validated elsewhere
_OPAQUE = {("pool", "auxiliaries"), ("eval", "unseen"), ("erasure", "target"), ("distill", "backbone"),
           ("dataset", "classes"), ("erasure", "seeds"), ("pool", "pretrain_lr"), ("eval", "lr")}


def _all_paths(d, prefix=()):
    for k, v in d.items():
        p = prefix + (k,)
        yield ".".join(p)
        if isinstance(v, dict) and p not in _OPAQUE:
            yield from _all_paths(v, p)


def _merge(base, override, prefix=()):
    for k, v in override.items():
        p = prefix + (k,)
        if k not in base:
            valid = list(_all_paths(DEFAULTS))
            near = difflib.get_close_matches(".".join(p), valid, n=1, cutoff=0.0)
            raise ConfigError(f"unknown config key {'.'.join(p)!r}; nearest valid key: {near[0] if near else '?'!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and p not in _OPAQUE:
            _merge(base[k], v, p)
        else:
            base[k] = copy.deepcopy(v)


def resolve(user: dict = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if user:
        if not isinstance(user, dict):
            raise ConfigError("config root must be a mapping")
        _merge(cfg, user)
    validate(cfg)
    return cfg


def load(path, overrides: dict = None) -> dict:
    """Load YAML, then apply ``overrides`` (flag values). Precedence: flag > file > default."""
    try:
        with open(path) as f:
            user = yaml.safe_load(f) or {}
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config {path} is not valid YAML: {e}") from None
    cfg = copy.deepcopy(DEFAULTS)
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    _merge(cfg, user)
    if overrides:
        _merge(cfg, overrides)
    validate(cfg)
    return cfg


def set_path(d: dict, dotted: str, value):
    """Build a nested override dict entry from ``a.b.c`` -> value."""
    keys = dotted.split(".")
    cur = d
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
    cur[keys[-1]] = value


def validate(cfg):
    if not cfg["dataset"]["classes"] and cfg["dataset"]["classes"] is not None:
        raise ConfigError("dataset.classes is empty")
    res = cfg["dataset"]["resolution"]
    nc = len(cfg["dataset"]["classes"] or []) or 10
    for a in cfg["pool"]["auxiliaries"]:
        arch_spec(a, nc, res, 1).validate()
    for a in cfg["eval"]["unseen"]:
        arch_spec(a, nc, res, 1).validate()
    arch_spec(cfg["erasure"]["target"], nc, res, 1).validate()
    if cfg["distill"]["baseline"] not in ("dc", "dm"):
        raise ConfigError("distill.baseline must be dc or dm")
    if cfg["eval"]["repeats"] < 1:
        raise ConfigError("eval.repeats must be >= 1")


def arch_spec(entry: dict, num_classes, resolution, in_channels) -> ArchitectureSpec:
    return ArchitectureSpec.from_dict({"num_classes": num_classes, "input_resolution": resolution,
                                       "in_channels": in_channels, **entry})


def canonical_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_text(obj).encode()).hexdigest()


STAGE_KEYS = {
    "pretrain": ("seed", "dataset", "pool"),
    "distill": ("seed", "dataset", "pool", "distill"),
    "eval": ("seed", "dataset", "pool", "distill", "eval"),
    "cam-export": ("seed", "dataset", "pool", "distill", "cam_export"),
    "erase-study": ("seed", "dataset", "pool", "erasure"),
}


def stage_config(cfg, stage) -> dict:
    return {k: cfg[k] for k in STAGE_KEYS[stage]}


def stage_hash(cfg, stage) -> str:
    return config_hash(stage_config(cfg, stage))


def stage_seed(cfg, *names) -> int:
    return substream_seed(cfg["seed"], *names)


def dump(cfg) -> str:
    return yaml.safe_dump(cfg, sort_keys=True)
