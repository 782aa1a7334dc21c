"""Run configuration: JSON files with dotted-key command-line overrides.

A config is a plain nested dict. Each task ships toy-scale defaults; a
JSON file and then ``--set key.path=value`` overrides are merged on top.
Unknown keys are rejected so typos fail loudly. The fingerprint (stored
in checkpoints) hashes everything except ``out_dir`` so moving a run
directory does not invalidate its checkpoints.
"""

import copy
import hashlib
import json

from .errors import ConfigError
from .schedules import KINDS

DEFAULTS = {
    "det": {
        "task": "det",
        "model": {"neck": "rse_fpn", "width_mult": 0.5, "neck_ch": 32,
                  "k": 50.0, "alpha": 1.0, "beta": 10.0, "role": "student",
                  "depth": 1, "seed": 0},
        "optimizer": {"lr": 0.001, "schedule": "cosine", "warmup_epochs": 2,
                      "weight_decay": 5e-5},
        "data": {"n_scenes": 500, "holdout": 50, "hw": [96, 96],
                 "n_texts": [1, 4], "text_len": [2, 5],
                 "rotation_range": [-0.5, 0.5], "charset": "0123456789",
                 "charset_path": None, "seed": 0},
        "train": {"mode": "plain", "teacher_ckpt": None,
                  "w_peer_dml": 1.0, "w_teacher": 1.0},
        "epochs": 60,
        "batch_size": 8,
        "seed": 0,
        "out_dir": "runs/det",
    },
    "rec": {
        "task": "rec",
        "model": {"variant": "lcnet_g2_postpool", "height": 48,
                  "max_width": 512, "d": 64, "heads": 4, "max_label_len": 25,
                  "gtc_enabled": True, "width_mult": 0.5, "in_ch": 1,
                  "seed": 0},
        "optimizer": {"lr": 0.001, "schedule": "piecewise",
                      "warmup_epochs": 2, "weight_decay": 3e-5,
                      "ctc_head_decay": 1e-5},
        "data": {"n_lines": 2000, "holdout": 200, "text_len": [1, 8],
                 "charset": "0123456789", "charset_path": None,
                 "noise_sigma": 0.03, "seed": 0},
        "train": {"conaug": False, "conaug_prob": 0.5, "udml": False,
                  "init_from": None, "extra_data": None},
        "epochs": 50,
        "batch_size": 32,
        "seed": 0,
        "out_dir": "runs/rec",
    },
    "rotnet": {
        "task": "rotnet",
        "model": {"variant": "lcnet_g2_postpool", "height": 48,
                  "max_width": 512, "d": 64, "heads": 4, "max_label_len": 25,
                  "gtc_enabled": True, "width_mult": 0.5, "in_ch": 1,
                  "seed": 0},
        "optimizer": {"lr": 0.001},
        "data": {"n_lines": 512, "holdout": 64, "text_len": [1, 8],
                 "charset": "0123456789", "charset_path": None,
                 "noise_sigma": 0.03, "seed": 0},
        "epochs": 3,
        "batch_size": 32,
        "seed": 0,
        "out_dir": "runs/rotnet",
    },
}


def default_config(task: str) -> dict:
    if task not in DEFAULTS:
        raise ConfigError(f"unknown task {task!r}; choose from {sorted(DEFAULTS)}")
    return copy.deepcopy(DEFAULTS[task])


def _merge(base: dict, extra: dict, path: str = ""):
    for key, val in extra.items():
        here = f"{path}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key {here!r}")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"{here!r} must be a section, got {val!r}")
            _merge(base[key], val, here + ".")
        else:
            base[key] = val


def apply_override(cfg: dict, assignment: str):
    """Apply one ``dotted.key=value`` override; values parse as JSON when
    possible and fall back to plain strings."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not of the form key=value")
    key, _, raw = assignment.partition("=")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    node = cfg
    parts = key.strip().split(".")
    for part in parts[:-1]:
        if not isinstance(node.get(part), dict):
            raise ConfigError(f"unknown config key {key!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {key!r}")
    if isinstance(node[parts[-1]], dict):
        raise ConfigError(f"{key!r} names a section, not a value")
    node[parts[-1]] = value


def load_config(task: str, path=None, sets=()) -> dict:
    cfg = default_config(task)
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"config {path} is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        if loaded.get("task", task) != task:
            raise ConfigError(
                f"config task {loaded['task']!r} does not match command task {task!r}")
        _merge(cfg, loaded)
    for assignment in sets:
        apply_override(cfg, assignment)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    opt = cfg.get("optimizer", {})
    if opt.get("lr", 1.0) <= 0:
        raise ConfigError("optimizer.lr must be positive")
    if "schedule" in opt and opt["schedule"] not in KINDS:
        raise ConfigError(f"optimizer.schedule must be one of {KINDS}")
    if cfg.get("epochs", 0) < 0:
        raise ConfigError("epochs must be >= 0")
    if cfg.get("batch_size", 1) < 1:
        raise ConfigError("batch_size must be >= 1")


def fingerprint(cfg: dict) -> str:
    """Stable hash of the config, excluding out_dir."""
    slim = {k: v for k, v in cfg.items() if k != "out_dir"}
    blob = json.dumps(slim, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]
