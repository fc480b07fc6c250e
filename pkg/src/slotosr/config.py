"""Flat dotted-key run configuration.

One plain-text file drives every subcommand: ``key=value`` lines with dotted
namespaces (``ans.alpha=0.5``), every key overridable by a command-line flag
of the same name. Resolved configs are snapshotted next to each run's
outputs so any run can be replayed exactly.
"""

from pathlib import Path

CONFIG_SCHEMA = "slotosr-config-v1"

# defaults; None marks values resolved later from other keys (see resolve_cls_schedule)
DEFAULTS = {
    "seed": 0,
    "data.dir": "runs/bench",
    "data.mode": "single",
    "data.n_train": 600,
    "data.n_test_known": 100,
    "data.n_test_h": 100,
    "data.n_test_m": 100,
    "data.n_diag": 100,
    "data.canvas": 64,
    "model.num_slots": 6,
    "model.slot_dim": 64,
    "model.iters": 3,
    "model.patch": 8,
    "model.enc_hidden": 128,
    "model.dec_hidden": 128,
    "model.feature_target": "pixel",
    "pretrain.epochs": 60,
    "pretrain.batch_size": 16,
    "pretrain.lr": 0.001,
    "pretrain.mosaics": 600,
    "pretrain.objects_lo": 3,
    "pretrain.objects_hi": 4,
    "pretrain.color_aug": True,
    "cls.mode": "ans",
    "cls.lr": None,
    "cls.epochs": None,
    "cls.halve_every": 40,
    "cls.batch_size": 32,
    "cls.hidden": 64,
    "ans.alpha": 0.5,
    "ans.beta": 0.75,
    "ans.lambda_match": 10000.0,
    "ans.w_nz": 0.01,
    "ans.warmup_epochs": 5,
    "score.metric": "energy",
    "score.scheme": "all",
    "score.gamma": 0.75,
    "score.energy_t": 1.0,
    "score.odin_t": 1000.0,
    "osod.energy_threshold": 5.0,
    "osod.fg_threshold": 0.75,
    "osod.binarize": 0.5,
    "osod.min_pixels": 40,
    "out.dir": "runs",
    "checkpoint.slot": "",
    "checkpoint.heads": "",
}

_THRESHOLD_KEYS = ("ans.beta", "score.gamma", "osod.binarize")


def _coerce(key, raw):
    """Parse a raw string against the default's type for that key."""
    if key not in DEFAULTS:
        raise KeyError(f"unknown config key {key!r}")
    default = DEFAULTS[key]
    if isinstance(raw, str):
        raw = raw.strip()
    if default is None or isinstance(default, float):
        return float(raw)
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if isinstance(default, int):
        return int(raw)
    return str(raw)


def load_config(path=None, overrides=None):
    """Defaults <- optional config file <- explicit overrides, validated."""
    cfg = dict(DEFAULTS)
    if path is not None:
        cfg.update(_read_file(path))
    for key, raw in (overrides or {}).items():
        cfg[key] = _coerce(key, raw)
    validate(cfg)
    return cfg


def _read_file(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no config file at {path}")
    out = {}
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{ln}: expected key=value, got {line!r}")
        key, raw = line.split("=", 1)
        key = key.strip()
        if key == "schema":
            if raw.strip() != CONFIG_SCHEMA:
                raise ValueError(f"{path}: unsupported config schema {raw.strip()!r}")
            continue
        out[key] = _coerce(key, raw)
    return out


def validate(cfg):
    for key in _THRESHOLD_KEYS:
        v = cfg[key]
        if not 0.0 < v < 1.0:
            raise ValueError(f"config {key}={v}: must lie strictly inside (0, 1)")
    if cfg["data.mode"] not in ("single", "multi"):
        raise ValueError(f"config data.mode={cfg['data.mode']!r}: must be single or multi")
    if cfg["cls.mode"] not in ("ans", "plain"):
        raise ValueError(f"config cls.mode={cfg['cls.mode']!r}: must be ans or plain")
    if cfg["score.scheme"] not in ("all", "selective"):
        raise ValueError(f"config score.scheme={cfg['score.scheme']!r}")
    for key in ("pretrain.epochs", "pretrain.batch_size", "cls.batch_size",
                "cls.halve_every", "model.num_slots", "model.iters"):
        if cfg[key] < 1:
            raise ValueError(f"config {key}={cfg[key]}: must be >= 1")


def resolve_cls_schedule(cfg):
    """Fill classifier lr/epochs from the label mode when not set explicitly."""
    out = dict(cfg)
    if out["cls.lr"] is None:
        out["cls.lr"] = 0.0004 if out["data.mode"] == "single" else 0.005
    if out["cls.epochs"] is None:
        out["cls.epochs"] = 200 if out["data.mode"] == "single" else 250
    out["cls.epochs"] = int(out["cls.epochs"])
    return out


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def save_config(cfg, path):
    """Write the resolved snapshot: schema line, then sorted key=value lines."""
    lines = [f"schema={CONFIG_SCHEMA}"]
    for key in sorted(cfg):
        v = cfg[key]
        lines.append(f"{key}={'' if v is None else format_value(v)}")
    Path(path).write_text("\n".join(lines) + "\n")
