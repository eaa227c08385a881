"""Flat key=value configuration with strict per-command schemas.

Values come from an optional config file plus repeated --set overrides; the
file loads first and overrides win.  Unknown keys are rejected outright so a
typo cannot silently fall back to a default.
"""

from __future__ import annotations

import os

from .errors import ConfigError

# short aliases accepted anywhere the long key is
ALIASES = {"s": "cut_area", "k": "mask_keep", "r": "correlation"}


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes"):
        return True
    if low in ("0", "false", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(",") if v.strip() != "")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip() != "")


def _in_range(lo, hi, lo_open=False, hi_open=False):
    def check(v):
        ok = (v > lo if lo_open else v >= lo) and (v < hi if hi_open else v <= hi)
        if not ok:
            lb, rb = "(" if lo_open else "[", ")" if hi_open else "]"
            raise ConfigError(f"value {v} outside {lb}{lo}, {hi}{rb}")
        return v

    return check


def _positive(v):
    if v <= 0:
        raise ConfigError(f"value {v} must be positive")
    return v


# schema entry: key -> (converter, validator or None)
_UNIT = _in_range(0.0, 1.0)
_CUT = _in_range(0.0, 1.0, hi_open=True)

SYNTH_SCHEMA = {
    "out": (str, None),
    "num_fg": (int, _positive),
    "num_bg": (int, _positive),
    "correlation": (float, _UNIT),
    "per_class": (int, _positive),
    "height": (int, _positive),
    "width": (int, _positive),
    "seed": (int, None),
    "known": (_ints, None),
}

TRAIN_SCHEMA = {
    "data": (str, None),
    "split": (str, None),
    "out": (str, None),
    "augmentation": (str, None),
    "epochs": (int, None),
    "batch_size": (int, _positive),
    "lr": (float, _positive),
    "momentum": (float, _UNIT),
    "weight_decay": (float, None),
    "cut_area": (float, _CUT),
    "mask_keep": (float, _UNIT),
    "pairing": (str, None),
    "oe_alpha": (float, None),
    "mixup_alpha": (float, _positive),
    "ema_beta": (float, None),
    "cam_source": (str, None),
    "seed": (int, None),
    "outlier_data": (str, None),
    "outlier_split": (str, None),
    "checkpoint_dir": (str, None),
}

SCORE_SCHEMA = {
    "model": (str, None),
    "data": (str, None),
    "split": (str, None),
    "known": (_bool, None),
    "method": (str, None),
    "temperature": (float, _positive),
    "eps": (float, None),
    "out": (str, None),
}

EVAL_SCHEMA = {
    "scores": (str, None),
    "name": (str, None),
    "out": (str, None),
}

EXPERIMENT_SCHEMA = {
    "num_known": (int, _positive),
    "num_unknown": (int, _positive),
    "num_outlier": (int, _positive),
    "correlation": (float, _UNIT),
    "train_per_class": (int, _positive),
    "test_per_class": (int, _positive),
    "height": (int, _positive),
    "width": (int, _positive),
    "epochs": (int, _positive),
    "batch_size": (int, _positive),
    "lr": (float, _positive),
    "cut_area": (float, _CUT),
    "mask_keep": (float, _UNIT),
    "pairing": (str, None),
    "seeds": (_ints, None),
    "score_method": (str, None),
    "workers": (int, _positive),
    "out": (str, None),
    "s_values": (_floats, None),
    "k_values": (_floats, None),
    "r_values": (_floats, None),
}

THEORY_SCHEMA = {
    "n": (int, _positive),
    "seed": (int, None),
    "tol": (float, _positive),
}

REPORT_SCHEMA = {
    "path": (str, None),
}


def read_kv_file(path) -> dict[str, str]:
    """key=value lines; blank lines and full-line # comments are skipped."""
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    out: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{lineno}: expected key=value, got {text!r}")
            key, value = text.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def parse_overrides(items) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def coerce(raw: dict[str, str], schema: dict, command: str) -> dict:
    """Type and range-check raw strings against one command's schema."""
    cfg = {}
    for key, text in raw.items():
        canon = ALIASES.get(key, key)
        if canon not in schema:
            allowed = ", ".join(sorted(schema))
            raise ConfigError(f"unknown key {key!r} for {command} (allowed: {allowed})")
        converter, validator = schema[canon]
        try:
            value = converter(text)
        except (ValueError, TypeError) as e:
            raise ConfigError(f"bad value for {key}: {e}") from e
        if validator is not None:
            try:
                validator(value)
            except ConfigError as e:
                raise ConfigError(f"{key}: {e}") from e
        cfg[canon] = value
    return cfg


def require(cfg: dict, keys, command: str) -> None:
    missing = [k for k in keys if k not in cfg]
    if missing:
        raise ConfigError(f"{command} requires config keys: {', '.join(missing)}")


def load(config_path, overrides, schema, command: str) -> dict:
    raw = read_kv_file(config_path) if config_path else {}
    raw.update(parse_overrides(overrides))
    return coerce(raw, schema, command)
