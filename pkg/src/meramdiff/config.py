"""Run configuration shared by every CLI command.

A config file is YAML with one mapping per section.  Anything missing falls
back to :data:`DEFAULTS`; unknown sections or keys are rejected so typos
fail loudly instead of silently running the defaults.
"""

from __future__ import annotations

import copy
from pathlib import Path

import yaml

DEFAULTS: dict = {
    "device": {},  # DeviceParams overrides, SI units
    "sweep": {"voltages": [2.1, 2.4, 2.7], "widths_ns": "0.1:3.0:60", "trials": 2000, "relax_ns": 5.0},
    "lookup": {"voltage": 2.4, "widths_ns": "0.05:3.0:60", "trials": 1000, "relax_ns": 5.0, "max_ci": 0.05},
    "calibrate": {"sigma": 1.0, "n_bits": 8, "starts": 8, "metric": "tv", "symmetric": True,
                  "pulse_tol": 0.05},
    "stream": {"backend": "markov", "mode": "independent", "scale": 1.0, "offset": 0.0, "burn_in": 100,
               "defect_rate": 0.0, "defect_kind": "stuck_P", "n_units": 1},
    "sample": {"n": 40000, "hist_sizes": [10000, 40000], "replacement": False},
    "dataset": {"letter": "U", "size": 16, "n": 8192, "jitter": 1, "flip": 0.02, "smooth": 0.0},
    "ddpm": {"T": 100, "epochs": 50, "lr": 1e-3, "batch_size": 32, "hidden": 256, "ema": 0.999},
    "generate": {"n": 50},
    "evaluate": {"epochs": [10, 25, 50, 100], "sources": ["ideal", "meram"], "n_images": 50, "n_perm": 200},
}


class ConfigError(ValueError):
    pass


def _merge(base: dict, override: dict, where: str) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base and where != "device":
            raise ConfigError(f"unknown key {where}.{key}")
        out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults overlaid with the YAML file at ``path`` (if given)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is None:
        return cfg
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"{path}: invalid YAML: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    for section, body in data.items():
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section {section!r}")
        if body is None:
            continue
        if not isinstance(body, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        cfg[section] = _merge(DEFAULTS[section], body, section)
    return cfg


def parse_range(text: str) -> list[float]:
    """``"a:b:n"`` gives ``n`` evenly spaced points from ``a`` to ``b`` inclusive;
    ``"a,b,c"`` is an explicit list."""
    text = str(text).strip()
    try:
        if ":" in text:
            a, b, n = text.split(":")
            a, b, n = float(a), float(b), int(n)
            if n < 1 or (n > 1 and b <= a):
                raise ValueError
            if n == 1:
                return [a]
            return [round(a + (b - a) * i / (n - 1), 12) for i in range(n)]
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse range {text!r}; use a:b:n or a comma list") from e


def parse_list(text, kind=str) -> list:
    if isinstance(text, (list, tuple)):
        return [kind(v) for v in text]
    try:
        return [kind(v.strip()) for v in str(text).split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"cannot parse list {text!r}") from e
