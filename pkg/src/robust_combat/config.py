"""Run configuration: an INI file with sections, every key optional."""

from __future__ import annotations

import configparser
import hashlib
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .filters import FilterSpec
from .mlp import NetworkConfig
from .synth import GRID_RATIOS, UniverseConfig

ALL_FILTERS = ("none", "oracle_hc", "zs", "iqr", "mad", "sn", "qn", "mms", "vs",
               "g_zs", "g_mad", "mlp")

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0, "out": "results", "threads": 1, "log_level": "INFO"},
    "paths": {"reference": "", "pool": "", "model": ""},
    "universe": {"n_reference": 600, "n_hc": 1000, "n_per_profile": 300,
                 "profiles": ("AD", "TBI", "MCI"), "noise_scale": 0.05, "augment_factor": 3},
    "grid": {"ratios": GRID_RATIOS, "sites_per_ratio": 40, "n_subjects": 100,
             "gamma_scale": 0.5, "delta_range": (0.7, 1.4)},
    "filters": {"methods": ALL_FILTERS},
    "mlp": {"hidden": (256, 128, 64), "dropout_rate": 0.5, "batch_size": 64,
            "hc_penalty_weight": 2.0, "learning_rate": 1e-3, "adam_betas": (0.9, 0.999),
            "adam_epsilon": 1e-8, "max_epochs": 300, "early_stop_patience": 20,
            "threshold": 0.5, "train_sites_per_ratio": 8, "val_sites_per_ratio": 2,
            "seeds": (0, 1, 2)},
    "size_sweep": {"sizes": (20, 30, 40, 50, 60), "ratios": (0.5, 0.7, 0.8),
                   "sites_per_cell": 20},
    "bootstrap": {"n_iterations": 30, "heldout_per_iter": 3, "sites_per_family": 4,
                  "train_sites_per_ratio": 4, "val_sites_per_ratio": 1,
                  "profiles": ("AD", "TBI", "MCI", "SCHZ", "BIP", "ADHD")},
}

# settings that do not change results and stay out of the hash
_UNHASHED = {("run", "out"), ("run", "threads"), ("run", "log_level")}


def _parse_value(text: str, default, where: str):
    text = text.strip()
    try:
        if isinstance(default, bool):
            return configparser.ConfigParser.BOOLEAN_STATES[text.lower()]
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            items = [t.strip() for t in text.split(",") if t.strip()]
            kind = type(default[0]) if default else str
            return tuple(kind(t) for t in items)
        return text
    except (ValueError, KeyError):
        raise ConfigError(f"{where}: cannot parse {text!r} as {type(default).__name__}") from None


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict[str, object]] = field(
        default_factory=lambda: {s: dict(kv) for s, kv in DEFAULTS.items()})

    def __getitem__(self, section: str) -> dict[str, object]:
        return self.values[section]

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS or key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key [{section}] {key}")
        default = DEFAULTS[section][key]
        if isinstance(value, str) and not isinstance(default, str):
            value = _parse_value(value, default, f"[{section}] {key}")
        self.values[section][key] = value

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise ConfigError(f"malformed config {path}: {exc}") from exc
        cfg = cls()
        for section in parser.sections():
            if section not in DEFAULTS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for key, text in parser.items(section):
                cfg.set(section, key, text)
        cfg.validate()
        return cfg

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        for section, kv in self.values.items():
            parser[section] = {k: _format_value(v) for k, v in kv.items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def validate(self) -> None:
        for m in self["filters"]["methods"]:
            FilterSpec.parse(m)
        lo, hi = self["grid"]["delta_range"]
        if not 0 < lo <= hi:
            raise ConfigError("[grid] delta_range must satisfy 0 < lo <= hi")
        if any(not 0 <= r < 1 for r in self["grid"]["ratios"]):
            raise ConfigError("[grid] ratios must lie in [0, 1)")

    def hash(self) -> str:
        content = {s: {k: v for k, v in kv.items() if (s, k) not in _UNHASHED}
                   for s, kv in self.values.items()}
        return hashlib.sha256(json.dumps(content, sort_keys=True, default=list).encode()
                              ).hexdigest()[:16]

    # -- typed views ---------------------------------------------------------
    @property
    def seed(self) -> int:
        return int(self["run"]["seed"])

    @property
    def out(self) -> Path:
        return Path(self["run"]["out"])

    def universe_config(self, profiles=None) -> UniverseConfig:
        u = self["universe"]
        return UniverseConfig(n_reference=u["n_reference"], n_hc=u["n_hc"],
                              n_per_profile=u["n_per_profile"],
                              profiles=tuple(profiles or u["profiles"]),
                              noise_scale=u["noise_scale"], augment_factor=u["augment_factor"],
                              seed=self.seed)

    def network_config(self, input_dim: int, seed: int | None = None) -> NetworkConfig:
        m = self["mlp"]
        return NetworkConfig(input_dim=input_dim, hidden=m["hidden"],
                             dropout_rate=m["dropout_rate"], batch_size=m["batch_size"],
                             hc_penalty_weight=m["hc_penalty_weight"],
                             learning_rate=m["learning_rate"], adam_betas=m["adam_betas"],
                             adam_epsilon=m["adam_epsilon"], max_epochs=m["max_epochs"],
                             early_stop_patience=m["early_stop_patience"],
                             seed=self.seed if seed is None else seed)

    def filter_specs(self) -> list[FilterSpec]:
        return [FilterSpec.parse(m) for m in self["filters"]["methods"]]
