"""INI run configuration.

Every CLI option lives under a ``[section] key``. A run resolves values as
command-line flag > config file > built-in default and writes the resolved
file next to its outputs, so the run can be replayed with ``--config``.
"""

from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Optional

from .errors import ConfigError
from .rng import RNG_NAME

DEFAULTS: dict[str, dict[str, str]] = {
    "run": {"seed": "0", "rng": RNG_NAME},
    "dvf-synth": {
        "category": "single",
        "stage": "4",
        "frequency_class": "highest",
        "dims": "64,64,64",
        "spacing": "1,1,1",
        "theta": "",
    },
    "intensity-model": {
        "sigma_n": "5.0",
        "chain_sigma_n": "3.0",
        "sponge": "false",
        "deform_sigma_n": "0",
        "noise_seed": "",
    },
    "pair-factory": {"stage": "4", "workers": "1", "patch_size": "", "patches_per_pair": "", "source_id": ""},
    "pipeline": {"stages": "4,2,1", "predictor": "identity"},
    "metrics-loss": {"gamma": "0.05", "index_coords": "false", "hist_bins": "100", "hist_range": "0,2"},
    "io-cli": {
        "input": "",
        "mask": "",
        "field": "",
        "first": "",
        "second": "",
        "fixed": "",
        "moving": "",
        "truth": "",
        "pred": "",
        "landmarks_fixed": "",
        "landmarks_moving": "",
        "out": "",
        "out_dir": "",
        "hist_csv": "",
        "plot": "",
        "grad_out": "",
    },
}

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off", ""}


class RunConfig:
    def __init__(self, values: Optional[dict[str, dict[str, str]]] = None):
        self._values = {sec: dict(keys) for sec, keys in DEFAULTS.items()}
        for sec, keys in (values or {}).items():
            for key, val in keys.items():
                self.set(sec, key, val)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        try:
            parser.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}".replace("\n", " ")) from exc
        return cls({sec: dict(parser[sec]) for sec in parser.sections()})

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        return cls.from_text(Path(path).read_text(), str(path))

    def set(self, section: str, key: str, value) -> None:
        if section not in DEFAULTS:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in DEFAULTS[section]:
            raise ConfigError(f"unknown config key {key!r} in [{section}]")
        value = "" if value is None else str(value)
        if section == "run" and key == "rng" and value != RNG_NAME:
            raise ConfigError(f"unsupported rng {value!r}; only {RNG_NAME} is available")
        self._values[section][key] = value

    def get(self, section: str, key: str) -> str:
        return self._values[section][key]

    def get_int(self, section: str, key: str) -> Optional[int]:
        v = self.get(section, key)
        try:
            return int(v) if v != "" else None
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be an integer, got {v!r}") from None

    def get_float(self, section: str, key: str) -> Optional[float]:
        v = self.get(section, key)
        try:
            return float(v) if v != "" else None
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a number, got {v!r}") from None

    def get_bool(self, section: str, key: str) -> bool:
        v = self.get(section, key).strip().lower()
        if v in _TRUE:
            return True
        if v in _FALSE:
            return False
        raise ConfigError(f"[{section}] {key} must be a boolean, got {v!r}")

    def get_list(self, section: str, key: str, cast=float) -> Optional[list]:
        v = self.get(section, key)
        if v == "":
            return None
        try:
            return [cast(x) for x in v.replace("x", ",").replace(" ", ",").split(",") if x]
        except ValueError:
            raise ConfigError(f"[{section}] {key} must be a comma-separated list, got {v!r}") from None

    def to_text(self) -> str:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str
        for sec, keys in self._values.items():
            parser[sec] = keys
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_text())
        return path
