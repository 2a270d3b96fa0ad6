"""Run configuration: flat INI sections with typed defaults and ``section.key=value`` overrides."""

from __future__ import annotations

import configparser
from dataclasses import fields
from pathlib import Path
from typing import Iterable, Mapping

from .objective import ConfigError, TrainConfig

# keys that live in their own sections rather than under [train]
_SHARED = {"n_bands": "filter", "kappa": "filter", "schedule": "schedule", "T": "schedule", "seed": "run"}

DEFAULTS: dict[str, dict[str, object]] = {
    "run": {"seed": 0},
    "data": {
        "gamma": 2.0,
        "size": 32,
        "channels": 1,
        "n_train": 512,
        "n_val": 64,
        "style_band": 3,
        "style_factor": 3.0,
        "input": "",  # optional tensor file analysed instead of a synthetic field
    },
    "filter": {"n_bands": 3, "kappa": 0.0},  # kappa 0 picks min(H, W) / 128
    "schedule": {"kind": "linear", "T": 1000},
    "pretrain": {"steps": 3000, "lr": 1e-3, "checkpoint": ""},
    "train": {},
    "sampler": {"steps": 30, "n_samples": 4, "checkpoint": ""},
    "analysis": {"n_seeds": 16, "n_noise_draws": 32, "n_bins": 32},
    "ablate": {
        "bands": (3,),
        "experts": (3,),
        "lambda_f": (0.1,),
        "routing": ("fei_soft",),
        "seeds": (0,),
    },
}

for _f in fields(TrainConfig):
    if _f.name not in _SHARED and _f.name != "stage":
        DEFAULTS["train"][_f.name] = _f.default


class RunConfig:
    """Resolved configuration; ``cfg["train.lr"]`` or ``cfg.section("train")``."""

    def __init__(self, values: Mapping[str, Mapping[str, object]]):
        self._values = {s: dict(v) for s, v in values.items()}

    def __getitem__(self, dotted: str):
        section, key = _split(dotted)
        return self._values[section][key]

    def section(self, name: str) -> dict[str, object]:
        return dict(self._values[name])

    @property
    def seed(self) -> int:
        return int(self._values["run"]["seed"])

    def train_config(self, stage: str = "adapt", **overrides) -> TrainConfig:
        kw = dict(self._values["train"])
        kw.update(stage=stage, n_bands=self["filter.n_bands"], kappa=self["filter.kappa"],
                  schedule=self["schedule.kind"],
                  T=self["schedule.T"], seed=self.seed)
        if stage == "pretrain":
            kw.update(steps=self["pretrain.steps"], lr=self["pretrain.lr"])
        kw.update(overrides)
        cfg = TrainConfig(**kw)
        cfg.validate()
        return cfg

    def to_ini(self) -> str:
        lines = []
        for section, values in self._values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_render(v)}" for k, v in values.items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> Path:
        path = Path(path)
        path.write_text(self.to_ini(), newline="\n")
        return path


def _split(dotted: str) -> tuple[str, str]:
    section, sep, key = dotted.strip().partition(".")
    if not sep or not key:
        raise ConfigError(f"expected section.key, got {dotted!r}")
    return section, key


def _render(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _coerce(default, text: str, where: str):
    text = text.strip()
    try:
        if isinstance(default, tuple):
            items = [s for s in (p.strip() for p in text.split(",")) if s]
            proto = default[0] if default else ""
            return tuple(_coerce(proto, s, where) for s in items)
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {text!r} for {where}") from None
    return text


def _apply(values: dict, dotted: str, text: str) -> None:
    section, key = _split(dotted)
    if section not in DEFAULTS:
        raise ConfigError(f"unknown config section {section!r} (in {dotted!r})")
    if key not in DEFAULTS[section]:
        raise ConfigError(f"unknown config key {dotted!r}")
    values[section][key] = _coerce(DEFAULTS[section][key], text, dotted)


def load_config(path=None, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    """Defaults, then the INI file, then ``section.key=value`` overrides, then ``seed``."""
    values = {s: dict(v) for s, v in DEFAULTS.items()}
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
        parser.optionxform = str  # keys such as T and M are case sensitive
        try:
            parser.read_string(Path(path).read_text(), source=str(path))
        except configparser.Error as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        for section in parser.sections():
            for key, text in parser.items(section):
                _apply(values, f"{section}.{key}", text)
    for item in overrides:
        dotted, sep, text = item.partition("=")
        if not sep:
            raise ConfigError(f"override needs section.key=value, got {item!r}")
        _apply(values, dotted, text)
    if seed is not None:
        values["run"]["seed"] = int(seed)
    return RunConfig(values)
