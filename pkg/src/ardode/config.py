"""INI-style experiment configs.

Sections ``[data]``, ``[train]``, ``[encoder]``, ``[reidentify]`` and
``[evaluate]`` hold flat ``key = value`` pairs whose keys match the fields
of the corresponding dataclass (or generator keyword).  Command-line flags
are applied on top as ``section.key=value`` overrides.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .encoder import EncoderConfig
from .reidentify import ReidOptions
from .vae import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EvalOptions:
    frequencies: tuple[float, ...] = (2.8, 3.0, 3.2, 3.4, 3.6, 3.8, 4.0)
    samples_per_signal: int = 10
    square_omega: float = 1.75
    noise_std: float = 1.0
    sigma_e: float = 0.02
    tau: float = 0.1
    seed: int = 12345
    reidentify: bool = True


@dataclass
class ExperimentConfig:
    data: dict = field(default_factory=lambda: {"generator": "harmonic"})
    train: TrainConfig = field(default_factory=TrainConfig)
    reidentify: ReidOptions = field(default_factory=ReidOptions)
    evaluate: EvalOptions = field(default_factory=EvalOptions)

    def to_dict(self) -> dict:
        return {"data": dict(self.data), "train": self.train.to_dict(),
                "reidentify": dataclasses.asdict(self.reidentify),
                "evaluate": dataclasses.asdict(self.evaluate)}


def _parse_value(text: str) -> Any:
    t = text.strip()
    low = t.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    try:
        return json.loads(t)
    except ValueError:
        pass
    if "," in t:
        parts = [p.strip() for p in t.split(",")]
        try:
            return [float(p) for p in parts]
        except ValueError:
            return t
    return t


def _coerce(cls, key: str, value: Any):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    if key not in fields:
        raise ConfigError(f"unknown key {key!r} for {cls.__name__}; "
                          f"valid keys: {', '.join(sorted(fields))}")
    default = getattr(cls(), key)
    if isinstance(default, bool):
        if isinstance(value, str):
            value = _parse_value(value)
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)):
            value = [value]
        return tuple(float(v) for v in value)
    if isinstance(default, str):
        if isinstance(value, list):
            return ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        return str(value)
    return value


def _update(obj, cls, items: dict):
    changes = {k: _coerce(cls, k, v) for k, v in items.items()}
    return dataclasses.replace(obj, **changes)


def build(sections: dict[str, dict]) -> ExperimentConfig:
    cfg = ExperimentConfig()
    unknown = set(sections) - {"data", "train", "encoder", "reidentify", "evaluate"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    cfg.data.update({k: v for k, v in sections.get("data", {}).items()})
    train_items = dict(sections.get("train", {}))
    enc = _update(EncoderConfig(), EncoderConfig, sections.get("encoder", {}))
    train = _update(TrainConfig(), TrainConfig, train_items)
    cfg.train = dataclasses.replace(train, encoder=enc)
    cfg.reidentify = _update(ReidOptions(), ReidOptions, sections.get("reidentify", {}))
    cfg.evaluate = _update(EvalOptions(), EvalOptions, sections.get("evaluate", {}))
    return cfg


def read_sections(path: str | Path | None) -> dict[str, dict]:
    out: dict[str, dict] = {}
    if path is None:
        return out
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if not parser.read(path):
        raise ConfigError(f"cannot read config file {path}")
    for sec in parser.sections():
        out[sec] = {k: _parse_value(v) for k, v in parser.items(sec)}
    return out


def apply_overrides(sections: dict[str, dict], overrides: list[str]) -> dict[str, dict]:
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        lhs, value = item.split("=", 1)
        sec, key = lhs.split(".", 1)
        sections.setdefault(sec, {})[key] = _parse_value(value)
    return sections


def load(path=None, overrides: list[str] | None = None) -> ExperimentConfig:
    return build(apply_overrides(read_sections(path), overrides or []))


def dump(cfg: ExperimentConfig) -> str:
    """Render back to INI text."""
    d = cfg.to_dict()
    enc = d["train"].pop("encoder")
    lines = []
    for sec, items in [("data", d["data"]), ("train", d["train"]), ("encoder", enc),
                       ("reidentify", d["reidentify"]), ("evaluate", d["evaluate"])]:
        lines.append(f"[{sec}]")
        for k, v in items.items():
            if isinstance(v, (list, tuple)):
                v = ", ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
            lines.append(f"{k} = {v}")
        lines.append("")
    return "\n".join(lines)
