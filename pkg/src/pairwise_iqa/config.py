"""Run configuration: one TOML file with a section per module.

Unset optional values are simply absent from the file.  Lists come back as
tuples so a load of a dump compares equal to the original.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .dataset import DesignConfig
from .net import NetConfig
from .train import TrainConfig


@dataclass
class PathsConfig:
    out: str = "run"
    images: str = "images"
    plans: str = "plans"
    responses: str = "responses"
    checkpoints: str = "checkpoints"
    reports: str = "reports"

    def resolve(self, name: str) -> Path:
        """Relative paths live under ``out``."""
        p = Path(getattr(self, name))
        return p if p.is_absolute() or name == "out" else Path(self.out) / p


@dataclass
class EvalConfig:
    patches: int = 64
    seed: int = 0


@dataclass
class RunConfig:
    seed: int = 0
    threads: int = 1
    paths: PathsConfig = field(default_factory=PathsConfig)
    design: DesignConfig = field(default_factory=DesignConfig)
    net: NetConfig = field(default_factory=NetConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"seed": self.seed, "threads": self.threads}
        for f in fields(self):
            v = getattr(self, f.name)
            if is_dataclass(v):
                out[f.name] = {k.name: _plain(getattr(v, k.name)) for k in fields(v)
                               if getattr(v, k.name) is not None}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for f in fields(cls):
            if f.name not in d:
                continue
            if f.name in ("seed", "threads"):
                kw[f.name] = int(d[f.name])
            else:
                kw[f.name] = _section(f.default_factory, f.name, d[f.name])  # type: ignore[misc]
        return cls(**kw)

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        with open(path, "rb") as fh:
            return cls.from_dict(tomllib.load(fh))


def _plain(v):
    return list(v) if isinstance(v, tuple) else v


def _section(factory, name: str, values: dict):
    proto = factory()
    names = {f.name for f in fields(proto)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(f"config [{name}]: unknown keys {sorted(unknown)}")
    kw = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    return type(proto)(**{**{f.name: getattr(proto, f.name) for f in fields(proto)}, **kw})
