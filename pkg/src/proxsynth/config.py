"""Flat ``key = value`` run configuration shared by every CLI command."""

from __future__ import annotations

from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .fitting import OptimConfig
from .losses import LossWeights
from .nets import NetConfig
from .synth import DataConfig

RESOLVED_NAME = "resolved_config.txt"


class ConfigError(ValueError):
    pass


def _defaults() -> Dict[str, Any]:
    d: Dict[str, Any] = {"seed": 0}
    for f in fields(DataConfig):
        if f.name == "seed":
            continue
        d[f"data.{f.name}"] = getattr(DataConfig(), f.name)
    for f in fields(NetConfig):
        if f.name not in ("n_basis", "basis_seed"):
            d[f"net.{f.name}"] = getattr(NetConfig(), f.name)
    d.update({"train.epochs": 50, "train.batch_size": 32, "train.lr": 1e-4,
              "train.beta1": 0.9, "train.beta2": 0.999, "train.threads": 1})
    for f in fields(LossWeights):
        d[f"loss.{f.name}"] = getattr(LossWeights(), f.name)
    for f in fields(OptimConfig):
        if f.name != "variant":
            d[f"optim.{f.name}"] = getattr(OptimConfig(), f.name)
    d.update({"gen.count": 50, "gen.variant": "raw", "gen.cage_margin": 0.5, "gen.scene": "synth:0",
              "eval.k": 20, "eval.include_translation": False})
    return d


DEFAULTS = _defaults()


def _coerce(key: str, raw: str, like: Any):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, tuple):
            parts = [p for p in raw.replace("(", "").replace(")", "").split(",") if p.strip()]
            kind = type(like[0]) if like else float
            return tuple(kind(p.strip()) for p in parts)
        return raw
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {type(like).__name__}") from exc


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(repr(x) if isinstance(x, float) else str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


class RunConfig:
    def __init__(self, values: Optional[Dict[str, Any]] = None):
        self.values = dict(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value: Any) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(value, str) and not isinstance(DEFAULTS[key], str):
            value = _coerce(key, value, DEFAULTS[key])
        self.values[key] = value

    def __getitem__(self, key: str):
        return self.values[key]

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{n}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            try:
                cfg.set(key, val)
            except ConfigError as exc:
                raise ConfigError(f"{source}:{n}: {exc}") from None
        return cfg

    @classmethod
    def load(cls, path: Union[str, Path, None]) -> "RunConfig":
        if path is None:
            return cls()
        p = Path(path)
        if not p.is_file():
            raise FileNotFoundError(f"config file not found: {p}")
        return cls.parse(p.read_text(), str(p))

    def dumps(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in sorted(self.values.items()))

    def write_resolved(self, out_dir: Union[str, Path]) -> Path:
        p = Path(out_dir) / RESOLVED_NAME
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.dumps())
        return p

    def section(self, prefix: str) -> Dict[str, Any]:
        pre = prefix + "."
        return {k[len(pre):]: v for k, v in self.values.items() if k.startswith(pre)}

    def data_config(self) -> DataConfig:
        return DataConfig(seed=self["seed"], **self.section("data"))

    def net_config(self, n_basis: int, basis_seed: int) -> NetConfig:
        return NetConfig(n_basis=n_basis, basis_seed=basis_seed, **self.section("net"))

    def loss_weights(self) -> LossWeights:
        return LossWeights(**self.section("loss"))

    def optim_config(self, variant: str) -> OptimConfig:
        return OptimConfig(variant=variant, **self.section("optim"))
