"""Run configuration: INI sections mapped onto dataclasses, unknown keys rejected."""
from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace

from .model import LsConfig, ModelConfig
from .train import TrainConfig


@dataclass(frozen=True)
class SynthConfig:
    regime: str = "HV"
    count: int = 300
    n_min: int = 4
    n_max: int = 32
    seed: int = 0
    max_draws: int = 50
    load_profile: str = "scaled"  # "scaled" | "literal"
    frequency_hz: float = 50.0
    iqr_scope: str = "regime"  # fences computed per regime


@dataclass(frozen=True)
class EvalConfig:
    modes: str = "base,caps,ls,caps_ls"
    all_buses: bool = False
    K: int = 10


@dataclass(frozen=True)
class BenchConfig:
    sizes: str = "64,128,256,512,1024"
    count: int = 256
    warmup: int = 2
    repeat: int = 5
    node_budget: int = 2048  # nodes per micro-batch; sized so working arrays stay in a 2 MiB L2
    workers: int = 0  # 0: environment override or cores - 1


SECTIONS = {
    "model": ModelConfig,
    "line_search": LsConfig,
    "train": TrainConfig,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "bench": BenchConfig,
}


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    line_search: LsConfig = field(default_factory=LsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply ``{"section.key": "value"}`` overrides (values parsed like the file)."""
        grouped: dict[str, dict[str, str]] = {}
        for dotted, value in overrides.items():
            section, _, key = dotted.partition(".")
            if not key:
                raise ValueError(f"override {dotted!r} must look like section.key")
            grouped.setdefault(section, {})[key] = value
        return _apply(self, grouped)


def _parse_value(raw: str, default):
    if isinstance(default, bool):
        lowered = raw.strip().lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw.strip()


def _apply(base: RunConfig, grouped: dict[str, dict[str, str]]) -> RunConfig:
    updates = {}
    for section, values in grouped.items():
        if section not in SECTIONS:
            raise ValueError(f"unknown config section [{section}]; expected one of {sorted(SECTIONS)}")
        current = getattr(base, section)
        known = {f.name: getattr(current, f.name) for f in fields(current)}
        parsed = {}
        for key, raw in values.items():
            if key not in known:
                raise ValueError(f"unknown key {key!r} in section [{section}]")
            try:
                parsed[key] = _parse_value(raw, known[key])
            except ValueError as exc:
                raise ValueError(f"[{section}] {key}: {exc}") from None
        updates[section] = replace(current, **parsed)
    return replace(base, **updates)


def load_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        cfg = _apply(cfg, {s: dict(parser.items(s)) for s in parser.sections()})
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for section in SECTIONS:
        lines.append(f"[{section}]")
        obj = getattr(cfg, section)
        for f in fields(obj):
            lines.append(f"{f.name} = {getattr(obj, f.name)}")
        lines.append("")
    return "\n".join(lines)
