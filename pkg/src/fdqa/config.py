"""Run configuration: nested dataclasses read from ``key = value`` files.

Keys are dotted ``section.field`` names (``model1.backbone = dense``); a bare
``seed`` key is also accepted.  Unknown keys and malformed values are errors.
Lines starting with ``#`` are comments, as is anything after whitespace + ``#``.
"""

from __future__ import annotations

import dataclasses
import os
import re
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .backbones import BUILDERS, ConfigError


@dataclass
class DataSection:
    dir: str = ""  # dataset root holding manifest.csv; default <out>/data
    manifest: str = ""  # explicit manifest path (overrides dir/manifest.csv)
    resolution: int = 64


@dataclass
class SynthSection:
    train_per_class: int = 300
    test_per_class: int = 100
    missing_structure_rate: float = 0.3


@dataclass
class StageSection:
    backbone: str = "dense"
    threshold: float = 0.5


@dataclass
class TrainSection:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    stage1_usable: str = "exclude"
    freeze_prefix: str = ""  # comma-separated parameter-name prefixes
    workers: int = 1
    flat: bool = True


@dataclass
class FlatSection:
    backbone: str = "dense"


@dataclass
class EvalSection:
    predictions: str = ""  # score an existing predictions CSV instead of the models
    workers: int = 1


@dataclass
class ScenarioSection:
    candidates: str = ""  # CSV of candidate matrices (counts, or percentages with totals)
    totals: str = ""  # per-class totals "n_good,n_usable,n_unusable" for percentage rows
    grid: str = "0.3,0.4,0.5,0.6,0.7"
    band_lo: float = 0.0
    band_hi: float = 1.0
    targets: str = "unusable,usable"


@dataclass
class ExplainSection:
    alpha: float = 0.5
    floor: float = 0.15
    format: str = "png"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: DataSection = field(default_factory=DataSection)
    synth: SynthSection = field(default_factory=SynthSection)
    model1: StageSection = field(default_factory=lambda: StageSection("dense"))
    model2: StageSection = field(default_factory=lambda: StageSection("dense"))
    model3: StageSection = field(default_factory=lambda: StageSection("eff"))
    train: TrainSection = field(default_factory=TrainSection)
    flat: FlatSection = field(default_factory=FlatSection)
    eval: EvalSection = field(default_factory=EvalSection)
    scenario: ScenarioSection = field(default_factory=ScenarioSection)
    explain: ExplainSection = field(default_factory=ExplainSection)

    @property
    def stages(self) -> tuple[StageSection, StageSection, StageSection]:
        return (self.model1, self.model2, self.model3)

    def out_dir(self) -> Path:
        return Path(self.out)

    def data_dir(self) -> Path:
        return Path(self.data.dir) if self.data.dir else self.out_dir() / "data"

    def manifest_path(self) -> Path:
        return Path(self.data.manifest) if self.data.manifest else self.data_dir() / "manifest.csv"

    def validate(self) -> "RunConfig":
        for i, st in enumerate(self.stages, 1):
            if st.backbone not in BUILDERS:
                raise ConfigError(f"model{i}.backbone must be one of {sorted(BUILDERS)}, got {st.backbone!r}")
            if not 0.0 < st.threshold < 1.0:
                raise ConfigError(f"model{i}.threshold must lie strictly in (0, 1)")
        if self.flat.backbone not in BUILDERS:
            raise ConfigError(f"flat.backbone must be one of {sorted(BUILDERS)}")
        if self.data.resolution < 8:
            raise ConfigError("data.resolution must be >= 8")
        t = self.train
        if t.epochs < 0 or t.batch_size < 1 or t.lr <= 0 or t.workers < 1:
            raise ConfigError("train.epochs >= 0, train.batch_size >= 1, train.lr > 0, train.workers >= 1 required")
        if t.stage1_usable not in ("exclude", "positive", "negative"):
            raise ConfigError("train.stage1_usable must be exclude, positive or negative")
        if self.synth.train_per_class < 0 or self.synth.test_per_class < 0:
            raise ConfigError("synth counts must be >= 0")
        if not 0 <= self.explain.alpha <= 1 or not 0 <= self.explain.floor < 1:
            raise ConfigError("explain.alpha must lie in [0, 1] and explain.floor in [0, 1)")
        if self.explain.format not in ("png", "ppm"):
            raise ConfigError("explain.format must be png or ppm")
        if self.scenario.band_lo > self.scenario.band_hi:
            raise ConfigError("scenario.band_lo must not exceed scenario.band_hi")
        return self


def _convert(key: str, text: str, typ):
    try:
        if typ is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError
        return typ(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _hints(obj) -> dict:
    return typing.get_type_hints(type(obj))


def set_key(cfg: RunConfig, key: str, text: str) -> None:
    """Assign one dotted key from its textual value."""
    parts = key.split(".")
    target = cfg
    for part in parts[:-1]:
        if not dataclasses.is_dataclass(target) or part not in _hints(target):
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(target, part)
    name = parts[-1]
    hints = _hints(target) if dataclasses.is_dataclass(target) else {}
    typ = hints.get(name)
    if typ is None or dataclasses.is_dataclass(typ):
        raise ConfigError(f"unknown config key {key!r}")
    setattr(target, name, _convert(key, text, typ))


_TRAILING_COMMENT = re.compile(r"\s#")  # ' # note' after a value; '#' inside a value is kept


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cfg = RunConfig()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        value = _TRAILING_COMMENT.split(value, 1)[0]
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        try:
            set_key(cfg, key.strip(), value.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), str(p))


def dump_config(cfg: RunConfig) -> str:
    """Canonical ``key = value`` text (round-trips through :func:`parse_config`)."""
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if dataclasses.is_dataclass(v):
                walk(v, prefix + f.name + ".")
            else:
                lines.append(f"{prefix}{f.name} = {str(v).lower() if isinstance(v, bool) else v}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"
