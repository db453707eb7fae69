"""Run configuration: an INI file with strict key checking."""

from __future__ import annotations

import configparser
import io
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, PamOptions, PlacementPlan, parse_placement
from .harness.data import CorruptionParams
from .harness.train import TrainConfig


class ConfigError(ValueError):
    """Carries every problem found, not just the first."""

    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class DataConfig:
    seed: int = 1000
    n_identities: int = 20
    n_per_identity: int = 50
    yaw_law: str = "frontal-skewed"
    eval_seed: int = 5000
    eval_identities: int = 60
    eval_per_identity: int = 10
    eval_yaw_law: str = "uniform"
    pair_seed: int = 0

    def __post_init__(self):
        if min(self.n_identities, self.n_per_identity, self.eval_identities, self.eval_per_identity) < 1:
            raise ValueError("DataConfig: counts must be positive")
        for law in (self.yaw_law, self.eval_yaw_law):
            if law not in ("uniform", "frontal-skewed"):
                raise ValueError(f"DataConfig: unknown yaw law {law!r}")


@dataclass(frozen=True)
class ModelConfig:
    plan: str = "PAM12"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        parse_placement(self.plan)
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"ModelConfig: dtype must be float32 or float64, not {self.dtype!r}")

    @property
    def placement(self) -> PlacementPlan:
        return parse_placement(self.plan)

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)


@dataclass(frozen=True)
class OutputConfig:
    dir: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.toy)
    model: ModelConfig = field(default_factory=ModelConfig)
    pam: PamOptions = field(default_factory=PamOptions)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    output: OutputConfig = field(default_factory=OutputConfig)


_SECTIONS = {f.name: f.default_factory for f in fields(RunConfig)}


def _parse_value(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool):
        low = raw.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if isinstance(default, tuple):
        return tuple(int(v) for v in raw.replace(",", " ").split()) if raw else ()
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(text: str) -> RunConfig:
    """Parse config text; unknown sections or keys and invalid values are all reported."""
    cp = configparser.ConfigParser(interpolation=None, default_section="__none__")
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError([f"syntax: {exc}"]) from exc

    problems = []
    for sec in cp.sections():
        if sec not in _SECTIONS:
            problems.append(f"unknown section [{sec}]")

    built = {}
    for sec, factory in _SECTIONS.items():
        defaults = factory()
        names = {f.name for f in fields(defaults)}
        kwargs = {}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                if key not in names:
                    problems.append(f"[{sec}] unknown key {key!r}")
                    continue
                try:
                    kwargs[key] = _parse_value(raw, getattr(defaults, key))
                except ValueError as exc:
                    problems.append(f"[{sec}] {key}: {exc}")
        try:
            built[sec] = type(defaults)(**{**asdict(defaults), **kwargs})
        except (ValueError, TypeError) as exc:
            problems.append(f"[{sec}] {exc}")

    if not problems:
        opts, bb = built["pam"], built["backbone"]
        for s in sorted(built["model"].placement.stages_with_pam):
            c = bb.stage_channels[s - 1]
            if opts.use_cam and c % opts.reduction:
                problems.append(f"[model] stage {s} has {c} channels, "
                                f"not divisible by CAM reduction {opts.reduction}")
    if problems:
        raise ConfigError(problems)
    return RunConfig(**built)


def read_config(path) -> RunConfig:
    return load_config(Path(path).read_text())


def dump_config(cfg: RunConfig) -> str:
    """INI text that :func:`load_config` maps back to ``cfg``."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for sec in _SECTIONS:
        cp[sec] = {k: _format_value(v) for k, v in asdict(getattr(cfg, sec)).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
