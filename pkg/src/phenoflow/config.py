"""Flat ``key = value`` pipeline configuration.

Blank lines and ``#`` comments are ignored. Keys starting with ``synth_`` set
the matching :class:`~phenoflow.synth.SynthConfig` field. Unknown keys are
an error. Lists are comma-separated.
"""

import dataclasses
import typing
from dataclasses import dataclass, field, fields
from pathlib import Path

from .synth import SynthConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    work_dir: str = "work"

    # ingest
    events: str = ""
    values: str = ""
    diagnosis_events: str = ""
    code_map: str = ""
    drop_unmapped: bool = False
    strict: bool = False
    apply_inclusion: bool = False
    inclusion_thresholds: tuple = ("AST>40", "ALT>55", "ALK_PHOS>150")
    inclusion_codes: tuple = ("571.8", "571.9", "571.5")

    # curves and cross sections
    resolution: float = 52.0
    intensity_iterations: int = 100
    intensity_max_bins: int = 50
    sample_rate: float = 1.0

    # ICA
    ica_rank: int = 10
    ica_tol: float = 1e-4
    ica_max_iter: int = 500
    ica_standardize: bool = False
    report_top: int = 20

    # labeled cohort and forest
    target_codes: tuple = ("155.0", "155.1", "155.2")
    horizon: float = 10.0
    min_data: int = 10
    window_days: float = 30.0
    one_per_record: bool = False
    test_fraction: float = 0.2
    forest_trees: int = 300
    forest_mtry: int = 0
    forest_max_depth: int = 0
    forest_min_leaf: int = 1
    forest_balanced: bool = False

    # stage toggles
    run_forest: bool = True
    run_plots: bool = True

    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        positive = ("resolution", "intensity_iterations", "intensity_max_bins", "sample_rate",
                    "ica_rank", "ica_tol", "ica_max_iter", "report_top", "horizon",
                    "forest_trees", "forest_min_leaf")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        for name in ("forest_mtry", "forest_max_depth", "min_data", "window_days"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if not 0 < self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in (0, 1)")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")
        for spec in self.inclusion_thresholds:
            parse_threshold(spec)

    def lab_thresholds(self):
        return [parse_threshold(s) for s in self.inclusion_thresholds]


def parse_threshold(spec: str):
    """``"AST>40"`` -> ``("AST", ">", 40.0)``."""
    for op in (">=", "<=", ">", "<"):
        if op in spec:
            var, _, bound = spec.partition(op)
            try:
                return var.strip(), op, float(bound)
            except ValueError:
                break
    raise ConfigError(f"bad threshold {spec!r}; expected e.g. AST>40")


_TYPES = typing.get_type_hints(PipelineConfig)
_SYNTH_TYPES = typing.get_type_hints(SynthConfig)


def _convert(key: str, text: str, typ):
    text = text.strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is tuple:
            return tuple(p.strip() for p in text.split(",") if p.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {typ.__name__}") from None


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def from_mapping(items: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    base = base or PipelineConfig()
    top, synth = {}, {}
    for key, raw in items.items():
        if key.startswith("synth_") and key[6:] in _SYNTH_TYPES and key != "synth_seed":
            synth[key[6:]] = raw if not isinstance(raw, str) else _convert(key, raw, _SYNTH_TYPES[key[6:]])
        elif key in _TYPES and key != "synth":
            top[key] = raw if not isinstance(raw, str) else _convert(key, raw, _TYPES[key])
        else:
            raise ConfigError(f"unknown config key {key!r}")
    try:
        synth_cfg = dataclasses.replace(base.synth, **synth)
        return dataclasses.replace(base, synth=synth_cfg, **top)
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def parse_config_text(text: str, base: PipelineConfig | None = None) -> PipelineConfig:
    items = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in items:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        items[key] = value
    return from_mapping(items, base)


def load_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config_text(text, base)


def dump_config(cfg: PipelineConfig) -> str:
    """Fully resolved config in the same flat format."""
    lines = []
    for f in fields(cfg):
        if f.name == "synth":
            continue
        lines.append(f"{f.name} = {_format(getattr(cfg, f.name))}")
    for f in fields(cfg.synth):
        if f.name == "seed":
            continue
        lines.append(f"synth_{f.name} = {_format(getattr(cfg.synth, f.name))}")
    return "\n".join(lines) + "\n"
