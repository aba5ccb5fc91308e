"""Run configuration: YAML schema, validation and a stable config hash.

Schema (top-level keys; exactly one of ``synth`` / ``inputs``)::

    synth:          SynthConfig fields (n_stocks, n_years, seed, group_betas, ...)
    inputs:
      bars:         path to the daily bar CSV
      ownership:    path to the ownership CSV (optional)
      index:        path to a CSV with a stock_id column (optional)
      bar_schema:   {canonical column: column in file} (optional)
      ownership_schema: same, for the ownership file (optional)
      strict:       reject every copy of a duplicate key (default true)
    filters:        min_price, min_obs_per_quarter, winsor_fraction,
                    winsor_scope, tick_filter_enabled, chain
    tick_schedule:  [[upper_bound or null, tick_size], ...]
    estimation:     weighting, hi_category, hi_top_fraction, leave_one_out,
                    exclude_from_hi, controls
    nw_lags:        Newey-West lags for report t-statistics (default 2)
    output_dir:     where artifacts go (default "out")
    reports:        list of report names, or "all" (default)
    max_workers:    estimation threads (default 1)

Relative input paths resolve against the config file's directory.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .analytics import REPORT_NAMES
from .ingest import FilterConfig, TickSchedule
from .pipeline import EstimationConfig
from .synth import SynthConfig

TOP_LEVEL = {"synth", "inputs", "filters", "tick_schedule", "estimation", "nw_lags", "output_dir", "reports", "max_workers"}
INPUT_KEYS = {"bars", "ownership", "index", "bar_schema", "ownership_schema", "strict"}
ESTIMATION_KEYS = {"weighting", "hi_category", "hi_top_fraction", "leave_one_out", "exclude_from_hi", "controls"}


class ConfigError(ValueError):
    """Configuration cannot be parsed or fails validation."""


@dataclass(frozen=True)
class InputPaths:
    bars: Path
    ownership: Path | None = None
    index: Path | None = None
    bar_schema: dict = field(default_factory=dict)
    ownership_schema: dict = field(default_factory=dict)
    strict: bool = True


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig | None = None
    inputs: InputPaths | None = None
    filters: FilterConfig = field(default_factory=FilterConfig)
    schedule: TickSchedule = field(default_factory=TickSchedule)
    weighting: str = "value"
    hi_category: str = "foreign"
    hi_top_fraction: float = 0.1
    leave_one_out: bool = True
    exclude_from_hi: bool = True
    controls: bool = True
    nw_lags: int = 2
    output_dir: Path = Path("out")
    reports: tuple = REPORT_NAMES
    max_workers: int = 1

    def __post_init__(self):
        if (self.synth is None) == (self.inputs is None):
            raise ConfigError("exactly one of 'synth' and 'inputs' must be given")
        if self.nw_lags < 0:
            raise ConfigError("nw_lags must be non-negative")
        if self.max_workers < 1:
            raise ConfigError("max_workers must be >= 1")
        unknown = [r for r in self.reports if r not in REPORT_NAMES]
        if unknown:
            raise ConfigError(f"unknown report name(s) {unknown}; known: {list(REPORT_NAMES)}")

    def estimation(self, **overrides) -> EstimationConfig:
        """Estimation settings, optionally with filter or weighting overrides
        for a robustness run."""
        filt = {k: v for k, v in overrides.items() if k in {f.name for f in fields(FilterConfig)}}
        rest = {k: v for k, v in overrides.items() if k not in filt}
        base = dict(
            filters=FilterConfig(**{**asdict(self.filters), **filt}),
            schedule=self.schedule,
            weighting=self.weighting,
            hi_category=self.hi_category,
            hi_top_fraction=self.hi_top_fraction,
            leave_one_out=self.leave_one_out,
            exclude_from_hi=self.exclude_from_hi,
            controls=self.controls,
            max_workers=self.max_workers,
        )
        base.update(rest)
        return EstimationConfig(**base)

    def semantic_dict(self) -> dict:
        """Fields that can change results. Output location, thread count
        and input file locations are excluded (input contents are digested
        separately)."""
        d = {
            "source": "synth" if self.synth is not None else "inputs",
            "filters": asdict(self.filters),
            "tick_schedule": [[None if math.isinf(b) else b, t] for b, t in self.schedule.bands],
            "estimation": {k: getattr(self, k) for k in sorted(ESTIMATION_KEYS)},
            "nw_lags": self.nw_lags,
            "reports": sorted(self.reports),
        }
        if self.synth is not None:
            d["synth"] = self.synth.to_dict()
        else:
            d["inputs"] = {
                "bar_schema": dict(sorted(self.inputs.bar_schema.items())),
                "ownership_schema": dict(sorted(self.inputs.ownership_schema.items())),
                "strict": self.inputs.strict,
                "has_ownership": self.inputs.ownership is not None,
                "has_index": self.inputs.index is not None,
            }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.semantic_dict(), sort_keys=True, separators=(",", ":"), allow_nan=True)
        return hashlib.sha256(blob.encode()).hexdigest()


def _check_keys(section: str, d, allowed) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ConfigError(f"'{section}' must be a mapping")
    extra = set(d) - set(allowed)
    if extra:
        raise ConfigError(f"unknown key(s) in '{section}': {sorted(extra)}")
    return d


def config_from_dict(raw: dict, base_dir: Path | None = None) -> RunConfig:
    """Build a validated :class:`RunConfig` from a parsed mapping."""
    raw = _check_keys("<top level>", raw, TOP_LEVEL)
    base_dir = Path(base_dir or ".")
    try:
        synth = None
        if raw.get("synth") is not None:
            s = _check_keys("synth", raw["synth"], {f.name for f in fields(SynthConfig)})
            synth = SynthConfig.from_dict(s)
        inputs = None
        if raw.get("inputs") is not None:
            i = _check_keys("inputs", raw["inputs"], INPUT_KEYS)
            if "bars" not in i:
                raise ConfigError("'inputs.bars' is required")

            def resolve(p):
                if p is None:
                    return None
                p = Path(p)
                return p if p.is_absolute() else base_dir / p

            inputs = InputPaths(
                bars=resolve(i["bars"]),
                ownership=resolve(i.get("ownership")),
                index=resolve(i.get("index")),
                bar_schema=dict(i.get("bar_schema") or {}),
                ownership_schema=dict(i.get("ownership_schema") or {}),
                strict=bool(i.get("strict", True)),
            )
        filt = _check_keys("filters", raw.get("filters"), {f.name for f in fields(FilterConfig)})
        filters = FilterConfig(**filt)
        schedule = TickSchedule.from_pairs(raw["tick_schedule"]) if raw.get("tick_schedule") else TickSchedule()
        est = _check_keys("estimation", raw.get("estimation"), ESTIMATION_KEYS)
        reports = raw.get("reports", "all")
        reports = REPORT_NAMES if reports in (None, "all") else tuple(reports)
        cfg = RunConfig(
            synth=synth,
            inputs=inputs,
            filters=filters,
            schedule=schedule,
            nw_lags=int(raw.get("nw_lags", 2)),
            output_dir=Path(raw.get("output_dir", "out")),
            reports=reports,
            max_workers=int(raw.get("max_workers", 1)),
            **est,
        )
        cfg.estimation()  # validates weighting / category / fraction
        return cfg
    except ConfigError:
        raise
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping")
    return config_from_dict(raw, base_dir=path.parent)
