"""Command-line driver: ``liqcomm <command> --config <path> [--out DIR] [--max-workers N]``.

Commands run their prerequisite stages first:

* ``simulate``: write a synthetic panel (synth configs only)
* ``ingest``: load and validate inputs, write the rejection and filter reports
* ``estimate``: ingest, then estimate betas (plus robustness runs)
* ``report``: estimate, then write tables and figure series
* ``all``: every stage

Exit status is 0 when every requested stage and report completed, 1 on a
stage failure and 2 on a configuration error. ``manifest.json`` in the output
directory records the outcome either way.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import pandas as pd

from . import __version__
from .analytics import VARIANT_RUNS, ReportTable, build_reports
from .csvio import write_csv
from .config import ConfigError, RunConfig, load_config
from .ingest import load_daily_bars, load_index_members, load_ownership
from .pipeline import PipelineResult, run_pipeline
from .synth import generate_panel

log = logging.getLogger("liqcomm")

COMMANDS = ("simulate", "ingest", "estimate", "report", "all")
STAGES = {
    "simulate": ("simulate",),
    "ingest": ("simulate", "ingest"),
    "estimate": ("simulate", "ingest", "estimate"),
    "report": ("simulate", "ingest", "estimate", "report"),
    "all": ("simulate", "ingest", "estimate", "report"),
}


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class Manifest:
    command: str
    config: RunConfig
    out: Path
    stages: list = field(default_factory=list)
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    row_counts: dict = field(default_factory=dict)
    status: str = "incomplete"
    error: dict | None = None

    def output(self, name: str, path: Path, rows: int | None = None) -> None:
        rel = str(path.relative_to(self.out))
        self.outputs[rel] = {"sha256": file_digest(path), "rows": rows}

    def input(self, name: str, path: Path, rows: int | None = None) -> None:
        self.inputs[name] = {"path": str(path), "sha256": file_digest(path), "rows": rows}

    def write(self) -> Path:
        path = self.out / "manifest.json"
        body = {
            "version": __version__,
            "command": self.command,
            "status": self.status,
            "config_hash": self.config.config_hash(),
            "config": self.config.semantic_dict(),
            "inputs": self.inputs,
            "outputs": dict(sorted(self.outputs.items())),
            "row_counts": self.row_counts,
            "stages": self.stages,
            "error": self.error,
        }
        path.write_text(json.dumps(body, indent=2, sort_keys=False, allow_nan=True) + "\n")
        return path


@dataclass
class Loaded:
    bars: pd.DataFrame
    ownership: pd.DataFrame | None
    index: frozenset


@dataclass
class Estimated:
    base: PipelineResult
    variants: dict


class Runner:
    def __init__(self, cfg: RunConfig, command: str):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest = Manifest(command, cfg, self.out)
        self.paths = None
        self.loaded = None
        self.estimated = None

    # -- stages ------------------------------------------------------------

    def simulate(self):
        if self.cfg.synth is None:
            return "skipped"
        panel = generate_panel(self.cfg.synth)
        paths = panel.write(self.out / "inputs")
        for name, p in paths.items():
            self.manifest.output(name, p)
        self.paths = {"bars": paths["bars"], "ownership": paths["ownership"], "index": paths["index"]}
        self.schemas = ({}, {}, True)
        return "ok"

    def ingest(self):
        cfg = self.cfg
        if cfg.inputs is not None:
            i = cfg.inputs
            self.paths = {"bars": i.bars, "ownership": i.ownership, "index": i.index}
            bar_schema, own_schema, strict = i.bar_schema, i.ownership_schema, i.strict
        else:
            bar_schema, own_schema, strict = self.schemas
        bars = load_daily_bars(self.paths["bars"], bar_schema, strict=strict)
        self.manifest.input("bars", Path(self.paths["bars"]), bars.n_rows)
        rejects = [bars.rejections.assign(file="bars")]
        own = None
        if self.paths.get("ownership") is not None:
            o = load_ownership(self.paths["ownership"], own_schema, bars=bars.frame, strict=strict)
            self.manifest.input("ownership", Path(self.paths["ownership"]), o.n_rows)
            rejects.append(o.rejections.assign(file="ownership"))
            own = o.frame
        index = frozenset()
        if self.paths.get("index") is not None:
            index = load_index_members(self.paths["index"])
            self.manifest.input("index", Path(self.paths["index"]), len(index))
        rej = pd.concat(rejects, ignore_index=True)[["file", "line", "reason_code", "detail"]]
        p = self.out / "rejections.csv"
        write_csv(rej, p)
        self.manifest.output("rejections", p, len(rej))
        self.manifest.row_counts.update(
            {"bars_loaded": len(bars.frame), "bars_rejected": int(bars.rejections["line"].nunique())}
        )
        if own is not None:
            self.manifest.row_counts["ownership_loaded"] = len(own)
        self.loaded = Loaded(bars.frame, own, index)
        return "ok"

    def _run(self, **overrides) -> PipelineResult:
        d = self.loaded
        return run_pipeline(d.bars, d.ownership, d.index, self.cfg.estimation(**overrides))

    def estimate(self):
        base = self._run()
        panel_dir = self.out / "panel"
        panel_dir.mkdir(exist_ok=True)
        for name, df in (
            ("filter_drops", base.panel.drops),
            ("market", base.market),
            ("betas", base.betas),
        ):
            p = panel_dir / f"{name}.csv"
            write_csv(df, p)
            self.manifest.output(name, p, len(df))
        self.manifest.row_counts.update(
            {
                "firm_days_kept": len(base.panel.days),
                "firm_days_dropped": len(base.panel.drops),
                "firm_quarters": len(base.betas),
                "beta_L_estimated": int(base.betas["beta_L"].notna().sum()),
            }
        )
        variants = {}
        wanted = set(self.cfg.reports)
        for table, runs in VARIANT_RUNS.items():
            if table not in wanted:
                continue
            for panel, overrides in runs.items():
                res = self._run(**overrides)
                variants.setdefault(table, {})[panel] = res.betas
                tag = panel.split(":")[0].strip().lower()
                p = panel_dir / f"betas_{table}_{tag}.csv"
                write_csv(res.betas, p)
                self.manifest.output(f"betas_{table}_{tag}", p, len(res.betas))
        self.estimated = Estimated(base, variants)
        return "ok"

    def report(self):
        e = self.estimated
        reports = build_reports(e.base.betas, e.base.market, e.variants, select=self.cfg.reports, lags=self.cfg.nw_lags)
        missing = [r for r in self.cfg.reports if r not in reports]
        for name, obj in reports.items():
            p = self.out / f"{name}.csv"
            if isinstance(obj, ReportTable):
                obj.to_csv(p)
                txt = self.out / f"{name}.txt"
                txt.write_text(obj.render())
                self.manifest.output(name, p, len(obj.frame))
                self.manifest.output(f"{name}_text", txt)
            else:
                write_csv(obj, p)
                self.manifest.output(name, p, len(obj))
        if missing:
            raise StageError("report", f"reports not produced: {missing}")
        return "ok"

    def run(self) -> int:
        status = 0
        for stage in STAGES[self.manifest.command]:
            t0 = time.perf_counter()
            try:
                result = getattr(self, stage)()
            except Exception as exc:  # any stage failure is reported, not raised
                secs = time.perf_counter() - t0
                self.manifest.stages.append({"name": stage, "status": "failed", "seconds": round(secs, 3)})
                self.manifest.status = "failed"
                self.manifest.error = {"stage": stage, "type": type(exc).__name__, "message": str(exc)}
                log.error("stage %s failed: %s", stage, exc, exc_info=log.isEnabledFor(logging.DEBUG))
                status = 1
                break
            secs = time.perf_counter() - t0
            self.manifest.stages.append({"name": stage, "status": result, "seconds": round(secs, 3)})
            log.info("stage %s %s in %.2fs", stage, result, secs)
        if status == 0:
            self.manifest.status = "complete"
        self.manifest.write()
        if status:
            err = self.manifest.error
            print(json.dumps({"error": err["message"], "stage": err["stage"], "type": err["type"]}), file=sys.stderr)
        return status


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liqcomm", description="Liquidity commonality and ownership pipeline")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="YAML run configuration")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--max-workers", type=int, help="estimation threads (overrides the config)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        changes = {}
        if args.out:
            changes["output_dir"] = Path(args.out)
        if args.max_workers is not None:
            changes["max_workers"] = args.max_workers
        if changes:
            cfg = dataclasses.replace(cfg, **changes)
        if args.command == "simulate" and cfg.synth is None:
            raise ConfigError("'simulate' needs a synth section")
    except ConfigError as exc:
        print(json.dumps({"error": str(exc), "stage": "config"}), file=sys.stderr)
        return 2
    return Runner(cfg, args.command).run()


if __name__ == "__main__":
    sys.exit(main())
