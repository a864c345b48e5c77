"""Command-line front end: ``hfretail <stage> [options]``.

Stages write into ``<workdir>/<run-id>``, where the run id is a digest of
the configuration and input files. ``manifest.json`` in the run directory
records the configuration, input and output digests, cutoffs, the filter
ledger and stage timings. Re-running a stage whose inputs are unchanged is a
no-op; a stage refuses to run when an input file no longer matches the digest
recorded by the stage that produced it.

Exit codes: 0 success, 1 data or numerical failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np
import pandas as pd

from . import behaviors, regression
from .config import ALLOWED_DELAYS, Config, ConfigError
from .grouping import GROUP_DESCRIPTIONS, GROUP_LABELS, GroupCutoffs, assign_groups
from .ingest import (
    EmptyPanelError,
    apply_filters,
    adjust_timestamps,
    read_aliases,
    read_exclusions,
    read_metadata,
    read_snapshots,
    read_ticks,
)
from .panel import build_panel, load_frame, save_frame, summary_stats
from .pipeline import adjust_store_splits, attach_attributes, market_series, run_daily_stage
from .standardize import standardize_panel
from .ticks import TickStore
from .volatility import ConvergenceError

logger = logging.getLogger("hfretail")

SUBGROUP_CHOICES = ("none", "kind", "covid", "size", "sector")
DEPENDENT_CHOICES = {"dn": "delta_n", "dn_detrended": "delta_n_detrended"}
INPUT_NAMES = ("snapshots", "ticks", "metadata", "splits", "market_caps")


class StageError(RuntimeError):
    """A stage cannot run (missing or stale inputs)."""


def toolkit_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


def sha256_file(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def _dump_json(data, path: Path) -> None:
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Run directory and manifest
# --------------------------------------------------------------------------


class Run:
    def __init__(self, directory: Path):
        self.dir = Path(directory)
        self.manifest_path = self.dir / "manifest.json"
        self.manifest = json.loads(self.manifest_path.read_text()) if self.manifest_path.exists() else {}

    @property
    def config(self) -> Config:
        return Config.from_text(self.manifest["config"])

    def path(self, name: str) -> Path:
        return self.dir / name

    def save(self) -> None:
        self.manifest["version"] = toolkit_version()
        _dump_json(self.manifest, self.manifest_path)

    def stage(self, name: str) -> dict | None:
        return self.manifest.get("stages", {}).get(name)

    def recorded_digest(self, filename: str) -> str | None:
        for stage in self.manifest.get("stages", {}).values():
            if filename in stage.get("outputs", {}):
                return stage["outputs"][filename]
        return None

    def require(self, filenames) -> dict[str, str]:
        """Digests of required inputs, checked against the producing stage's record."""
        out = {}
        for name in filenames:
            path = self.path(name)
            recorded = self.recorded_digest(name)
            if recorded is None or not path.exists():
                raise StageError(f"missing input {name}; run the stage that produces it first")
            actual = sha256_file(path)
            if actual != recorded:
                raise StageError(
                    f"stale input {name}: digest {actual[:12]} differs from the recorded "
                    f"{recorded[:12]}; the file changed after it was produced. Re-run the producing stage."
                )
            out[name] = actual
        return out

    def up_to_date(self, name: str, inputs: dict[str, str]) -> bool:
        stage = self.stage(name)
        if not stage or stage.get("inputs") != inputs:
            return False
        for fname, digest in stage.get("outputs", {}).items():
            path = self.path(fname)
            if not path.exists() or sha256_file(path) != digest:
                return False
        return True

    def record(self, name: str, inputs: dict[str, str], outputs, seconds: float, **extra) -> None:
        stages = self.manifest.setdefault("stages", {})
        stages[name] = {
            "inputs": inputs,
            "outputs": {o: sha256_file(self.path(o)) for o in outputs},
            "seconds": round(seconds, 3),
            **extra,
        }
        self.save()


def run_id(config: Config, input_digests: dict[str, str]) -> str:
    text = config.replace(workers=1).to_text()
    payload = text + json.dumps(input_digests, sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _workdir(args) -> Path:
    return Path(args.workdir)


def _pointer(workdir: Path, name: str) -> Path:
    return workdir / f"{name}.txt"


def _write_pointer(workdir: Path, name: str, target: Path) -> None:
    """Store ``target`` relative to the workdir when it lies inside it."""
    target = target.resolve()
    try:
        text = str(target.relative_to(workdir.resolve()))
    except ValueError:
        text = str(target)
    _pointer(workdir, name).write_text(text + "\n")


def _read_pointer(workdir: Path, name: str) -> Path | None:
    pointer = _pointer(workdir, name)
    if not pointer.exists():
        return None
    return workdir / pointer.read_text().strip()


def _resolve_run(args, delay: int | None = None) -> Run:
    if getattr(args, "run", None):
        return Run(Path(args.run))
    workdir = _workdir(args)
    name = f"latest-run-{delay}" if delay is not None else "latest-run"
    target = _read_pointer(workdir, name)
    if target is None:
        hint = f" with delay {delay}" if delay is not None else ""
        raise StageError(f"no ingested run{hint} under {workdir}; run `ingest` first")
    return Run(target)


def _load_config(args) -> Config:
    config = Config.from_file(args.config) if args.config else Config()
    workers = args.workers or int(os.environ.get("HFRETAIL_WORKERS", "0") or 0) or config.workers
    return config.replace(workers=workers)


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .synth import DgpConfig, generate, write_files

    cfg = DgpConfig(
        n_stocks=args.n_stocks,
        n_days=args.n_days,
        seed=args.seed,
        tick_seconds=args.tick_seconds,
        decoys=args.decoys,
    )
    out = Path(args.out) if args.out else _workdir(args) / f"synth-seed{args.seed}"
    data = generate(cfg)
    paths = write_files(data, out)
    config_path = out / "config.txt"
    config_path.write_text(cfg.pipeline_config().to_text())
    _workdir(args).mkdir(parents=True, exist_ok=True)
    _write_pointer(_workdir(args), "latest-inputs", out)
    print(f"synthetic data written to {out} ({len(data.snapshots)} snapshots, {data.ticks.n_ticks} ticks)")
    print(f"pipeline configuration: {config_path}")
    return 0


def _input_paths(args) -> dict[str, Path]:
    base = args.input_dir
    if base is None and not args.snapshots:
        base = _read_pointer(_workdir(args), "latest-inputs")
    paths = {}
    defaults = {
        "snapshots": "snapshots.csv",
        "ticks": "ticks.csv",
        "metadata": "metadata.csv",
        "splits": "splits.csv",
        "market_caps": "market_caps.csv",
    }
    for name in INPUT_NAMES:
        given = getattr(args, name)
        if given:
            paths[name] = Path(given)
        elif base is not None and (Path(base) / defaults[name]).exists():
            paths[name] = Path(base) / defaults[name]
    for name in ("snapshots", "ticks", "metadata"):
        if name not in paths:
            raise ConfigError(f"missing --{name.replace('_', '-')} (or --input-dir)")
    if args.config is None and base is not None and (Path(base) / "config.txt").exists():
        args.config = str(Path(base) / "config.txt")
    return paths


def cmd_ingest(args) -> int:
    paths = _input_paths(args)
    config = _load_config(args)
    if args.delay is not None:
        config = config.replace(delay_minutes=args.delay)
    digests = {name: sha256_file(p) for name, p in sorted(paths.items())}
    for extra in ("exclusion_list", "alias_table"):
        value = getattr(config, extra)
        if value:
            digests[extra] = sha256_file(value)
    run = Run(_workdir(args) / run_id(config, digests))
    run.dir.mkdir(parents=True, exist_ok=True)
    _write_pointer(_workdir(args), "latest-run", run.dir)
    _write_pointer(_workdir(args), f"latest-run-{config.delay_minutes}", run.dir)
    if run.up_to_date("ingest", digests):
        print(f"ingest: up to date ({run.dir})")
        return 0
    run.manifest.update(
        {
            "config": config.to_text(),
            "inputs": {name: {"path": str(p), "sha256": digests[name]} for name, p in paths.items()},
        }
    )
    t0 = time.perf_counter()
    snaps, rejected = read_snapshots(paths["snapshots"])
    meta = read_metadata(paths["metadata"], paths.get("splits"), paths.get("market_caps"))
    ticks_frame = read_ticks(paths["ticks"], venues=config.venues)
    ticks = adjust_store_splits(TickStore.from_frame(ticks_frame), meta.splits)
    del ticks_frame
    exclusions = read_exclusions(config.exclusion_list) if config.exclusion_list else None
    aliases = read_aliases(config.alias_table) if config.alias_table else None
    snaps = adjust_timestamps(snaps, config.delay_minutes)
    try:
        clean, ledger = apply_filters(
            snaps, ticks, meta, config, exclusions=exclusions, aliases=aliases, rejected_records=rejected
        )
    except EmptyPanelError as exc:
        run.manifest["ledger_failure"] = str(exc)
        run.save()
        raise
    save_frame(clean, run.path("clean.parquet"))
    kept = sorted(set(clean["ticker"]) | {config.market_ticker})
    save_frame(ticks.subset(kept).to_frame(), run.path("ticks.parquet"))
    ledger.write(run.path("ledger.csv"))
    meta.info.to_csv(run.path("metadata.csv"), index=False)
    caps = meta.market_caps.assign(date=pd.to_datetime(meta.market_caps["date"]).dt.strftime("%Y-%m-%d"))
    caps.to_csv(run.path("market_caps.csv"), index=False, float_format="%.10g")
    run.manifest["ledger"] = ledger.to_frame().to_dict(orient="records")
    run.manifest["rejected_records"] = rejected
    run.record(
        "ingest",
        digests,
        ["clean.parquet", "ticks.parquet", "ledger.csv", "metadata.csv", "market_caps.csv"],
        time.perf_counter() - t0,
    )
    print(ledger.to_frame().to_string(index=False))
    print(f"run directory: {run.dir}")
    return 0


def _load_ticks(run: Run) -> TickStore:
    return TickStore.from_frame(load_frame(run.path("ticks.parquet")))


def _load_meta(run: Run):
    from .ingest import SecurityMeta

    info = pd.read_csv(run.path("metadata.csv"), dtype={"ticker": str, "sector": str})
    caps = pd.read_csv(run.path("market_caps.csv"), dtype={"ticker": str}, parse_dates=["date"])
    return SecurityMeta(info=info, splits=pd.DataFrame({"ticker": [], "date": [], "ratio": []}), market_caps=caps)


def cmd_panel(args) -> int:
    run = _resolve_run(args, args.delay)
    inputs = run.require(["clean.parquet", "ticks.parquet"])
    if run.up_to_date("panel", inputs):
        print(f"panel: up to date ({run.dir})")
        return 0
    config = run.config.replace(workers=_load_config(args).workers)
    t0 = time.perf_counter()
    clean = load_frame(run.path("clean.parquet"))
    m_times, m_prices = market_series(_load_ticks(run), config)
    panel, drops = build_panel(clean, m_times, m_prices, config)
    save_frame(panel, run.path("panel.parquet"))
    table = pd.concat(
        [
            summary_stats(panel, "delta_n", 1e4).assign(variable="delta_n_bps"),
            summary_stats(panel, "raw_return", 1e4).assign(variable="raw_return_bps"),
        ],
        ignore_index=True,
    )
    table.to_csv(run.path("table_summary.csv"), index=False, float_format="%.6f")
    run.record("panel", inputs, ["panel.parquet", "table_summary.csv"], time.perf_counter() - t0, drops=drops)
    print(table.to_string(index=False))
    return 0


def _cutoff_table(std_returns, cutoffs: GroupCutoffs) -> pd.DataFrame:
    groups = assign_groups(np.asarray(std_returns), cutoffs)
    counts = np.bincount(groups, minlength=6)
    edges = [-np.inf, cutoffs.q5, cutoffs.q25, 0.0, cutoffs.q75, cutoffs.q95, np.inf]
    return pd.DataFrame(
        {
            "group": GROUP_LABELS,
            "description": GROUP_DESCRIPTIONS,
            "lower": edges[:-1],
            "upper": edges[1:],
            "n_obs": counts,
            "share": counts / counts.sum(),
        }
    )


def cmd_vol(args) -> int:
    from .grouping import compute_cutoffs

    run = _resolve_run(args, args.delay)
    inputs = run.require(["clean.parquet", "ticks.parquet", "panel.parquet", "metadata.csv", "market_caps.csv"])
    if run.up_to_date("vol", inputs):
        print(f"vol: up to date ({run.dir})")
        return 0
    config = run.config.replace(workers=_load_config(args).workers)
    t0 = time.perf_counter()
    ticks = _load_ticks(run)
    clean = load_frame(run.path("clean.parquet"))
    panel = load_frame(run.path("panel.parquet"))
    m_times, m_prices = market_series(ticks, config)
    result = standardize_panel(panel, ticks, m_times, m_prices, clean, config)
    std_panel = attach_attributes(result.panel, _load_meta(run))
    cutoffs = compute_cutoffs(std_panel["std_return"])
    save_frame(std_panel, run.path("panel_std.parquet"))
    result.estimates.assign(day=result.estimates["day"].dt.strftime("%Y-%m-%d")).to_csv(
        run.path("vol_estimates.csv"), index=False, float_format="%.10g"
    )
    _cutoff_table(std_panel["std_return"], cutoffs).to_csv(run.path("table_cutoffs.csv"), index=False, float_format="%.6f")
    run.manifest["cutoffs"] = cutoffs.to_dict()
    run.record(
        "vol",
        inputs,
        ["panel_std.parquet", "vol_estimates.csv", "table_cutoffs.csv"],
        time.perf_counter() - t0,
        excluded=result.excluded,
        dropped_inestimable=result.n_dropped_inestimable,
    )
    print(f"cutoffs: {cutoffs.to_dict()}; excluded stocks: {len(result.excluded)}")
    return 0


def cmd_daily(args) -> int:
    run = _resolve_run(args, args.delay)
    inputs = run.require(["clean.parquet", "ticks.parquet", "metadata.csv", "market_caps.csv"])
    if run.up_to_date("daily", inputs):
        print(f"daily: up to date ({run.dir})")
        return 0
    config = run.config.replace(workers=_load_config(args).workers)
    t0 = time.perf_counter()
    clean = load_frame(run.path("clean.parquet"))
    vol, cutoffs = run_daily_stage(clean, _load_ticks(run), _load_meta(run), config)
    save_frame(vol.panel, run.path("daily_std.parquet"))
    _cutoff_table(vol.panel["std_return"], cutoffs).to_csv(
        run.path("table_cutoffs_daily.csv"), index=False, float_format="%.6f"
    )
    run.manifest["cutoffs_daily"] = cutoffs.to_dict()
    run.record(
        "daily",
        inputs,
        ["daily_std.parquet", "table_cutoffs_daily.csv"],
        time.perf_counter() - t0,
        excluded=vol.excluded,
    )
    print(f"daily cutoffs: {cutoffs.to_dict()}; rows: {len(vol.panel)}")
    return 0


def _suite_name(frequency, dependent, subgroup) -> str:
    return f"{frequency}_{dependent}_{subgroup}"


def cmd_regress(args) -> int:
    run = _resolve_run(args, args.delay)
    config = run.config.replace(workers=_load_config(args).workers)
    if args.delay is not None and args.delay != config.delay_minutes:
        raise ConfigError(f"--delay {args.delay} does not match the run's delay {config.delay_minutes}")
    dependent = DEPENDENT_CHOICES[args.dependent]
    source = "panel_std.parquet" if args.frequency == "hf" else "daily_std.parquet"
    cut_key = "cutoffs" if args.frequency == "hf" else "cutoffs_daily"
    inputs = run.require([source])
    name = _suite_name(args.frequency, args.dependent, args.subgroup)
    stage = f"regress_{name}"
    if run.up_to_date(stage, inputs):
        print(f"regress: up to date ({run.dir})")
        return 0
    t0 = time.perf_counter()
    panel = load_frame(run.path(source))
    cutoffs = GroupCutoffs(**run.manifest[cut_key])
    data = regression.build_lag_data(
        panel, cutoffs, subgroup=args.subgroup, dependent=dependent, frequency=args.frequency, config=config
    )
    fits = regression.run_spec_suite(
        data, subgroup=args.subgroup, small_sample=config.small_sample_correction, workers=config.workers
    )
    table, blob = f"regress_{name}.csv", f"regress_{name}.json"
    regression.write_suite(fits, run.path(table), run.path(blob))
    run.record(
        stage,
        inputs,
        [table, blob],
        time.perf_counter() - t0,
        n_obs=data.n_obs,
        dropped_unlabeled=data.n_dropped_unlabeled,
        levels=list(data.level_names),
    )
    print(regression.suite_table(fits).to_string(index=False))
    return 0


def _load_suite(run: Run, frequency, dependent, subgroup):
    name = _suite_name(frequency, dependent, subgroup)
    blob = f"regress_{name}.json"
    inputs = run.require([blob])
    return name, inputs, regression.read_suite(run.path(blob))


def cmd_behaviors(args) -> int:
    run = _resolve_run(args, args.delay)
    name, inputs, fits = _load_suite(run, args.frequency, args.dependent, args.subgroup)
    stage = f"behaviors_{name}"
    if run.up_to_date(stage, inputs):
        print(f"behaviors: up to date ({run.dir})")
        return 0
    t0 = time.perf_counter()
    levels = run.stage(f"regress_{name}").get("levels", ["all"])
    proxies = behaviors.suite_proxies(fits, None if levels == ["all"] else levels)
    table, blob = f"proxies_{name}.csv", f"proxies_{name}.json"
    behaviors.write_proxies(proxies, run.path(table), run.path(blob))
    outputs = [table, blob]
    if len(levels) > 1:
        fit_map = {behaviors.fit_id(f): f for f in fits}
        mode = "vs_mean" if args.subgroup == "sector" else "pairwise"
        parts = []
        for key in sorted({(p.proxy, -1 if p.lag is None else p.lag) for p in proxies}):
            same = [p for p in proxies if (p.proxy, -1 if p.lag is None else p.lag) == key]
            parts.append(behaviors.compare_levels(same, fit_map, mode=mode))
        compare = pd.concat(parts, ignore_index=True)
        compare["lag"] = compare["lag"].map(lambda v: "" if pd.isna(v) else int(v))
        cname = f"compare_{name}.csv"
        compare.to_csv(run.path(cname), index=False, float_format="%.10g")
        outputs.append(cname)
    run.record(stage, inputs, outputs, time.perf_counter() - t0)
    print(behaviors.proxy_table(proxies).to_string(index=False))
    return 0


def cmd_report(args) -> int:
    run = _resolve_run(args, args.delay)
    subgroup = {"main": "none", "daily": "none"}.get(args.figure, args.figure)
    frequency = "daily" if args.figure == "daily" else "hf"
    name, inputs, fits = _load_suite(run, frequency, args.dependent, subgroup)
    rows = []
    for fit in fits:
        for label, b, se in zip(fit.labels, fit.beta, fit.std_errors):
            if ":" in label:
                level, group = label.split(":", 1)
            elif label in GROUP_LABELS:
                level, group = "all", label
            else:
                continue
            rows.append({"level": level, "group": group, "lag": fit.spec.lag, "bps": b * 1e4, "se_bps": se * 1e4})
    long = pd.DataFrame(rows)
    by_group = long.rename(columns={"group": "x", "lag": "series"})[["level", "x", "series", "bps", "se_bps"]]
    by_lag = long.rename(columns={"lag": "x", "group": "series"})[["level", "x", "series", "bps", "se_bps"]]
    by_lag = by_lag.sort_values(["level", "series", "x"], kind="stable")
    f1, f2 = f"figure_{args.figure}_by_group.csv", f"figure_{args.figure}_by_lag.csv"
    by_group.to_csv(run.path(f1), index=False, float_format="%.10g")
    by_lag.to_csv(run.path(f2), index=False, float_format="%.10g")
    run.record(f"report_{args.figure}_{args.dependent}", inputs, [f1, f2], 0.0)
    print(f"wrote {run.path(f1)} and {run.path(f2)}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hfretail", description=__doc__.splitlines()[0])
    parser.add_argument("--workdir", default=os.environ.get("HFRETAIL_WORKDIR", "runs"))
    parser.add_argument("--config", default=None, help="key = value configuration file")
    parser.add_argument("--workers", type=int, default=None, help="worker threads (env HFRETAIL_WORKERS)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def with_run(p):
        p.add_argument("--run", default=None, help="run directory (default: latest ingested run)")
        p.add_argument("--delay", type=int, choices=ALLOWED_DELAYS, default=None)
        return p

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-stocks", type=int, default=200)
    p.add_argument("--n-days", type=int, default=250)
    p.add_argument("--tick-seconds", type=int, default=120)
    p.add_argument("--decoys", action="store_true", help="add stocks that specific filters must remove")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ingest", help="load, adjust and filter raw inputs")
    p.add_argument("--input-dir", default=None)
    for name in INPUT_NAMES:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, default=None)
    p.add_argument("--delay", type=int, choices=ALLOWED_DELAYS, default=None)
    p.set_defaults(func=cmd_ingest)

    for name, func, text in (
        ("panel", cmd_panel, "build the intraday/overnight panel"),
        ("vol", cmd_vol, "estimate volatilities and standardize returns"),
        ("daily", cmd_daily, "build and standardize the daily panel"),
    ):
        p = with_run(sub.add_parser(name, help=text))
        p.set_defaults(func=func)

    p = with_run(sub.add_parser("regress", help="fit the six lag specifications"))
    p.add_argument("--subgroup", choices=SUBGROUP_CHOICES, default="none")
    p.add_argument("--dependent", choices=sorted(DEPENDENT_CHOICES), default="dn")
    p.add_argument("--frequency", choices=("hf", "daily"), default="hf")
    p.set_defaults(func=cmd_regress)

    p = with_run(sub.add_parser("behaviors", help="behavior proxies and Wald tests"))
    p.add_argument("--subgroup", choices=SUBGROUP_CHOICES, default="none")
    p.add_argument("--dependent", choices=sorted(DEPENDENT_CHOICES), default="dn")
    p.add_argument("--frequency", choices=("hf", "daily"), default="hf")
    p.set_defaults(func=cmd_behaviors)

    p = with_run(sub.add_parser("report", help="figure data files"))
    p.add_argument("--figure", choices=("main", "kind", "covid", "size", "sector", "daily"), default="main")
    p.add_argument("--dependent", choices=sorted(DEPENDENT_CHOICES), default="dn")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hfretail: usage error: {exc}", file=sys.stderr)
        return 2
    except (StageError, EmptyPanelError, ConvergenceError, ValueError, KeyError, OSError, np.linalg.LinAlgError) as exc:
        print(f"hfretail: {args.command} failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
