"""Command-line front end: run experiments, tabulate and inspect their logs.

Exit codes: 0 on success, 2 for configuration, input or schema problems, 3
when an episode fails at runtime.
"""

import asyncio
import hashlib
import json
import logging
import math
import os
import time
from collections import defaultdict
from concurrent.futures.process import BrokenProcessPool
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import numpy as np
import yaml
from pydantic import ValidationError

from .config import DEFAULT_OUTPUT_DIR, LOG_FORMAT, LOG_LEVEL
from .errors import (
    ConfigError,
    EpisodeRuntimeError,
    PoseTrackingError,
    SchemaMismatchError,
)
from .experiment_harness import (
    EpisodeLog,
    post_settle_ratio,
    run_suite,
    summary_table,
    verify_ultimate_bound,
)
from .implementations.csv_episode_store import CsvEpisodeStore, LogFormat, write_csv
from .interfaces import EpisodeStore
from .models import ExperimentConfig, RunManifest, SummaryRow
from .presets import PRESET_DESCRIPTIONS, preset_names, preset_tree

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

SUMMARY_SCHEMA = "summary"
DIAGNOSE_SCHEMA = "gp-diagnose"

# Problems with stored runs; reported as input errors
_LOAD_ERRORS = (
    FileNotFoundError,
    SchemaMismatchError,
    ValidationError,
    json.JSONDecodeError,
)


def configure_logging(level: str = LOG_LEVEL) -> None:
    logging.basicConfig(level=level.upper(), format=LOG_FORMAT, force=True)


# ---------------------------------------------------------------------------
# Configuration assembly
# ---------------------------------------------------------------------------


def deep_merge(base: Dict[str, Any], overlay: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overlay.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config_file(path: str) -> Dict[str, Any]:
    """Read a YAML configuration tree.

    Raises:
        ConfigError: If the file is missing, unparsable or not a mapping.
    """
    if not os.path.isfile(path):
        raise ConfigError(f"Config file not found: {path}")
    try:
        with open(path, encoding="utf-8") as fh:
            tree = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse {path}: {exc}") from exc
    if tree is None:
        return {}
    if not isinstance(tree, dict):
        raise ConfigError(f"{path} must contain a mapping at the top level")
    return tree


def apply_override(tree: Dict[str, Any], assignment: str) -> Dict[str, Any]:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"Override '{assignment}' is not of the form key=value")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"Cannot parse value of override '{assignment}'") from exc
    nested: Dict[str, Any] = {}
    cursor = nested
    parts = key.strip().split(".")
    for part in parts[:-1]:
        cursor[part] = {}
        cursor = cursor[part]
    cursor[parts[-1]] = value
    return deep_merge(tree, nested)


def parse_seeds(seed_list: Sequence[int], seed_range: Optional[str]) -> List[int]:
    """Combine ``--seed`` values with a ``--seeds`` spec like ``0-15`` or
    ``1,4,9-11``; duplicates are dropped keeping the first occurrence."""
    seeds: List[int] = list(seed_list)
    if seed_range:
        for chunk in seed_range.split(","):
            chunk = chunk.strip()
            lo, sep, hi = chunk.partition("-")
            try:
                if sep:
                    start, stop = int(lo), int(hi)
                    if stop < start:
                        raise ValueError
                    seeds.extend(range(start, stop + 1))
                else:
                    seeds.append(int(chunk))
            except ValueError:
                raise ConfigError(f"Invalid seed specification '{chunk}'") from None
    return list(dict.fromkeys(seeds))


def resolve_config(
    preset: Optional[str] = None,
    config_path: Optional[str] = None,
    overrides: Sequence[str] = (),
    compensate: Optional[bool] = None,
    seeds: Optional[List[int]] = None,
) -> ExperimentConfig:
    """Layer preset, config file, overrides and flags into a validated config.

    A config file may name its own base with a top-level ``preset`` key; an
    explicit ``preset`` argument takes priority over it.

    Raises:
        ConfigError: For unknown presets, unreadable files or bad overrides.
        ValidationError: If the assembled tree is not a valid configuration.
    """
    file_tree: Dict[str, Any] = {}
    if config_path is not None:
        file_tree = load_config_file(config_path)
    base_name = preset or file_tree.pop("preset", None)
    file_tree.pop("preset", None)
    tree: Dict[str, Any] = preset_tree(base_name) if base_name else {}
    tree = deep_merge(tree, file_tree)
    for assignment in overrides:
        tree = apply_override(tree, assignment)
    if compensate is not None:
        tree["compensate"] = compensate
    if seeds:
        tree["seeds"] = seeds
    return ExperimentConfig.model_validate(tree)


def config_digest(cfg: ExperimentConfig) -> str:
    """SHA-256 of the canonical JSON form of a configuration."""
    canonical = json.dumps(cfg.model_dump(mode="json"), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def default_run_dir(cfg: ExperimentConfig) -> str:
    suffix = "" if cfg.compensate else "-nogp"
    return os.path.join(DEFAULT_OUTPUT_DIR, f"{cfg.name}{suffix}")


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


async def persist_run(
    store: EpisodeStore, logs: Sequence[EpisodeLog]
) -> Dict[str, List[str]]:
    """Save every episode and its final GP datasets; returns written paths."""
    outputs: Dict[str, List[str]] = {}
    for log in logs:
        outputs[str(log.seed)] = await store.save_episode(log)
        if log.datasets is not None:
            rot, trans = log.datasets
            prefix = CsvEpisodeStore.seed_dir(log.seed)
            await store.save_dataset(f"{prefix}/rot", rot)
            await store.save_dataset(f"{prefix}/trans", trans)
    return outputs


async def _execute_run(
    cfg: ExperimentConfig, run_dir: str, workers: int, log_format: LogFormat
) -> RunManifest:
    started = datetime.now(timezone.utc)
    clock = time.perf_counter()
    logs = await run_suite(cfg, cfg.seeds, workers=workers)

    store = CsvEpisodeStore(run_dir, log_format)
    await store.initialize()
    try:
        outputs = await persist_run(store, logs)
        written = [path for paths in outputs.values() for path in paths]
        manifest = RunManifest(
            name=cfg.name,
            config_digest=config_digest(cfg),
            config=cfg.model_dump(mode="json"),
            seeds=list(cfg.seeds),
            compensate=cfg.compensate,
            learning=cfg.learning,
            log_format=log_format,
            outputs=outputs,
            episode_digests=store.digests(written),
            started_at=started,
            wall_clock_s=time.perf_counter() - clock,
        )
        await store.save_manifest(manifest)
    finally:
        await store.close()

    for log in logs:
        bound = log.final_bound()
        bound_text = f", M={bound.M:.4g}" if bound is not None else ""
        click.echo(
            f"seed {log.seed}: final V={log.ticks['V'][-1]:.3e}, "
            f"{len(log.updates)} GP updates{bound_text}"
        )
    return manifest


def cmd_run(
    config_path: Optional[str],
    overrides: Sequence[str] = (),
    out_dir: Optional[str] = None,
    preset: Optional[str] = None,
    seeds: Optional[List[int]] = None,
    compensate: Optional[bool] = None,
    workers: int = 1,
    log_format: LogFormat = "csv",
) -> int:
    """Run one episode per seed and write logs plus manifest to ``out_dir``."""
    try:
        if config_path is None and preset is None:
            raise ConfigError("Either --config or --preset is required")
        cfg = resolve_config(preset, config_path, overrides, compensate, seeds)
    except (ConfigError, ValidationError) as exc:
        logger.error(f"Invalid configuration: {exc}")
        click.echo(f"Configuration error: {exc}", err=True)
        return EXIT_CONFIG

    run_dir = out_dir or default_run_dir(cfg)
    logger.info(f"Running '{cfg.name}' for seeds {cfg.seeds} into {run_dir}")
    try:
        asyncio.run(_execute_run(cfg, run_dir, workers, log_format))
    except EpisodeRuntimeError as exc:
        logger.error(f"Episode failed: {exc}")
        click.echo(f"Runtime error: {exc}", err=True)
        return EXIT_RUNTIME
    except PoseTrackingError as exc:
        logger.exception("Run failed")
        click.echo(f"Runtime error: {exc}", err=True)
        return EXIT_RUNTIME
    except BrokenProcessPool as exc:
        logger.exception("Worker pool failed")
        click.echo(f"Runtime error: worker pool failed: {exc}", err=True)
        return EXIT_RUNTIME
    click.echo(f"Wrote {len(cfg.seeds)} episode(s) to {run_dir}")
    return EXIT_OK


async def _load_run(run_dir: str) -> Tuple[RunManifest, List[EpisodeLog]]:
    if not os.path.isdir(run_dir):
        raise FileNotFoundError(f"Run directory not found: {run_dir}")
    store = CsvEpisodeStore(run_dir)
    await store.initialize()
    try:
        manifest = await store.load_manifest()
        seeds = await store.list_episodes()
        if not seeds:
            raise FileNotFoundError(f"No episodes in {run_dir}")
        logs = [await store.load_episode(seed) for seed in seeds]
    finally:
        await store.close()
    return manifest, logs


def _check_schema_versions(run_dirs: Sequence[str]) -> None:
    versions: Dict[Any, str] = {}
    for run_dir in run_dirs:
        path = os.path.join(run_dir, "manifest.json")
        if not os.path.isfile(path):
            continue
        with open(path, encoding="utf-8") as fh:
            versions.setdefault(json.load(fh).get("schema_version"), run_dir)
    if len(versions) > 1:
        listed = ", ".join(f"{v} ({d})" for v, d in versions.items())
        raise SchemaMismatchError(f"Runs mix schema versions: {listed}")


def render_summary_text(rows: Sequence[SummaryRow]) -> str:
    """Aligned plain-text rendering of the summary table."""
    header = ("trajectory", "quantity", "metric", "GP", "w/out GP", "ratio")
    body = [
        (
            r.trajectory,
            r.quantity,
            r.metric,
            f"{r.gp:.5f}",
            f"{r.no_gp:.5f}",
            f"{r.ratio:.2f}",
        )
        for r in rows
    ]
    widths = [max(len(str(row[i])) for row in [header, *body]) for i in range(6)]
    lines = [
        "  ".join(str(cell).ljust(width) for cell, width in zip(row, widths)).rstrip()
        for row in [header, *body]
    ]
    lines.insert(1, "  ".join("-" * width for width in widths))
    return "\n".join(lines)


def cmd_table(run_dirs: Sequence[str], out_path: Optional[str] = None) -> int:
    """Tabulate seed-averaged errors of runs with and without compensation."""
    if not run_dirs:
        click.echo("At least one run directory is required", err=True)
        return EXIT_CONFIG
    cells: Dict[Tuple[str, bool], List[EpisodeLog]] = defaultdict(list)
    try:
        _check_schema_versions(run_dirs)
        for run_dir in run_dirs:
            manifest, logs = asyncio.run(_load_run(run_dir))
            cells[(manifest.name, manifest.compensate)].extend(logs)
    except _LOAD_ERRORS as exc:
        logger.error(f"Cannot tabulate runs: {exc}")
        click.echo(f"Error: {exc}", err=True)
        return EXIT_CONFIG

    rows = summary_table(cells)
    click.echo(render_summary_text(rows))
    if out_path is not None:
        write_csv(
            out_path,
            SUMMARY_SCHEMA,
            list(SummaryRow.model_fields),
            ([getattr(r, name) for name in SummaryRow.model_fields] for r in rows),
        )
        click.echo(f"Wrote {out_path}")
    return EXIT_OK


def diagnose_columns(log: EpisodeLog) -> Dict[str, np.ndarray]:
    """True disturbance, GP mean with a two-sigma band and the envelope."""
    columns: Dict[str, np.ndarray] = {"t": log.time}
    for channel, var_name in (("omega", "var_omega"), ("v", "var_v")):
        sigma = np.sqrt(log.ticks[var_name])
        for axis in ("x", "y", "z"):
            mean = log.ticks[f"mu_{channel}_{axis}"]
            columns[f"rho_{channel}_{axis}"] = log.ticks[f"rho_{channel}_{axis}"]
            columns[f"mu_{channel}_{axis}"] = mean
            columns[f"lo_{channel}_{axis}"] = mean - 2.0 * sigma
            columns[f"hi_{channel}_{axis}"] = mean + 2.0 * sigma
    columns["rho_bound_omega"] = log.ticks["rho_bound_omega"]
    columns["rho_bound_v"] = log.ticks["rho_bound_v"]
    return columns


def cmd_gp_diagnose(
    run_dir: str, seed: Optional[int] = None, out_path: Optional[str] = None
) -> int:
    """Write the per-tick GP estimate of one episode next to the truth."""
    try:
        _, logs = asyncio.run(_load_run(run_dir))
    except _LOAD_ERRORS as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_CONFIG
    by_seed = {log.seed: log for log in logs}
    log = by_seed.get(seed if seed is not None else logs[0].seed)
    if log is None:
        click.echo(f"Error: no episode with seed {seed} in {run_dir}", err=True)
        return EXIT_CONFIG
    if not log.has_gp_columns:
        click.echo(f"Error: {run_dir} was run without GP learning", err=True)
        return EXIT_CONFIG

    columns = diagnose_columns(log)
    target = out_path or os.path.join(
        run_dir, CsvEpisodeStore.seed_dir(log.seed), "gp_diagnose.csv"
    )
    header = list(columns)
    write_csv(
        target,
        DIAGNOSE_SCHEMA,
        header,
        np.column_stack([columns[name] for name in header]).tolist(),
    )
    width = 4.0 * np.sqrt(log.ticks["var_v"])
    tenth = max(1, width.shape[0] // 10)
    click.echo(
        f"Band width (velocity GP): {np.mean(width[:tenth]):.4g} at start, "
        f"{np.mean(width[-tenth:]):.4g} at end"
    )
    click.echo(f"Wrote {target}")
    return EXIT_OK


def cmd_verify(run_dir: str, settle: float = 20.0) -> int:
    """Report how many episodes stay inside their own ultimate bound."""
    try:
        _, logs = asyncio.run(_load_run(run_dir))
        fraction = verify_ultimate_bound(logs, None, settle)
        ratio = post_settle_ratio(logs, None, settle)
    except _LOAD_ERRORS as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_CONFIG
    except PoseTrackingError as exc:
        click.echo(f"Error: {exc}", err=True)
        return EXIT_CONFIG
    bounds = [log.final_bound() for log in logs]
    gamma = min(b.gamma for b in bounds if b is not None)
    click.echo(
        f"{fraction:.3f} of {len(logs)} episodes satisfy V <= M after {settle} s "
        f"(confidence {gamma:.2f})"
    )
    ratio_text = "inf" if math.isinf(ratio) else f"{ratio:.4g}"
    click.echo(f"max post-settle V / M = {ratio_text}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Click wiring
# ---------------------------------------------------------------------------


@click.group()
@click.option(
    "--log-level",
    default=LOG_LEVEL,
    show_default=True,
    type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False),
)
def cli(log_level: str) -> None:
    """Dual-quaternion pose tracking with online GP compensation."""
    configure_logging(log_level)


@cli.command("run")
@click.option("--config", "config_path", default=None, help="YAML config file")
@click.option("--preset", default=None, help="Named scenario, see 'presets'")
@click.option("--seed", "seed_list", type=int, multiple=True, help="Episode seed")
@click.option("--seeds", "seed_range", default=None, help="Seed spec, e.g. 0-15")
@click.option("--out", "out_dir", envvar="POSETRACK_OUT_DIR", default=None)
@click.option("--no-compensate", is_flag=True, help="Train GPs but do not inject")
@click.option("--workers", type=click.IntRange(min=1), default=1, show_default=True)
@click.option(
    "--format", "log_format", type=click.Choice(["csv", "json"]), default="csv"
)
@click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE")
@click.pass_context
def run_command(
    ctx: click.Context,
    config_path: Optional[str],
    preset: Optional[str],
    seed_list: Tuple[int, ...],
    seed_range: Optional[str],
    out_dir: Optional[str],
    no_compensate: bool,
    workers: int,
    log_format: LogFormat,
    overrides: Tuple[str, ...],
) -> None:
    """Run an experiment, one episode per seed."""
    try:
        seeds = parse_seeds(seed_list, seed_range)
    except ConfigError as exc:
        click.echo(f"Configuration error: {exc}", err=True)
        ctx.exit(EXIT_CONFIG)
    ctx.exit(
        cmd_run(
            config_path,
            overrides,
            out_dir,
            preset=preset,
            seeds=seeds or None,
            compensate=False if no_compensate else None,
            workers=workers,
            log_format=log_format,
        )
    )


@cli.command("table")
@click.argument("run_dirs", nargs=-1)
@click.option("--out", "out_path", default=None, help="Also write the table as CSV")
@click.pass_context
def table_command(
    ctx: click.Context, run_dirs: Tuple[str, ...], out_path: Optional[str]
) -> None:
    """Summarize runs with and without GP compensation."""
    ctx.exit(cmd_table(list(run_dirs), out_path))


@cli.command("gp-diagnose")
@click.argument("run_dir")
@click.option("--seed", type=int, default=None)
@click.option("--out", "out_path", default=None)
@click.pass_context
def gp_diagnose_command(
    ctx: click.Context, run_dir: str, seed: Optional[int], out_path: Optional[str]
) -> None:
    """Export GP estimates against the true disturbance."""
    ctx.exit(cmd_gp_diagnose(run_dir, seed, out_path))


@cli.command("verify")
@click.argument("run_dir")
@click.option("--settle", type=float, default=20.0, show_default=True)
@click.pass_context
def verify_command(ctx: click.Context, run_dir: str, settle: float) -> None:
    """Check the logged Lyapunov function against the ultimate bound."""
    ctx.exit(cmd_verify(run_dir, settle))


@cli.command("presets")
def presets_command() -> None:
    """List the built-in scenarios."""
    for name in preset_names():
        click.echo(f"{name:24s}{PRESET_DESCRIPTIONS[name]}")


def main() -> None:
    cli()
