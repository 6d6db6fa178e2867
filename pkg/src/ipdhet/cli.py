"""Command-line entry points.

Four subcommands: ``run`` executes a simulation sweep and writes the
replicate / timing / manifest files, ``summarize`` derives the performance
tables from a finished run, ``plotdata`` emits tidy per-replicate tables for
figures, and ``truths`` writes the closed-form true values.

``run`` options layer as: command-line flags override config-file entries,
which override the ``IPDHET_WORKERS`` environment variable (workers only),
which overrides the defaults.
"""

from __future__ import annotations

import os
import sys
from pathlib import Path

import click

from . import harness, performance
from .exceptions import IpdhetError

WORKERS_ENV = "IPDHET_WORKERS"


def _fail(exc: Exception) -> "click.ClickException":
    return click.ClickException(f"{type(exc).__name__}: {exc}")


@click.group()
@click.version_option(version=harness.package_version(), prog_name="ipdhet")
def main() -> None:
    """Heterogeneity of treatment-subgroup interactions in IPD meta-analysis."""


@main.command("run")
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False),
              default=None, help="Key = value config file.")
@click.option("--scenarios", default=None,
              help="Scenario ids: 'all', comma list, ranges (e.g. 1,3,7-12).")
@click.option("--replicates", type=int, default=None, help="Replicates per scenario.")
@click.option("--seed", type=int, default=None, help="Run seed.")
@click.option("--estimands", default=None,
              help="Estimands: 'all', 1/2 codes, or names (final_visit, rate).")
@click.option("--models", default=None,
              help="Models: 'all' or a comma list of "
                   "two_stage, one_stage_trial, one_stage_common.")
@click.option("--outdir", type=click.Path(file_okay=False), default=None,
              help="Output directory (default: runs).")
@click.option("--workers", type=int, default=None,
              help=f"Parallel workers (default: ${WORKERS_ENV} or 1).")
@click.option("--max-iter", type=int, default=None,
              help="Iteration cap for variance-component searches.")
def run_cmd(config_path, scenarios, replicates, seed, estimands, models,
            outdir, workers, max_iter) -> None:
    """Run scenarios and write replicates.csv, timings.csv, manifest.json."""
    try:
        mapping = harness.read_config_file(config_path) if config_path else {}
        if workers is None and "workers" not in mapping:
            env = os.environ.get(WORKERS_ENV)
            if env:
                workers = int(env)
        config = harness.config_from_mapping(
            mapping,
            scenarios=harness.parse_scenarios(scenarios) if scenarios else None,
            replicates=replicates,
            seed=seed,
            estimands=harness.parse_estimands(estimands) if estimands else None,
            models=harness.parse_models(models) if models else None,
            outdir=Path(outdir) if outdir else None,
            workers=workers,
            max_iter=max_iter,
        )
        outpath = harness.run(config)
    except (IpdhetError, ValueError) as exc:
        raise _fail(exc)
    click.echo(f"wrote {outpath / harness.REPLICATES_NAME}")
    click.echo(f"wrote {outpath / harness.TIMINGS_NAME}")
    click.echo(f"wrote {outpath / harness.MANIFEST_NAME}")


@main.command("summarize")
@click.option("--runs", "runs_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory holding replicates.csv.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Where to write the tables (default: the runs directory).")
def summarize_cmd(runs_dir, out_dir) -> None:
    """Derive summary.csv, coverage.csv, and agreement.csv from a run."""
    runs = Path(runs_dir)
    out = Path(out_dir) if out_dir else runs
    out.mkdir(parents=True, exist_ok=True)
    try:
        replicates = performance.load_replicates(runs / harness.REPLICATES_NAME)
        truths = harness.truth_table()
        performance.summarize(replicates, truths).to_csv(out / "summary.csv", index=False)
        performance.coverage_table(replicates, truths).to_csv(out / "coverage.csv", index=False)
        performance.agreement_table(replicates).to_csv(out / "agreement.csv", index=False)
    except (IpdhetError, ValueError, FileNotFoundError) as exc:
        raise _fail(exc)
    for name in ("summary.csv", "coverage.csv", "agreement.csv"):
        click.echo(f"wrote {out / name}")


@main.command("plotdata")
@click.option("--runs", "runs_dir", type=click.Path(exists=True, file_okay=False),
              required=True, help="Directory holding replicates.csv.")
@click.option("--out", "out_dir", type=click.Path(file_okay=False), default=None,
              help="Where to write the tables (default: the runs directory).")
def plotdata_cmd(runs_dir, out_dir) -> None:
    """Emit agreement_pairs.csv and zipplot.csv for a finished run."""
    runs = Path(runs_dir)
    out = Path(out_dir) if out_dir else runs
    try:
        replicates = performance.load_replicates(runs / harness.REPLICATES_NAME)
        paths = harness.emit_plotdata(replicates, harness.truth_table(), out)
    except (IpdhetError, ValueError, FileNotFoundError) as exc:
        raise _fail(exc)
    for path in paths.values():
        click.echo(f"wrote {path}")


@main.command("truths")
@click.option("--out", "out_path", type=click.Path(dir_okay=False, allow_dash=True),
              default="truths.csv", show_default=True,
              help="Output file, or - for stdout.")
def truths_cmd(out_path) -> None:
    """Write the closed-form true values for every scenario."""
    if out_path == "-":
        harness.truth_table().to_csv(sys.stdout, index=False)
        return
    path = harness.write_truths(out_path)
    click.echo(f"wrote {path}")


if __name__ == "__main__":
    main()
