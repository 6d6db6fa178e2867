"""Simulation harness: scenario sweeps with reproducible result files.

A run is described by a :class:`RunConfig` (built in code, from a plain
``key = value`` config file, or from CLI flags) and produces three files in
the output directory:

* ``replicates.csv``: one row per scenario / replicate / estimand / model,
  byte-identical across reruns and worker counts for the same config.
* ``timings.csv``: wall-clock seconds per analysis.  Kept out of the main
  table on purpose, timings are never reproducible.
* ``manifest.json``: everything needed to regenerate any replicate row.

Reproducibility comes from one random stream per (scenario, replicate) pair:
``stream_id = scenario_id * STREAM_STRIDE + rep`` keyed by the run seed, so
results do not depend on scheduling or on which other scenarios ran.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import dataclass
from importlib.metadata import PackageNotFoundError, version as _dist_version
from itertools import combinations
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np
import pandas as pd
import scipy
from joblib import Parallel, delayed
from threadpoolctl import threadpool_limits

from .data import IpdDataset
from .exceptions import ConfigError, UnsupportedScenario
from .heterogeneity import Estimand, MetaResult
from .one_stage import MODEL_ONE_STAGE_COMMON, MODEL_ONE_STAGE_TRIAL, run_one_stage
from .performance import validate_replicates
from .simulate import SCENARIOS, allowed_estimands, generate_dataset, scenario_config, truth_rows
from .numerics import RngStream
from .two_stage import MODEL_TWO_STAGE, run_two_stage

#: Stream ids are scenario_id * STREAM_STRIDE + rep; caps replicates per scenario.
STREAM_STRIDE = 1 << 20

ALL_MODELS = (MODEL_TWO_STAGE, MODEL_ONE_STAGE_TRIAL, MODEL_ONE_STAGE_COMMON)
ALL_ESTIMANDS = (Estimand.FINAL_VISIT, Estimand.RATE)

REPLICATE_FIELDS = (
    "scenario_id", "rep", "estimand", "model", "theta_hat", "tau2_hat",
    "tau2_lo", "tau2_hi", "sigma2_avg", "i2", "converged", "iterations",
)
TIMING_FIELDS = ("scenario_id", "rep", "estimand", "model", "seconds")

MANIFEST_NAME = "manifest.json"
REPLICATES_NAME = "replicates.csv"
TIMINGS_NAME = "timings.csv"


def package_version() -> str:
    try:
        return _dist_version("ipdhet")
    except PackageNotFoundError:  # running from a source tree
        return "0+unknown"


@dataclass(frozen=True)
class RunConfig:
    """Everything that determines a run's outputs."""

    scenarios: tuple[int, ...]
    replicates: int
    seed: int = 1
    estimands: tuple[Estimand, ...] = ALL_ESTIMANDS
    models: tuple[str, ...] = ALL_MODELS
    outdir: Path = Path("runs")
    workers: int = 1
    max_iter: int = 40

    def __post_init__(self) -> None:
        object.__setattr__(self, "scenarios", tuple(int(s) for s in self.scenarios))
        object.__setattr__(self, "estimands", tuple(self.estimands))
        object.__setattr__(self, "models", tuple(self.models))
        object.__setattr__(self, "outdir", Path(self.outdir))
        if not self.scenarios:
            raise ConfigError("no scenarios selected")
        unknown = [s for s in self.scenarios if s not in SCENARIOS]
        if unknown:
            raise ConfigError(f"unknown scenario ids: {unknown}")
        if len(set(self.scenarios)) != len(self.scenarios):
            raise ConfigError("duplicate scenario ids")
        if not (1 <= self.replicates <= STREAM_STRIDE):
            raise ConfigError(f"replicates must be in [1, {STREAM_STRIDE}]")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if not self.estimands:
            raise ConfigError("no estimands selected")
        bad = [m for m in self.models if m not in ALL_MODELS]
        if bad:
            raise ConfigError(f"unknown models: {bad} (known: {list(ALL_MODELS)})")
        if not self.models:
            raise ConfigError("no models selected")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")


def _parse_int_list(text: str, what: str) -> tuple[int, ...]:
    out: list[int] = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part[1:]:
            lo_s, hi_s = part.split("-", 1)
            try:
                lo, hi = int(lo_s), int(hi_s)
            except ValueError as exc:
                raise ConfigError(f"bad {what} range {part!r}") from exc
            if hi < lo:
                raise ConfigError(f"bad {what} range {part!r}")
            out.extend(range(lo, hi + 1))
        else:
            try:
                out.append(int(part))
            except ValueError as exc:
                raise ConfigError(f"bad {what} entry {part!r}") from exc
    return tuple(out)


def parse_scenarios(text: str) -> tuple[int, ...]:
    """Scenario selections: ``all``, comma lists, and ranges (``7-12``)."""
    if text.strip().lower() == "all":
        return tuple(sorted(SCENARIOS))
    return _parse_int_list(text, "scenario")


def parse_estimands(text: str) -> tuple[Estimand, ...]:
    """Estimand selections: ``all``, 1/2 codes, or names, comma separated."""
    if text.strip().lower() == "all":
        return ALL_ESTIMANDS
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(Estimand.from_code(part))
        except ValueError:
            try:
                out.append(Estimand(part.lower()))
            except ValueError as exc:
                raise ConfigError(f"unknown estimand {part!r}") from exc
    return tuple(dict.fromkeys(out))


def parse_models(text: str) -> tuple[str, ...]:
    if text.strip().lower() == "all":
        return ALL_MODELS
    parts = tuple(dict.fromkeys(p.strip() for p in text.split(",") if p.strip()))
    bad = [p for p in parts if p not in ALL_MODELS]
    if bad:
        raise ConfigError(f"unknown models: {bad} (known: {list(ALL_MODELS)})")
    return parts


_CONFIG_KEYS = ("scenarios", "replicates", "seed", "estimands", "models",
                "outdir", "workers", "max_iter")


def read_config_file(path: Union[str, Path]) -> dict[str, str]:
    """Parse a ``key = value`` file; ``#`` starts a comment."""
    mapping: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key or not value:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        if key not in _CONFIG_KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r} (known: {list(_CONFIG_KEYS)})")
        if key in mapping:
            raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
        mapping[key] = value
    return mapping


def config_from_mapping(mapping: Mapping[str, str], **overrides) -> RunConfig:
    """Build a RunConfig from string values, with keyword overrides on top."""
    kwargs: dict = {}
    converters = {
        "scenarios": parse_scenarios,
        "replicates": int,
        "seed": int,
        "estimands": parse_estimands,
        "models": parse_models,
        "outdir": Path,
        "workers": int,
        "max_iter": int,
    }
    for key, value in mapping.items():
        if key not in converters:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            kwargs[key] = converters[key](value)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad value for {key!r}: {value!r}") from exc
    for key, value in overrides.items():
        if value is not None:
            kwargs[key] = value
    if "scenarios" not in kwargs:
        raise ConfigError("config must select scenarios")
    if "replicates" not in kwargs:
        raise ConfigError("config must set replicates")
    return RunConfig(**kwargs)


def replicate_stream(seed: int, scenario_id: int, rep: int) -> RngStream:
    """The dedicated random stream for one (scenario, replicate) pair."""
    if not (0 <= rep < STREAM_STRIDE):
        raise ConfigError(f"rep must be in [0, {STREAM_STRIDE}), got {rep}")
    return RngStream(seed=seed, stream_id=scenario_id * STREAM_STRIDE + rep)


def _analyze(data: IpdDataset, estimand: Estimand, model: str, max_iter: int) -> MetaResult:
    if model == MODEL_TWO_STAGE:
        return run_two_stage(data, estimand, max_iter=max_iter)
    if model == MODEL_ONE_STAGE_TRIAL:
        return run_one_stage(data, estimand, residual_by_trial=True, max_iter=max_iter)
    if model == MODEL_ONE_STAGE_COMMON:
        return run_one_stage(data, estimand, residual_by_trial=False, max_iter=max_iter)
    raise ConfigError(f"unknown model {model!r}")


def _result_row(scenario_id: int, rep: int, res: MetaResult) -> dict:
    if res.tau2_ci is None:
        lo, hi = float("nan"), float("nan")
    else:
        lo = float(res.tau2_ci[0])
        hi = float("nan") if res.tau2_ci[1] is None else float(res.tau2_ci[1])
    return {
        "scenario_id": scenario_id,
        "rep": rep,
        "estimand": res.estimand.code,
        "model": res.model,
        "theta_hat": float(res.theta),
        "tau2_hat": float(res.tau2),
        "tau2_lo": lo,
        "tau2_hi": hi,
        "sigma2_avg": float(res.sigma2_avg),
        "i2": float(res.i2),
        "converged": bool(res.converged),
        "iterations": int(res.iterations),
    }


def run_replicate(
    scenario_id: int,
    rep: int,
    seed: int,
    estimands: Sequence[Estimand] = ALL_ESTIMANDS,
    models: Sequence[str] = ALL_MODELS,
    max_iter: int = 40,
) -> tuple[list[dict], list[dict]]:
    """Generate one dataset and run every requested analysis on it.

    Returns (result rows, timing rows).  Estimands the scenario does not
    support are skipped.  BLAS threading is pinned to one thread so results
    and throughput are independent of the host's core count.
    """
    config = scenario_config(scenario_id)
    wanted = [e for e in allowed_estimands(config) if e in estimands]
    data = generate_dataset(config, replicate_stream(seed, scenario_id, rep))
    rows: list[dict] = []
    times: list[dict] = []
    with threadpool_limits(limits=1):
        for estimand in wanted:
            for model in models:
                started = time.perf_counter()
                res = _analyze(data, estimand, model, max_iter)
                elapsed = time.perf_counter() - started
                rows.append(_result_row(scenario_id, rep, res))
                times.append({
                    "scenario_id": scenario_id, "rep": rep,
                    "estimand": estimand.code, "model": model,
                    "seconds": elapsed,
                })
    return rows, times


_ROW_KEY = ("scenario_id", "rep", "estimand", "model")


def _sorted_rows(rows: list[dict]) -> list[dict]:
    return sorted(rows, key=lambda r: tuple(r[k] for k in _ROW_KEY))


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    value = float(value)
    if math.isnan(value):
        return ""
    return repr(value)


def _write_csv(path: Path, fields: Sequence[str], rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_format_cell(row[f]) for f in fields])


def manifest_payload(config: RunConfig) -> dict:
    return {
        "format": 1,
        "package": "ipdhet",
        "package_version": package_version(),
        "seed": config.seed,
        "stream_stride": STREAM_STRIDE,
        "scenarios": list(config.scenarios),
        "replicates": config.replicates,
        "estimands": [e.code for e in config.estimands],
        "models": list(config.models),
        "max_iter": config.max_iter,
        "library_versions": {
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
    }


def load_manifest(path: Union[str, Path]) -> RunConfig:
    """Rebuild the RunConfig recorded in a manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    payload = json.loads(path.read_text())
    if payload.get("package") != "ipdhet" or payload.get("format") != 1:
        raise ConfigError(f"{path} is not a recognized run manifest")
    if payload.get("stream_stride") != STREAM_STRIDE:
        raise ConfigError(
            f"manifest stream stride {payload.get('stream_stride')} does not match "
            f"this build ({STREAM_STRIDE}); replicates are not comparable"
        )
    return RunConfig(
        scenarios=tuple(payload["scenarios"]),
        replicates=int(payload["replicates"]),
        seed=int(payload["seed"]),
        estimands=tuple(Estimand.from_code(c) for c in payload["estimands"]),
        models=tuple(payload["models"]),
        outdir=path.parent,
        max_iter=int(payload.get("max_iter", 40)),
    )


def run(config: RunConfig) -> Path:
    """Execute a full run and write its three output files.

    Replicates are independent jobs; with ``workers > 1`` they are fanned out
    with joblib, and the final tables are sorted so the files do not depend
    on scheduling.
    """
    outdir = config.outdir
    outdir.mkdir(parents=True, exist_ok=True)
    tasks = [(sid, rep) for sid in config.scenarios for rep in range(config.replicates)]
    if config.workers > 1:
        results = Parallel(n_jobs=config.workers)(
            delayed(run_replicate)(
                sid, rep, config.seed, config.estimands, config.models, config.max_iter,
            )
            for sid, rep in tasks
        )
    else:
        results = [
            run_replicate(sid, rep, config.seed, config.estimands, config.models,
                          config.max_iter)
            for sid, rep in tasks
        ]
    rows = _sorted_rows([r for rows_i, _ in results for r in rows_i])
    times = _sorted_rows([t for _, times_i in results for t in times_i])
    _write_csv(outdir / REPLICATES_NAME, REPLICATE_FIELDS, rows)
    _write_csv(outdir / TIMINGS_NAME, TIMING_FIELDS, times)
    with open(outdir / MANIFEST_NAME, "w") as fh:
        json.dump(manifest_payload(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return outdir


def regenerate_replicate(
    manifest: Union[str, Path, RunConfig],
    scenario_id: int,
    rep: int,
) -> list[dict]:
    """Recompute the result rows for one replicate of a recorded run."""
    config = manifest if isinstance(manifest, RunConfig) else load_manifest(manifest)
    if scenario_id not in config.scenarios:
        raise UnsupportedScenario(f"scenario {scenario_id} is not part of this run")
    if not (0 <= rep < config.replicates):
        raise ConfigError(f"rep {rep} outside [0, {config.replicates})")
    rows, _ = run_replicate(
        scenario_id, rep, config.seed, config.estimands, config.models, config.max_iter,
    )
    return _sorted_rows(rows)


def truth_table() -> pd.DataFrame:
    """Closed-form true values for every scenario and allowed estimand."""
    return pd.DataFrame(list(truth_rows()))


def write_truths(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    truth_table().to_csv(path, index=False)
    return path


def _zip_stat(lo: float, hi: float, true: float) -> float:
    """How far the true value sits from the interval's center, in half-widths.

    Unbounded or zero-width intervals get 0 when they cover and inf when
    they do not, so non-covering intervals sort to the extreme centiles.
    """
    if not math.isfinite(hi) or hi <= lo:
        return 0.0 if lo <= true <= hi else math.inf
    return abs((lo + hi) / 2.0 - true) / ((hi - lo) / 2.0)


def emit_plotdata(
    replicates: pd.DataFrame,
    truths: pd.DataFrame,
    outdir: Union[str, Path],
) -> dict[str, Path]:
    """Write tidy per-replicate tables behind the two diagnostic figures.

    ``agreement_pairs.csv`` holds within-replicate I2 values for every model
    pair (difference and pair mean, one row per replicate).
    ``zipplot.csv`` holds tau2 intervals with a covered flag and a centile
    rank; intervals rank by :func:`_zip_stat`, missing intervals get no rank.
    """
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    df = validate_replicates(replicates)
    df = df[df["converged"]]

    pair_rows = []
    for key, grp in df.groupby(["scenario_id", "estimand"], sort=True):
        for model_a, model_b in combinations(sorted(grp["model"].unique()), 2):
            left = grp[grp["model"] == model_a][["rep", "i2"]]
            right = grp[grp["model"] == model_b][["rep", "i2"]]
            merged = left.merge(right, on="rep", suffixes=("_a", "_b")).sort_values("rep")
            for _, row in merged.iterrows():
                pair_rows.append({
                    "scenario_id": key[0], "estimand": key[1],
                    "model_a": model_a, "model_b": model_b, "rep": int(row["rep"]),
                    "i2_a": row["i2_a"], "i2_b": row["i2_b"],
                    "diff": row["i2_a"] - row["i2_b"],
                    "pair_mean": (row["i2_a"] + row["i2_b"]) / 2.0,
                })
    agreement_path = outdir / "agreement_pairs.csv"
    pd.DataFrame(pair_rows).to_csv(agreement_path, index=False)

    truth = truths[["scenario_id", "estimand", "tau2"]].copy()
    truth["scenario_id"] = truth["scenario_id"].astype(np.int64)
    truth["estimand"] = truth["estimand"].astype(str)
    zip_rows = []
    for key, grp in df.groupby(["scenario_id", "estimand", "model"], sort=True):
        match = truth[(truth["scenario_id"] == key[0]) & (truth["estimand"] == key[1])]
        if len(match) != 1:
            raise ValueError(f"expected one truth row for {key[:2]}, got {len(match)}")
        true_tau2 = float(match["tau2"].iloc[0])
        grp = grp.sort_values("rep")
        lo = grp["tau2_lo"].to_numpy(dtype=float)
        hi = grp["tau2_hi"].to_numpy(dtype=float)
        reps = grp["rep"].to_numpy(dtype=np.int64)
        tau2_hat = grp["tau2_hat"].to_numpy(dtype=float)
        present = np.isfinite(lo)
        hi_eff = np.where(np.isfinite(hi), hi, np.inf)
        stats = np.array([
            _zip_stat(l, h, true_tau2) if ok else math.nan
            for l, h, ok in zip(lo, hi_eff, present)
        ])
        centile = np.full(len(grp), math.nan)
        if present.any():
            idx = np.flatnonzero(present)
            order = idx[np.lexsort((reps[idx], stats[idx]))]
            for pos, j in enumerate(order):
                centile[j] = 100.0 * (pos + 0.5) / len(order)
        for i in range(len(grp)):
            covered = bool(present[i] and lo[i] <= true_tau2 <= hi_eff[i])
            zip_rows.append({
                "scenario_id": key[0], "estimand": key[1], "model": key[2],
                "rep": int(reps[i]), "tau2_hat": tau2_hat[i],
                "tau2_lo": lo[i] if present[i] else math.nan,
                "tau2_hi": hi[i],
                "true_tau2": true_tau2,
                "covered": covered,
                "missing": not bool(present[i]),
                "centile": centile[i],
            })
    zip_path = outdir / "zipplot.csv"
    pd.DataFrame(zip_rows).to_csv(zip_path, index=False)
    return {"agreement_pairs": agreement_path, "zipplot": zip_path}
