"""Experiment sweeps over (P, m), CSV output and log-log slope fits."""

from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from .benchmarks import make_benchmark
from .cga import CgaParams
from .sim import SimConfig, aggregate, default_seed_schedule, run_simulation

log = logging.getLogger("pcga.harness")

CSV_COLUMNS = (
    "P",
    "m",
    "reps",
    "evals_per_proc_mean",
    "evals_per_proc_std",
    "comm_steps_mean",
    "comm_steps_std",
    "solved_frac",
    "blocks_mean",
)

ENV_PREFIX = "PCGA_"


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------------------
# sweeps


@dataclass(frozen=True)
class SweepSpec:
    workers: tuple[int, ...]
    sync_intervals: tuple[int, ...]
    repetitions: int
    base: SimConfig
    output: Path | None = None

    def __post_init__(self):
        if not self.workers or not self.sync_intervals:
            raise ValueError("workers and sync_intervals must be non-empty")
        if self.repetitions < 1:
            raise ValueError(f"repetitions must be >= 1, got {self.repetitions}")
        if min(self.workers) < 1 or min(self.sync_intervals) < 1:
            raise ValueError("workers and sync_intervals must be positive")

    def cells(self) -> list[tuple[int, int]]:
        """(P, m) pairs in output order: sorted by m, then P."""
        return sorted({(p, m) for p in self.workers for m in self.sync_intervals}, key=lambda c: (c[1], c[0]))

    def cell_config(self, workers: int, sync_interval: int) -> SimConfig:
        return replace(self.base, workers=workers, sync_interval=sync_interval)


@dataclass(frozen=True)
class SweepRow:
    P: int
    m: int
    reps: int
    evals_per_proc_mean: float
    evals_per_proc_std: float
    comm_steps_mean: float
    comm_steps_std: float
    solved_frac: float
    blocks_mean: float

    @property
    def all_solved(self) -> bool:
        return self.solved_frac == 1.0


def _run_job(job):
    config, seed = job
    return run_simulation(config.with_seed(seed))


def run_sweep(spec: SweepSpec, parallel: int = 1, progress: Callable[[int, int], None] | None = None) -> list[SweepRow]:
    """Run every cell of ``spec``; replicate r of a cell uses seed ``base_seed + r``.

    Writes the CSV to ``spec.output`` when set.
    """
    if spec.output is not None:
        out = Path(spec.output)
        if not out.parent.exists() or (out.exists() and not os.access(out, os.W_OK)):
            raise OSError(f"cannot write sweep output to {out}")
    schedule = default_seed_schedule(spec.base.seed)
    cells = spec.cells()
    jobs = [(spec.cell_config(p, m), schedule(r)) for p, m in cells for r in range(spec.repetitions)]
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(_run_job, jobs, chunksize=1))
    else:
        runs = []
        for i, job in enumerate(jobs):
            runs.append(_run_job(job))
            if progress is not None:
                progress(i + 1, len(jobs))
    rows = []
    reps = spec.repetitions
    for i, (p, m) in enumerate(cells):
        agg = aggregate(runs[i * reps : (i + 1) * reps])
        rows.append(
            SweepRow(
                P=p, m=m, reps=reps,
                evals_per_proc_mean=agg.evals_per_proc_mean,
                evals_per_proc_std=agg.evals_per_proc_std,
                comm_steps_mean=agg.comm_steps_mean,
                comm_steps_std=agg.comm_steps_std,
                solved_frac=agg.solved_frac,
                blocks_mean=agg.blocks_mean,
            )
        )
        log.info("cell P=%d m=%d evals/proc=%.1f comm=%.2f solved=%.2f", p, m,
                 agg.evals_per_proc_mean, agg.comm_steps_mean, agg.solved_frac)
    if spec.output is not None:
        write_csv(rows, spec.output)
    return rows


def write_csv(rows: Sequence[SweepRow], path):
    """Write rows to a path or an open text file."""
    if hasattr(path, "write"):
        _write_rows(rows, path)
    else:
        with open(path, "w", newline="") as fh:
            _write_rows(rows, fh)


def _write_rows(rows, fh):
    # repr() of a float is the shortest string that parses back to the same value
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([repr(getattr(r, c)) for c in CSV_COLUMNS])


def read_csv(path) -> list[SweepRow]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_COLUMNS:
            raise ValueError(f"{path}: header must be {','.join(CSV_COLUMNS)}")
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if len(rec) != len(CSV_COLUMNS):
                raise ValueError(f"{path}:{lineno}: expected {len(CSV_COLUMNS)} fields, got {len(rec)}")
            try:
                vals = [int(v) if c in ("P", "m", "reps") else float(v) for c, v in zip(CSV_COLUMNS, rec)]
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            rows.append(SweepRow(*vals))
    return rows


# ---------------------------------------------------------------------------
# analysis


@dataclass(frozen=True)
class LogLogFit:
    slope: float
    intercept: float
    r_squared: float
    points: int


def fit_loglog_slope(
    rows: Sequence[SweepRow],
    m: int | None = None,
    field: str = "evals_per_proc_mean",
    include_unsolved: bool = False,
) -> LogLogFit:
    """Least-squares line through (ln P, ln field).

    Using one logarithm on both axes makes the slope base-independent.
    Rows whose replicates did not all solve are skipped unless
    ``include_unsolved``.
    """
    sel = [r for r in rows if (m is None or r.m == m) and (include_unsolved or r.all_solved)]
    if len(sel) < 3:
        raise ValueError(f"need at least 3 rows to fit a slope, got {len(sel)}")
    y_raw = np.array([getattr(r, field) for r in sel], dtype=float)
    if np.any(y_raw <= 0):
        raise ValueError(f"{field} must be positive for a log-log fit")
    x = np.log([r.P for r in sel])
    y = np.log(y_raw)
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float((resid**2).sum()) / ss_tot if ss_tot > 0 else 1.0
    return LogLogFit(float(slope), float(intercept), r2, len(sel))


# ---------------------------------------------------------------------------
# configuration


def _int_list(text: str) -> tuple[int, ...]:
    items = [t for t in text.replace(",", " ").split() if t]
    if not items:
        raise ValueError("expected at least one integer")
    return tuple(int(t) for t in items)


def positive(v):
    if (min(v) if isinstance(v, tuple) else v) < 1:
        raise ValueError("must be positive")


def check_pop_size(n):
    if n < 2 or n % 2:
        raise ValueError(f"population size must be even and >= 2 (N/2 encodes probability 0.5), got {n}")


def check_selection(s):
    if s < 2:
        raise ValueError(f"selection rate must be >= 2, got {s}")


def check_seed(seed):
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be an unsigned 64-bit integer")


_REQUIRED = object()


@dataclass(frozen=True)
class Option:
    parse: Callable[[str], Any]
    default: Any = _REQUIRED
    check: Callable[[Any], None] | None = None
    help: str = ""

    @property
    def required(self) -> bool:
        return self.default is _REQUIRED


SWEEP_OPTIONS: dict[str, Option] = {
    "pop_size": Option(int, check=check_pop_size, help="simulated population size N (even)"),
    "selection": Option(int, check=check_selection, help="selection rate s (tournament size)"),
    "benchmark": Option(str, help="trap<k>x<copies> or onemax<length>"),
    "workers": Option(_int_list, check=positive, help="worker counts P, comma separated"),
    "sync_interval": Option(_int_list, check=positive, help="sync intervals m, comma separated"),
    "repetitions": Option(int, 1, positive, "replicates per (P, m) cell"),
    "seed": Option(int, 0, check_seed, "base seed; replicate r uses seed + r"),
    "max_evaluations": Option(int, 10**8, positive, "per-run evaluation cap"),
    "out": Option(Path, None, help="CSV output path"),
    "parallel": Option(int, 1, positive, "worker processes"),
}


def parse_config_text(text: str, options: Mapping[str, Option], source: str = "<config>") -> dict[str, tuple[str, int]]:
    """``key = value`` lines with ``#`` comments; returns raw strings with line numbers."""
    values: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key not in options:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {values[key][1]})")
        values[key] = (value, lineno)
    return values


def resolve_options(
    options: Mapping[str, Option],
    file_values: Mapping[str, tuple[str, int]] | None = None,
    cli_values: Mapping[str, Any] | None = None,
    environ: Mapping[str, str] | None = None,
    source: str = "<config>",
) -> dict[str, Any]:
    """Merge settings: command line over config file over environment over defaults.

    Command-line values may be pre-parsed; file and environment values are
    strings.  Environment keys are ``PCGA_`` plus the upper-cased key.
    """
    file_values = file_values or {}
    cli_values = cli_values or {}
    environ = os.environ if environ is None else environ
    out: dict[str, Any] = {}
    missing = []
    for key, opt in options.items():
        env_key = ENV_PREFIX + key.upper()
        if cli_values.get(key) is not None:
            value, where = cli_values[key], f"--{key.replace('_', '-')}"
        elif key in file_values:
            value, where = file_values[key][0], f"{source}:{file_values[key][1]}"
        elif env_key in environ:
            value, where = environ[env_key], env_key
        elif opt.required:
            missing.append(key)
            continue
        else:
            out[key] = opt.default
            continue
        try:
            if isinstance(value, str):
                value = opt.parse(value)
            if opt.check is not None:
                opt.check(value)
        except ValueError as exc:
            raise ConfigError(f"{key} ({where}): {exc}") from None
        out[key] = value
    if missing:
        raise ConfigError("missing required keys: " + ", ".join(missing))
    return out


def build_sweep_spec(settings: Mapping[str, Any]) -> SweepSpec:
    params = CgaParams(settings["pop_size"], settings["selection"], settings["seed"])
    try:
        bench = make_benchmark(settings["benchmark"])
    except ValueError as exc:
        raise ConfigError(f"benchmark: {exc}") from None
    workers, intervals = settings["workers"], settings["sync_interval"]
    base = SimConfig(workers[0], intervals[0], params, bench, settings["max_evaluations"])
    return SweepSpec(tuple(workers), tuple(intervals), settings["repetitions"], base, settings["out"])


def load_settings(path=None, cli: Mapping[str, Any] | None = None, environ=None, options=SWEEP_OPTIONS) -> dict[str, Any]:
    file_values, source = {}, "<config>"
    if path is not None:
        source = str(path)
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        file_values = parse_config_text(text, options, source)
    return resolve_options(options, file_values, cli, environ, source)


def load_config(path, cli: Mapping[str, Any] | None = None, environ=None) -> SweepSpec:
    return build_sweep_spec(load_settings(path, cli, environ))


def load_sim_config(path, cli: Mapping[str, Any] | None = None, environ=None) -> SimConfig:
    spec = load_config(path, cli, environ)
    if len(spec.workers) != 1 or len(spec.sync_intervals) != 1:
        raise ConfigError("a single simulation needs exactly one workers value and one sync_interval value")
    return spec.base
