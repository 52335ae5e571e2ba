"""``pcga`` command line: sweep, analyze, simulate, manager, worker.

Every flag can also come from a ``--config`` file (``key = value``, key is
the flag name with underscores) or from a ``PCGA_<KEY>`` environment
variable.  Precedence: command line, then config file, then environment.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import harness
from .benchmarks import make_benchmark
from .cga import CgaParams
from .harness import ConfigError, Option, SWEEP_OPTIONS, check_pop_size, check_selection, check_seed, positive
from .net import TerminationPolicy, manager_serve, worker_run
from .sim import run_simulation

MANAGER_OPTIONS = {
    "bind": Option(str, "0.0.0.0:5150", help="listen address host:port"),
    "length": Option(int, None, positive, "chromosome length (defaults to the benchmark's)"),
    "pop_size": Option(int, check=check_pop_size, help="simulated population size N (even)"),
    "selection": Option(int, 8, check_selection, "selection rate s; informational for the manager"),
    "benchmark": Option(str, "trap3x10", help="benchmark whose optimum ends the run"),
    "checkpoint": Option(str, None, help="vector checkpoint file (resumed from if present)"),
    "checkpoint_every": Option(float, 60.0, help="seconds between checkpoints"),
    "max_evaluations": Option(int, None, positive, "shut down after this many reported evaluations"),
    "linger": Option(float, 2.0, help="seconds to keep answering TERMINATE after the run ends"),
}

WORKER_OPTIONS = {
    "manager": Option(str, help="manager address host:port"),
    "sync_interval": Option(int, check=positive, help="evaluations between manager contacts (m)"),
    "seed": Option(int, 0, check_seed, "seed of this worker's random stream"),
    "stream": Option(int, 0, help="stream index under the seed"),
    "selection": Option(int, 8, check_selection, "selection rate s"),
    "benchmark": Option(str, "trap3x10", help="fitness function"),
    "retries": Option(int, 10, help="consecutive connection failures tolerated"),
}

SIMULATE_OPTIONS = {k: v for k, v in SWEEP_OPTIONS.items() if k not in ("repetitions", "out", "parallel")}


def _add_options(parser, options):
    for key, opt in options.items():
        flag = "--" + key.replace("_", "-")
        default = "" if opt.required else f" (default: {opt.default})"
        parser.add_argument(flag, dest=key, default=None, help=opt.help + default)


def _settings(args, options):
    cli = {k: getattr(args, k) for k in options}
    return harness.load_settings(args.config, cli, options=options)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcga", description="Manager-worker parallel compact GA")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("sweep", help="run a P x m sweep of the serial simulator and write CSV")
    sp.add_argument("--config", help="key = value configuration file")
    _add_options(sp, SWEEP_OPTIONS)

    sp = sub.add_parser("analyze", help="fit the log-log slope of one m series from a sweep CSV")
    sp.add_argument("--csv", required=True)
    sp.add_argument("--m", type=int, required=True)
    sp.add_argument("--field", default="evals_per_proc_mean",
                    choices=["evals_per_proc_mean", "comm_steps_mean"])
    sp.add_argument("--include-unsolved", action="store_true",
                    help="keep rows where not every replicate solved")

    sp = sub.add_parser("simulate", help="run one simulation and print its metrics as JSON")
    sp.add_argument("--config", help="key = value configuration file")
    _add_options(sp, SIMULATE_OPTIONS)

    sp = sub.add_parser("manager", help="serve the authoritative probability vector")
    sp.add_argument("--config", help="key = value configuration file")
    _add_options(sp, MANAGER_OPTIONS)

    sp = sub.add_parser("worker", help="run a compact GA worker against a manager")
    sp.add_argument("--config", help="key = value configuration file")
    _add_options(sp, WORKER_OPTIONS)
    return p


def _cmd_sweep(args):
    settings = _settings(args, SWEEP_OPTIONS)
    spec = harness.build_sweep_spec(settings)
    rows = harness.run_sweep(spec, parallel=settings["parallel"])
    if spec.output is None:
        harness.write_csv(rows, sys.stdout)
    else:
        print(f"wrote {len(rows)} rows to {spec.output}", file=sys.stderr)
    return 0


def _cmd_analyze(args):
    rows = harness.read_csv(args.csv)
    fit = harness.fit_loglog_slope(rows, m=args.m, field=args.field, include_unsolved=args.include_unsolved)
    print(f"slope={fit.slope:.6f} intercept={fit.intercept:.6f} r2={fit.r_squared:.6f} points={fit.points}")
    return 0


def _cmd_simulate(args):
    settings = _settings(args, SIMULATE_OPTIONS)
    settings.update(repetitions=1, out=None)
    spec = harness.build_sweep_spec(settings)
    if len(spec.workers) != 1 or len(spec.sync_intervals) != 1:
        raise ConfigError("simulate takes exactly one workers value and one sync_interval value")
    print(run_simulation(spec.base).to_json())
    return 0


def _cmd_manager(args):
    st = _settings(args, MANAGER_OPTIONS)
    bench = make_benchmark(st["benchmark"])
    length = st["length"] or bench.length
    if length != bench.length:
        raise ConfigError(f"length: {length} does not match benchmark {bench.name} (length {bench.length})")
    params = CgaParams(st["pop_size"], st["selection"])
    policy = TerminationPolicy.for_benchmark(bench, max_evaluations=st["max_evaluations"])
    state = manager_serve(
        st["bind"], params, length, policy,
        checkpoint=st["checkpoint"], checkpoint_every=st["checkpoint_every"], linger=st["linger"],
    )
    print(f"status={state.status.value} merges={state.merges_applied} clamps={state.clamp_events} "
          f"evaluations={state.evaluations_reported} best={state.best_fitness_reported}")
    return 0


def _cmd_worker(args):
    st = _settings(args, WORKER_OPTIONS)
    bench = make_benchmark(st["benchmark"])
    rep = worker_run(
        st["manager"], st["sync_interval"], bench, st["seed"],
        selection_rate=st["selection"], stream=st["stream"], retries=st["retries"],
    )
    reason = rep.reason.name.lower() if rep.reason is not None else "connection-lost"
    print(f"reason={reason} evaluations={rep.evaluations} transactions={rep.transactions} "
          f"reconnects={rep.reconnects} best={rep.best_fitness}")
    return 0 if rep.reason is not None else 1


_COMMANDS = {
    "sweep": _cmd_sweep,
    "analyze": _cmd_analyze,
    "simulate": _cmd_simulate,
    "manager": _cmd_manager,
    "worker": _cmd_worker,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or args.command in ("manager", "worker") else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, ValueError, OSError) as exc:
        print(f"pcga {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
