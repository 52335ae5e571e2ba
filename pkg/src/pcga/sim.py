"""Serial lockstep simulation of P compact-GA workers and one manager.

Workers take turns in strict round-robin order; a turn is one tournament
(``s`` evaluations).  A worker whose evaluations since its last contact reach
``m`` reports its delta at the end of that turn and adopts the manager's
merged vector.  Communication is counted in transactions, not time.

Within a round the tournaments of all workers are independent of each
other (a worker only reads its own local vector), so they are computed as
one batch; syncs and termination events are then replayed in worker order.
"""

from __future__ import annotations

import enum
import json
import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .benchmarks import FitnessFunction
from .cga import (
    CgaParams,
    ProbabilityVector,
    decode_model,
    draw_uniform,
    init_vector,
    is_converged,
    worker_stream,
)
from . import _kernel
from .protocol import apply_delta, compute_delta

# Cap on random draws buffered per refill, across all workers.
_DRAW_BUDGET = 1 << 18
_MAX_BLOCK_ROUNDS = 256


class Termination(str, enum.Enum):
    OPTIMUM_SAMPLED = "optimum-sampled"
    MANAGER_CONVERGED = "manager-converged"
    EVAL_CAP = "eval-cap"


@dataclass(frozen=True)
class SimConfig:
    workers: int
    sync_interval: int
    cga: CgaParams
    benchmark: FitnessFunction
    max_total_evaluations: int = 10**8

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError(f"workers must be >= 1, got {self.workers}")
        if self.sync_interval < 1:
            raise ValueError(f"sync_interval must be >= 1, got {self.sync_interval}")
        if self.max_total_evaluations < 1:
            raise ValueError(f"max_total_evaluations must be >= 1, got {self.max_total_evaluations}")
        if self.sync_interval < self.cga.selection_rate:
            warnings.warn(
                f"sync_interval {self.sync_interval} < selection rate {self.cga.selection_rate}: "
                "every iteration will trigger a transaction",
                stacklevel=3,
            )

    @property
    def seed(self) -> int:
        return self.cga.seed

    def with_seed(self, seed: int) -> "SimConfig":
        return replace(self, cga=replace(self.cga, seed=seed))


@dataclass
class RunMetrics:
    total_evaluations: int
    evaluations_per_worker: list[int]
    communication_steps_per_worker: list[int]
    solved: bool
    termination_reason: Termination
    blocks_solved: int
    best_fitness_ever: float
    final_counts: list[int] = field(repr=False)
    clamp_events: int = 0
    seed: int = 0

    @property
    def workers(self) -> int:
        return len(self.evaluations_per_worker)

    @property
    def evals_per_processor(self) -> float:
        return self.total_evaluations / self.workers

    @property
    def comm_steps_per_processor(self) -> float:
        return sum(self.communication_steps_per_worker) / self.workers

    def to_json(self) -> str:
        d = asdict(self)
        d["termination_reason"] = self.termination_reason.value
        return json.dumps(d, sort_keys=True)


@dataclass
class Aggregate:
    repetitions: int
    evals_per_proc_mean: float
    evals_per_proc_std: float
    comm_steps_mean: float
    comm_steps_std: float
    solved_frac: float
    blocks_mean: float


@dataclass
class Replicates:
    runs: list[RunMetrics]
    aggregate: Aggregate


Observer = Callable[[int, np.ndarray, ProbabilityVector], None]


def _block_rounds(workers: int, s: int, length: int) -> int:
    return max(1, min(_MAX_BLOCK_ROUNDS, _DRAW_BUDGET // (workers * s * length)))


def run_simulation(
    config: SimConfig, observer: Observer | None = None, engine: str = "auto"
) -> RunMetrics:
    """Run one simulated experiment to termination.

    ``observer(round, local_counts, manager)`` is called after every round
    that completes without terminating; ``local_counts`` is the live
    ``(P, ℓ)`` array of worker vectors and must not be modified.

    ``engine`` selects the array implementation (``"numpy"``), the compiled
    turn loop (``"compiled"``, block-additive benchmarks only) or the
    fastest applicable one (``"auto"``).  Both produce identical metrics.
    """
    if engine not in ("auto", "numpy", "compiled"):
        raise ValueError(f"unknown engine {engine!r}")
    compiled_ok = observer is None and config.benchmark.block_table() is not None
    if engine == "compiled" and not compiled_ok:
        raise ValueError("the compiled engine needs a block-additive benchmark and no observer")
    if engine == "numpy" or not compiled_ok:
        state = _run_arrays(config, observer)
    else:
        state = _run_compiled(config)
    return _finish(config, *state)


def _run_arrays(config: SimConfig, observer: Observer | None):
    P, m = config.workers, config.sync_interval
    params = config.cga
    N, s = params.population_size, params.selection_rate
    bench = config.benchmark
    length = bench.length
    optimum = bench.optimum
    cap = config.max_total_evaluations

    streams = [worker_stream(params.seed, w) for w in range(P)]
    block_rounds = _block_rounds(P, s, length)
    block = np.empty((P, block_rounds, s, length), dtype=np.int64)

    manager = init_vector(params, length)
    local = np.tile(manager.counts, (P, 1))
    snap = local.copy()
    evals = np.zeros(P, dtype=np.int64)
    since = np.zeros(P, dtype=np.int64)
    comm = np.zeros(P, dtype=np.int64)
    rows = np.arange(P)
    total = 0
    best_ever = -math.inf
    clamp_events = 0
    reason = None

    rnd = 0
    while reason is None:
        j = rnd % block_rounds
        if j == 0:
            for w, rng in enumerate(streams):
                block[w] = draw_uniform(rng, N, (block_rounds, s, length))
        genes = block[:, j] < local[:, None, :]
        fit = bench.evaluate(genes)

        # first worker whose turn ends the run mid-iteration, and after how many evaluations
        stop_w, stop_k = P, s
        if optimum is not None:
            hits = fit >= optimum
            hit_rows = hits.any(axis=1).nonzero()[0]
            if hit_rows.size:
                stop_w = int(hit_rows[0])
                stop_k = int(np.argmax(hits[stop_w])) + 1
                reason = Termination.OPTIMUM_SAMPLED
        remaining = cap - total
        if remaining <= s * P:
            cw = (remaining - 1) // s
            ck = remaining - s * cw
            if (cw, ck) < (stop_w, stop_k):
                stop_w, stop_k = cw, ck
                reason = Termination.EVAL_CAP

        winners = genes[rows, fit.argmax(axis=1)]
        disputes = (genes != winners[:, None, :]).sum(axis=1)
        local = local + np.where(winners, disputes, -disputes)
        np.maximum(local, 0, out=local)
        np.minimum(local, N, out=local)

        done = stop_w  # workers [0, done) finish their turn normally
        since[:done] += s
        for w in (since[:done] >= m).nonzero()[0]:
            report = compute_delta(
                ProbabilityVector._trusted(snap[w], N),
                ProbabilityVector._trusted(local[w], N),
                int(since[w]),
            )
            manager, clamped = apply_delta(manager, report)
            clamp_events += clamped
            local[w] = manager.counts
            snap[w] = manager.counts
            since[w] = 0
            comm[w] += 1
            if is_converged(manager):
                done = int(w) + 1
                stop_w, stop_k = done, 0
                reason = Termination.MANAGER_CONVERGED
                break

        evals[:done] += s
        total += s * done
        if done:
            best_ever = max(best_ever, float(fit[:done].max()))
        if reason is not None and stop_w < P and stop_k:
            evals[stop_w] += stop_k
            total += stop_k
            best_ever = max(best_ever, float(fit[stop_w, :stop_k].max()))
        if reason is None and observer is not None:
            observer(rnd, local, manager)
        rnd += 1

    return manager.counts, evals, comm, total, best_ever, clamp_events, reason


_KERNEL_REASONS = {
    _kernel.OPTIMUM_SAMPLED: Termination.OPTIMUM_SAMPLED,
    _kernel.MANAGER_CONVERGED: Termination.MANAGER_CONVERGED,
    _kernel.EVAL_CAP: Termination.EVAL_CAP,
}


def _run_compiled(config: SimConfig):
    P, m = config.workers, config.sync_interval
    params = config.cga
    N, s = params.population_size, params.selection_rate
    bench = config.benchmark
    length = bench.length
    k, table = bench.block_table()
    if length % k:
        raise ValueError(f"benchmark length {length} is not a multiple of its block size {k}")
    has_optimum = bench.optimum is not None
    optimum = float(bench.optimum) if has_optimum else 0.0

    streams = [worker_stream(params.seed, w) for w in range(P)]
    block_rounds = _block_rounds(P, s, length)
    block = np.empty((P, block_rounds, s, length), dtype=np.int64)

    manager = init_vector(params, length).counts
    local = np.tile(manager, (P, 1))
    snap = local.copy()
    evals = np.zeros(P, dtype=np.int64)
    since = np.zeros(P, dtype=np.int64)
    comm = np.zeros(P, dtype=np.int64)
    counters = np.zeros(2, dtype=np.int64)
    best = np.array([-math.inf])
    table = np.ascontiguousarray(table, dtype=np.float64)

    status = _kernel.RUNNING
    while status == _kernel.RUNNING:
        for w, rng in enumerate(streams):
            block[w] = draw_uniform(rng, N, (block_rounds, s, length))
        status = _kernel.run_block(
            block, local, snap, manager, evals, since, comm, counters, best,
            k, table, optimum, has_optimum, m, N, config.max_total_evaluations,
        )
    return (
        manager, evals, comm, int(counters[0]), float(best[0]), int(counters[1]),
        _KERNEL_REASONS[status],
    )


def _finish(config, counts, evals, comm, total, best_ever, clamp_events, reason) -> RunMetrics:
    bench = config.benchmark
    optimum = bench.optimum
    manager = ProbabilityVector._trusted(np.asarray(counts), config.cga.population_size)
    decoded = decode_model(manager)
    solved = reason is Termination.OPTIMUM_SAMPLED or (
        reason is Termination.MANAGER_CONVERGED
        and optimum is not None
        and bench(decoded) >= optimum
    )
    return RunMetrics(
        total_evaluations=int(total),
        evaluations_per_worker=evals.tolist(),
        communication_steps_per_worker=comm.tolist(),
        solved=bool(solved),
        termination_reason=reason,
        blocks_solved=int(bench.solved_blocks(decoded)),
        best_fitness_ever=best_ever,
        final_counts=manager.counts.tolist(),
        clamp_events=clamp_events,
        seed=config.cga.seed,
    )


def default_seed_schedule(base_seed: int) -> Callable[[int], int]:
    """Replicate ``r`` runs with master seed ``base_seed + r``."""
    return lambda r: (base_seed + r) % 2**64


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def aggregate(runs: Sequence[RunMetrics]) -> Aggregate:
    if not runs:
        raise ValueError("cannot aggregate zero runs")
    evals = [r.evals_per_processor for r in runs]
    comm = [r.comm_steps_per_processor for r in runs]
    return Aggregate(
        repetitions=len(runs),
        evals_per_proc_mean=float(np.mean(evals)),
        evals_per_proc_std=_std(evals),
        comm_steps_mean=float(np.mean(comm)),
        comm_steps_std=_std(comm),
        solved_frac=sum(r.solved for r in runs) / len(runs),
        blocks_mean=float(np.mean([r.blocks_solved for r in runs])),
    )


def run_replicates(
    config: SimConfig,
    repetitions: int,
    seed_schedule: Callable[[int], int] | None = None,
    parallel: int = 1,
) -> Replicates:
    if repetitions < 1:
        raise ValueError(f"repetitions must be >= 1, got {repetitions}")
    schedule = seed_schedule or default_seed_schedule(config.seed)
    configs = [config.with_seed(schedule(r)) for r in range(repetitions)]
    if parallel > 1 and repetitions > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            runs = list(pool.map(run_simulation, configs))
    else:
        runs = [run_simulation(c) for c in configs]
    return Replicates(runs, aggregate(runs))
