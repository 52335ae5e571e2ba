"""Slow, obviously-correct reference drivers used as test oracles."""

import math

from pcga.cga import cga_iteration, compete_and_update, init_vector, is_converged, sample_individual, worker_stream
from pcga.protocol import apply_delta, compute_delta


def core_trajectory(params, bench, iterations, worker=0):
    """Plain cga-core loop; returns the count vector after every iteration."""
    v = init_vector(params, bench.length)
    rng = worker_stream(params.seed, worker)
    out = []
    for _ in range(iterations):
        v = cga_iteration(v, params, bench, rng).vector
        out.append(v.counts.copy())
    return out


def lockstep_reference(cfg):
    """Turn-by-turn lockstep simulation, one evaluation at a time.

    Returns a dict with the same fields as RunMetrics that matter for
    comparison.
    """
    p, bench = cfg.cga, cfg.benchmark
    P, m, s, cap = cfg.workers, cfg.sync_interval, p.selection_rate, cfg.max_total_evaluations
    manager = init_vector(p, bench.length)
    local = [manager] * P
    snap = [manager] * P
    rngs = [worker_stream(p.seed, w) for w in range(P)]
    evals, since, comm = [0] * P, [0] * P, [0] * P
    total, best_ever, clamps = 0, -math.inf, 0

    def result(reason):
        return dict(total_evaluations=total, evaluations_per_worker=evals, communication_steps_per_worker=comm,
                    termination_reason=reason, final_counts=manager.counts.tolist(),
                    best_fitness_ever=best_ever, clamp_events=clamps)

    while True:
        for w in range(P):
            samples = []
            for _ in range(s):
                ind = sample_individual(local[w], rngs[w])
                ind.fitness = bench(ind.genes)
                evals[w] += 1
                total += 1
                best_ever = max(best_ever, ind.fitness)
                if bench.optimum is not None and ind.fitness >= bench.optimum:
                    return result("optimum-sampled")
                if total >= cap:
                    return result("eval-cap")
                samples.append(ind)
            bi = 0
            for i in range(1, s):
                if samples[i].fitness > samples[bi].fitness:
                    bi = i
            v = local[w]
            for i, other in enumerate(samples):
                if i != bi:
                    v = compete_and_update(v, samples[bi], other)
            local[w] = v
            since[w] += s
            if since[w] >= m:
                manager, c = apply_delta(manager, compute_delta(snap[w], local[w], since[w]))
                clamps += c
                local[w] = snap[w] = manager
                since[w] = 0
                comm[w] += 1
                if is_converged(manager):
                    return result("manager-converged")


def net_single_worker(params, bench, m, seed, linger=0.2, timeout=120):
    """Run a live loopback manager with one worker; returns (state, worker report)."""
    import threading

    from pcga.net import Manager, TerminationPolicy, Worker

    mgr = Manager(params, bench.length, TerminationPolicy.for_benchmark(bench), linger=linger)
    thread = mgr.start_background()
    worker = Worker(mgr.address, m, bench, seed, selection_rate=params.selection_rate, timeout=timeout)
    wt = threading.Thread(target=worker.run, daemon=True)
    wt.start()
    wt.join(timeout)
    if wt.is_alive():
        mgr.request_shutdown()
        worker.stop()
        raise TimeoutError("worker did not finish")
    thread.join(timeout)
    return mgr.state, worker.report
