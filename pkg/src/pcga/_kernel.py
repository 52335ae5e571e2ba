"""Compiled turn loop for the simulator (block-additive benchmarks only).

Replays exactly the semantics of the array engine in ``sim``, one worker
turn at a time, over a pre-drawn block of uniform integers.
"""

import numba as nb
import numpy as np

RUNNING = 0
OPTIMUM_SAMPLED = 1
MANAGER_CONVERGED = 2
EVAL_CAP = 3


@nb.njit(cache=True)
def run_block(draws, local, snap, manager, evals, since, comm, counters, best,
              k, table, optimum, has_optimum, m, N, cap):
    """Advance the simulation through every round held in ``draws``.

    ``draws`` has shape (P, rounds, s, ℓ).  ``counters`` holds
    [total evaluations, clamp events] and ``best`` the best fitness seen;
    all state arrays are updated in place.  Returns a status code.
    """
    P, rounds, s, L = draws.shape
    nblocks = L // k
    genes = np.empty((s, L), dtype=np.bool_)
    fit = np.empty(s)
    total = counters[0]
    for j in range(rounds):
        for w in range(P):
            for t in range(s):
                acc = 0.0
                for b in range(nblocks):
                    u = 0
                    for q in range(k):
                        i = b * k + q
                        bit = draws[w, j, t, i] < local[w, i]
                        genes[t, i] = bit
                        u += bit
                    acc += table[u]
                fit[t] = acc
                evals[w] += 1
                total += 1
                if acc > best[0]:
                    best[0] = acc
                if has_optimum and acc >= optimum:
                    counters[0] = total
                    return OPTIMUM_SAMPLED
                if total >= cap:
                    counters[0] = total
                    return EVAL_CAP

            bi = 0
            for t in range(1, s):
                if fit[t] > fit[bi]:
                    bi = t
            for i in range(L):
                wb = genes[bi, i]
                n = 0
                for t in range(s):
                    if genes[t, i] != wb:
                        n += 1
                if n:
                    c = local[w, i] + n if wb else local[w, i] - n
                    if c < 0:
                        c = 0
                    elif c > N:
                        c = N
                    local[w, i] = c

            since[w] += s
            if since[w] >= m:
                converged = True
                for i in range(L):
                    d = local[w, i] - snap[w, i]
                    if d:
                        c = manager[i] + d
                        if c < 0:
                            c = 0
                            counters[1] += 1
                        elif c > N:
                            c = N
                            counters[1] += 1
                        manager[i] = c
                    local[w, i] = manager[i]
                    snap[w, i] = manager[i]
                    if manager[i] != 0 and manager[i] != N:
                        converged = False
                since[w] = 0
                comm[w] += 1
                if converged:
                    counters[0] = total
                    return MANAGER_CONVERGED
    counters[0] = total
    return RUNNING
