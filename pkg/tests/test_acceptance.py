"""Acceptance criteria, one test each.

The desk-scale sweep (trap-3x10, N = 100000, s = 8, P = 1..128,
m in {8, 80, 80000}, 10 replicates) is computed once per session and
takes a minute or two on one core.
"""

import numpy as np
import pytest

from pcga.benchmarks import Trap
from pcga.cga import CgaParams, ProbabilityVector, init_vector
from pcga.harness import SweepSpec, fit_loglog_slope, run_sweep, write_csv
from pcga.protocol import decode_counts, encode_counts
from pcga.sim import SimConfig, Termination, run_replicates, run_simulation

from acceptance_log import criterion
from oracles import core_trajectory, net_single_worker
from props import make_codec_roundtrip, make_count_bounds, make_delta_merge, make_determinism, make_frame_fuzz

N, S = 100000, 8
DESK_P = (1, 2, 4, 8, 16, 32, 64, 128)
DESK_M = (8, 80, 80000)
REPS = 10
SLOPE_BAND = (-1.15, -0.85)
MIN_R2 = 0.98
PROPERTY_CASES = 10_000


def base_config(seed=0):
    return SimConfig(1, 8, CgaParams(N, S, seed), Trap())


@pytest.fixture(scope="session")
def desk_rows(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk") / "desk_sweep.csv"
    rows = run_sweep(SweepSpec(DESK_P, DESK_M, REPS, base_config(), out))
    print(out.read_text())
    return rows


def series(rows, m):
    return [r for r in rows if r.m == m]


def in_band(fit):
    return SLOPE_BAND[0] <= fit.slope <= SLOPE_BAND[1] and fit.r_squared >= MIN_R2


def test_criterion_1_linear_speedup(desk_rows):
    with criterion(1, "linear speedup at m=8") as d:
        rows = series(desk_rows, 8)
        assert [r.P for r in rows] == list(DESK_P)
        fit = fit_loglog_slope(rows, m=8)
        d.update(slope=f"{fit.slope:.4f}", r2=f"{fit.r_squared:.4f}", points=fit.points)
        assert fit.points == len(DESK_P), "some m=8 cells did not solve every replicate"
        assert SLOPE_BAND[0] <= fit.slope <= SLOPE_BAND[1], f"slope {fit.slope} outside {SLOPE_BAND}"
        assert fit.r_squared >= MIN_R2, f"r2 {fit.r_squared} < {MIN_R2}"


def test_criterion_2_communication_scaling(desk_rows):
    with criterion(2, "comm steps m=8 over m=80 within 10 +- 2") as d:
        by = {(r.P, r.m): r for r in desk_rows}
        ratios = {}
        for p in DESK_P:
            a, b = by[(p, 8)], by[(p, 80)]
            if a.all_solved and b.all_solved:
                ratios[p] = a.comm_steps_mean / b.comm_steps_mean
        d.update(cells=len(ratios), min=f"{min(ratios.values()):.3f}", max=f"{max(ratios.values()):.3f}")
        assert ratios, "no P where every replicate solved at both m=8 and m=80"
        bad = {p: r for p, r in ratios.items() if not 8.0 <= r <= 12.0}
        assert not bad, f"ratios outside [8, 12]: {bad}"


def test_criterion_3_large_m_degradation(desk_rows):
    with criterion(3, "large-m degradation at m=80000") as d:
        rows = series(desk_rows, 80000)
        comm = {r.P: r.comm_steps_mean for r in rows}[128]
        fit = fit_loglog_slope(rows, m=80000, include_unsolved=True)
        d.update(comm_P128=f"{comm:.4f}", slope=f"{fit.slope:.4f}", r2=f"{fit.r_squared:.4f}")
        assert not in_band(fit), f"m=80000 series still shows linear speedup (slope {fit.slope})"
        assert comm < 1.0, f"mean communication steps per processor at P=128 is {comm}, not < 1"


def test_criterion_4_solution_quality():
    with criterion(4, "P=1 solution quality") as d:
        runs = run_replicates(base_config(), REPS).runs
        blocks = [r.blocks_solved for r in runs]
        full = sum(b == 10 for b in blocks) / len(blocks)
        d.update(blocks_mean=np.mean(blocks), all_blocks_frac=full)
        assert np.mean(blocks) >= 9.0
        assert full >= 0.8


def test_criterion_5_model_size():
    with criterion(5, "l=1000, N=10^6 encodes to 2500 bytes") as d:
        rng = np.random.default_rng(5)
        for counts in (init_vector(CgaParams(10**6), 1000).counts, rng.integers(0, 10**6, 1000, endpoint=True),
                       np.full(1000, 10**6)):
            v = ProbabilityVector(counts, 10**6)
            packed = encode_counts(v)
            assert len(packed) == 2500
            assert decode_counts(packed, 10**6, 1000) == v
        d.update(bytes=len(packed), bits=8 * len(packed))


def test_criterion_6_oracle_equivalence():
    with criterion(6, "sim P=1 equals cga-core loop; net equals sim") as d:
        iters = 10_000
        params = CgaParams(N, S, seed=2024)
        seen = []
        cfg = SimConfig(1, 10**12, params, Trap(), max_total_evaluations=S * iters + S)
        run_simulation(cfg, observer=lambda rnd, local, mgr: seen.append(local[0].copy()))
        ref = core_trajectory(params, Trap(), iters)
        assert len(seen) == iters
        first_diff = next((i for i, (a, b) in enumerate(zip(seen, ref)) if not np.array_equal(a, b)), None)
        assert first_diff is None, f"trajectories diverge at iteration {first_diff}"

        params = CgaParams(N, S, seed=1)
        sim = run_simulation(SimConfig(1, 80, params, Trap()))
        state, rep = net_single_worker(params, Trap(), 80, seed=1)
        d.update(iterations=iters, sim_reason=sim.termination_reason.value, net_transactions=rep.transactions)
        assert sim.termination_reason is Termination.OPTIMUM_SAMPLED
        assert state.vector.counts.tolist() == sim.final_counts
        assert state.evaluations_reported == sim.total_evaluations


@pytest.mark.parametrize("name,factory", [
    ("count-bounds", make_count_bounds),
    ("codec round-trip", make_codec_roundtrip),
    ("delta/merge composition", make_delta_merge),
    ("frame fuzzing", make_frame_fuzz),
    ("determinism", make_determinism),
])
def test_criterion_7_property_suites(name, factory):
    with criterion(7, f"property suite {name}") as d:
        cases = []
        factory(PROPERTY_CASES, cases)()
        d.update(cases=len(cases))
        assert len(cases) >= PROPERTY_CASES
