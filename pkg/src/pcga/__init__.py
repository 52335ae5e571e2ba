"""Manager-worker parallel compact genetic algorithm."""

from .benchmarks import FitnessFunction, OneMax, Trap, TrapSpec, make_benchmark
from .cga import (
    CgaParams,
    Individual,
    ProbabilityVector,
    cga_iteration,
    compete_and_update,
    decode_model,
    init_vector,
    is_converged,
    sample_individual,
    worker_stream,
)
from .protocol import DeltaReport, compute_delta, decode_counts, encode_counts, frame, merge_delta, unframe
from .sim import RunMetrics, SimConfig, Termination, run_replicates, run_simulation

__version__ = "0.1.0"
