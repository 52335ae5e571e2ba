"""Compact genetic algorithm over an integer allele-count lattice.

The model is a vector of ``ℓ`` counts in ``[0, N]``; gene ``i`` is 1 with
probability ``counts[i] / N``.  Counts are kept as integers so that the
update step of one individual (``1/N``) is exact and the vector can be
serialised bit-for-bit.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

__all__ = [
    "CgaParams",
    "Individual",
    "IterationResult",
    "ProbabilityVector",
    "cga_iteration",
    "compete_and_update",
    "decode_model",
    "draw_uniform",
    "init_vector",
    "is_converged",
    "sample_individual",
    "worker_stream",
]


@dataclass(frozen=True)
class CgaParams:
    population_size: int
    selection_rate: int = 2
    seed: int = 0

    def __post_init__(self):
        n = self.population_size
        if not isinstance(n, (int, np.integer)) or n < 2:
            raise ValueError(f"population_size must be an integer >= 2, got {n!r}")
        if n % 2:
            raise ValueError(
                f"population_size must be even so that 0.5 is representable as N/2, got {n}"
            )
        if not isinstance(self.selection_rate, (int, np.integer)) or self.selection_rate < 2:
            raise ValueError(f"selection_rate must be an integer >= 2, got {self.selection_rate!r}")
        if not 0 <= self.seed < 2**64:
            raise ValueError(f"seed must fit in an unsigned 64-bit integer, got {self.seed}")


class ProbabilityVector:
    """Allele-1 counts for each gene of a simulated population of size N."""

    __slots__ = ("counts", "population_size")

    def __init__(self, counts, population_size: int):
        counts = np.array(counts, dtype=np.int64)
        if counts.ndim != 1 or counts.size == 0:
            raise ValueError("counts must be a non-empty 1-D sequence")
        if population_size < 1:
            raise ValueError(f"population_size must be positive, got {population_size}")
        if counts.min() < 0 or counts.max() > population_size:
            raise ValueError(f"counts must lie in [0, {population_size}]")
        self.counts = counts
        self.population_size = int(population_size)

    @classmethod
    def _trusted(cls, counts: np.ndarray, population_size: int) -> "ProbabilityVector":
        # Skips validation; callers guarantee int64 counts within bounds.
        v = cls.__new__(cls)
        v.counts = counts
        v.population_size = population_size
        return v

    @property
    def length(self) -> int:
        return int(self.counts.size)

    def probabilities(self) -> np.ndarray:
        return self.counts / self.population_size

    def copy(self) -> "ProbabilityVector":
        return ProbabilityVector._trusted(self.counts.copy(), self.population_size)

    def __eq__(self, other):
        if not isinstance(other, ProbabilityVector):
            return NotImplemented
        return self.population_size == other.population_size and np.array_equal(
            self.counts, other.counts
        )

    def __hash__(self):
        return hash((self.population_size, self.counts.tobytes()))

    def __repr__(self):
        return f"ProbabilityVector(counts={self.counts.tolist()}, population_size={self.population_size})"


@dataclass
class Individual:
    genes: np.ndarray
    fitness: float | None = None

    def __len__(self):
        return len(self.genes)

    def bitstring(self) -> str:
        return "".join("1" if g else "0" for g in self.genes)


class IterationResult(NamedTuple):
    vector: ProbabilityVector
    evaluations: int
    best: Individual
    best_index: int


def worker_stream(seed: int, worker: int = 0) -> np.random.Generator:
    """Independent PCG64 stream for consumer ``worker`` under ``seed``.

    Streams are children of one seed sequence, so the stream of worker 3 is
    the same whether 4 or 400 workers exist.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(worker,))))


def draw_uniform(rng: np.random.Generator, n: int, shape) -> np.ndarray:
    """Uniform integers in ``[0, n)``.

    Every sampler in the package goes through here; a gene is 1 when its
    draw is below the count, which gives probability exactly ``count / n``.
    Batched and sequential calls consume the stream identically.
    """
    return rng.integers(0, n, size=shape)


def init_vector(params: CgaParams, length: int) -> ProbabilityVector:
    if length < 1:
        raise ValueError(f"chromosome length must be >= 1, got {length}")
    n = params.population_size
    if n % 2:
        raise ValueError(f"population_size must be even, got {n}")
    return ProbabilityVector._trusted(np.full(length, n // 2, dtype=np.int64), n)


def sample_individual(v: ProbabilityVector, rng: np.random.Generator) -> Individual:
    draws = draw_uniform(rng, v.population_size, v.length)
    return Individual(draws < v.counts)


def compete_and_update(
    v: ProbabilityVector, winner: Individual, loser: Individual
) -> ProbabilityVector:
    """Shift each disputed gene one step toward the winner's allele."""
    w = np.asarray(winner.genes, dtype=bool)
    lo = np.asarray(loser.genes, dtype=bool)
    if w.shape != (v.length,) or lo.shape != (v.length,):
        raise ValueError(
            f"individual lengths {w.shape[-1:]} / {lo.shape[-1:]} do not match vector length {v.length}"
        )
    step = (w != lo) * np.where(w, 1, -1)
    counts = np.clip(v.counts + step, 0, v.population_size)
    return ProbabilityVector._trusted(counts, v.population_size)


def cga_iteration(
    v: ProbabilityVector,
    params: CgaParams,
    fitness: Callable[[np.ndarray], float],
    rng: np.random.Generator,
) -> IterationResult:
    """One tournament of ``s`` samples: the best competes against each other sample.

    Ties on fitness go to the lowest sample index.
    """
    s = params.selection_rate
    samples = [sample_individual(v, rng) for _ in range(s)]
    for ind in samples:
        ind.fitness = float(fitness(ind.genes))
    best_index = 0
    for i in range(1, s):
        if samples[i].fitness > samples[best_index].fitness:
            best_index = i
    best = samples[best_index]
    out = v
    for i, other in enumerate(samples):
        if i != best_index:
            out = compete_and_update(out, best, other)
    return IterationResult(out, s, best, best_index)


def is_converged(v: ProbabilityVector) -> bool:
    c = v.counts
    return bool(np.all((c == 0) | (c == v.population_size)))


def decode_model(v: ProbabilityVector) -> np.ndarray:
    """Most likely string under the model; a count of exactly N/2 decodes to 1."""
    return 2 * v.counts >= v.population_size
