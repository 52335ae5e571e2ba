"""Fitness functions with known optima and building-block structure.

All evaluators accept a single bitstring of shape ``(ℓ,)`` or a batch of
shape ``(..., ℓ)`` and reduce over the last axis.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

__all__ = [
    "FitnessFunction",
    "OneMax",
    "Trap",
    "TrapSpec",
    "concatenated_trap",
    "count_solved_blocks",
    "make_benchmark",
    "onemax",
    "trap_block_fitness",
]


@dataclass(frozen=True)
class TrapSpec:
    k: int = 3
    copies: int = 10
    deceptive_ratio: float = 0.7

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"trap block size k must be >= 2, got {self.k}")
        if self.copies < 1:
            raise ValueError(f"copies must be >= 1, got {self.copies}")
        if not 0.0 < self.deceptive_ratio < 1.0:
            raise ValueError(f"deceptive_ratio must lie in (0, 1), got {self.deceptive_ratio}")

    @property
    def length(self) -> int:
        return self.k * self.copies

    @property
    def optimum(self) -> float:
        return float(self.copies)


def trap_block_fitness(u: int, spec: TrapSpec) -> float:
    """Deceptive trap value of one block holding ``u`` ones."""
    if not 0 <= u <= spec.k:
        raise ValueError(f"unitation {u} outside [0, {spec.k}]")
    if u == spec.k:
        return 1.0
    return spec.deceptive_ratio * (spec.k - 1 - u) / (spec.k - 1)


def _trap_table(spec: TrapSpec) -> np.ndarray:
    return np.array([trap_block_fitness(u, spec) for u in range(spec.k + 1)])


def _blocks(genes, spec: TrapSpec) -> np.ndarray:
    g = np.asarray(genes)
    if g.shape[-1] != spec.length:
        raise ValueError(f"expected {spec.length} genes, got {g.shape[-1]}")
    return g.reshape(g.shape[:-1] + (spec.copies, spec.k)).sum(axis=-1, dtype=np.int64)


def _ordered_sum(values: np.ndarray):
    # Left-to-right accumulation; the compiled simulator adds in the same order.
    return np.cumsum(values, axis=-1)[..., -1]


def concatenated_trap(genes, spec: TrapSpec):
    return _ordered_sum(_trap_table(spec)[_blocks(genes, spec)])


def count_solved_blocks(genes, spec: TrapSpec):
    return (_blocks(genes, spec) == spec.k).sum(axis=-1)


def onemax(genes):
    return np.asarray(genes).sum(axis=-1, dtype=np.int64)


class FitnessFunction:
    """Uniform interface consumed by the simulator and the networked workers.

    Subclasses provide ``evaluate`` (batched) and ``solved_blocks``.
    ``optimum`` is the best attainable fitness, or None when unknown.
    Block-additive functions also expose ``block_table``: ``(k, table)``
    such that fitness is the left-to-right sum of ``table[ones in block]``
    over consecutive k-bit blocks.
    """

    name = "fitness"
    length: int
    optimum: float | None = None

    def evaluate(self, genes) -> np.ndarray:
        raise NotImplementedError

    def solved_blocks(self, genes):
        raise NotImplementedError

    def block_table(self) -> tuple[int, np.ndarray] | None:
        return None

    def __call__(self, genes) -> float:
        return float(self.evaluate(genes))


class Trap(FitnessFunction):
    def __init__(self, spec: TrapSpec = TrapSpec()):
        self.spec = spec
        self.length = spec.length
        self.optimum = spec.optimum
        self.name = f"trap{spec.k}x{spec.copies}"
        if spec.deceptive_ratio != 0.7:
            self.name += f"r{spec.deceptive_ratio:g}"
        self._table = _trap_table(spec)

    def evaluate(self, genes):
        return _ordered_sum(self._table[_blocks(genes, self.spec)])

    def block_table(self):
        return self.spec.k, self._table

    def solved_blocks(self, genes):
        return count_solved_blocks(genes, self.spec)

    def __reduce__(self):
        return (Trap, (self.spec,))


class OneMax(FitnessFunction):
    def __init__(self, length: int):
        if length < 1:
            raise ValueError(f"length must be >= 1, got {length}")
        self.length = length
        self.optimum = float(length)
        self.name = f"onemax{length}"

    def evaluate(self, genes):
        g = np.asarray(genes)
        if g.shape[-1] != self.length:
            raise ValueError(f"expected {self.length} genes, got {g.shape[-1]}")
        return onemax(g).astype(np.float64)

    def solved_blocks(self, genes):
        return onemax(genes)

    def block_table(self):
        return 1, np.array([0.0, 1.0])

    def __reduce__(self):
        return (OneMax, (self.length,))


_TRAP_RE = re.compile(r"trap(\d+)x(\d+)(?:r([0-9.]+))?$")
_ONEMAX_RE = re.compile(r"onemax(\d+)$")


def make_benchmark(name: str) -> FitnessFunction:
    """Build a benchmark from its name: ``trap3x10``, ``trap4x5r0.8``, ``onemax64``."""
    key = name.strip().lower()
    m = _TRAP_RE.match(key)
    if m:
        ratio = float(m.group(3)) if m.group(3) else 0.7
        return Trap(TrapSpec(int(m.group(1)), int(m.group(2)), ratio))
    m = _ONEMAX_RE.match(key)
    if m:
        return OneMax(int(m.group(1)))
    raise ValueError(f"unknown benchmark {name!r}; expected trap<k>x<copies>[r<ratio>] or onemax<length>")
