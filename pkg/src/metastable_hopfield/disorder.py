"""Random pattern sampling and the type decomposition of the disorder.

Pattern entries are handled as exact decimals: each support value is parsed
with :class:`decimal.Decimal` and stored as an integer numerator over a
common power-of-ten denominator. Type identity and every order-parameter
numerator downstream are therefore integer arithmetic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal
from typing import Sequence

import numpy as np


def _as_decimal(value) -> Decimal:
    if isinstance(value, Decimal):
        return value
    # repr of a float round-trips, so "0.45" stays 0.45 rather than its binary expansion
    return Decimal(str(value))


def _decimal_scale(values: Sequence[Decimal]) -> int:
    exp = 0
    for d in values:
        e = -d.as_tuple().exponent
        if isinstance(e, int) and e > exp:
            exp = e
    return 10 ** exp


@dataclass(frozen=True)
class PatternDistribution:
    """Discrete law of a single pattern component on [-1, 1]."""

    support: tuple
    probabilities: tuple

    def __post_init__(self):
        support = tuple(_as_decimal(s) for s in self.support)
        probs = tuple(float(p) for p in self.probabilities)
        if len(support) == 0 or len(support) != len(probs):
            raise ValueError("support and probabilities must be non-empty and of equal length")
        if len(set(support)) != len(support):
            raise ValueError(f"duplicate support values in {self.support}")
        if any(abs(s) > 1 for s in support):
            raise ValueError(f"support values must lie in [-1, 1], got {self.support}")
        if any(p <= 0 for p in probs):
            raise ValueError("zero or negative probabilities are rejected; drop the support entry instead")
        if abs(sum(probs) - 1.0) > 1e-12:
            raise ValueError(f"probabilities sum to {sum(probs)!r}, not 1")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "probabilities", probs)

    @classmethod
    def dirac(cls, value=1) -> "PatternDistribution":
        return cls((value,), (1.0,))

    @classmethod
    def uniform(cls, values) -> "PatternDistribution":
        values = tuple(values)
        return cls(values, tuple(1.0 / len(values) for _ in values))


@dataclass(frozen=True)
class PatternEnsemble:
    """Quenched patterns: ``numerators[i, j] / denominator`` is xi_j(i)."""

    numerators: np.ndarray
    denominator: int
    distributions: tuple = field(default=())

    def __post_init__(self):
        num = np.asarray(self.numerators, dtype=np.int64)
        if num.ndim != 2 or num.shape[0] < 1 or num.shape[1] < 1:
            raise ValueError("numerators must be an (n, p) array with n, p >= 1")
        num.setflags(write=False)
        object.__setattr__(self, "numerators", num)

    @property
    def n(self) -> int:
        return self.numerators.shape[0]

    @property
    def p(self) -> int:
        return self.numerators.shape[1]

    @property
    def columns(self) -> np.ndarray:
        """Pattern columns (xi_1(i), ..., xi_p(i)) as floats, shape (n, p)."""
        return self.numerators / self.denominator


@dataclass(frozen=True)
class TypeTable:
    """Distinct pattern columns ``a`` with their site counts ``n_a``.

    ``numerators`` has shape (|A|, p); rows are sorted lexicographically by
    value, so type indices are reproducible.
    """

    numerators: np.ndarray
    denominator: int
    counts: np.ndarray

    def __post_init__(self):
        num = np.asarray(self.numerators, dtype=np.int64)
        counts = np.asarray(self.counts, dtype=np.int64)
        if num.ndim != 2 or counts.ndim != 1 or num.shape[0] != counts.shape[0]:
            raise ValueError("numerators must be (|A|, p) and counts (|A|,)")
        if num.shape[0] == 0:
            raise ValueError("type table is empty")
        if np.any(counts <= 0):
            raise ValueError("type counts must be positive")
        if len({tuple(r) for r in num.tolist()}) != num.shape[0]:
            raise ValueError("duplicate types in type table")
        if np.any(np.abs(num) > self.denominator):
            raise ValueError("type values must lie in [-1, 1]")
        order = np.lexsort(num.T[::-1])
        num = num[order]
        counts = counts[order]
        num.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "numerators", num)
        object.__setattr__(self, "counts", counts)

    @property
    def types(self) -> np.ndarray:
        return self.numerators / self.denominator

    @property
    def n(self) -> int:
        return int(self.counts.sum())

    @property
    def p(self) -> int:
        return self.numerators.shape[1]

    @property
    def n_types(self) -> int:
        return self.numerators.shape[0]

    @property
    def L(self) -> int:
        """Dimension of the extended order parameter, 2|A|."""
        return 2 * self.n_types

    @property
    def frequencies(self) -> np.ndarray:
        return self.counts / self.n

    def key(self) -> tuple:
        return (self.denominator, tuple(map(tuple, self.numerators.tolist())), tuple(self.counts.tolist()))


def sample_patterns(dists: Sequence[PatternDistribution], n: int, seed: int) -> PatternEnsemble:
    """Draw n i.i.d. pattern columns; coordinate j follows ``dists[j]``.

    Each pattern gets its own Philox stream spawned from ``seed``, so the
    draw for pattern j does not depend on how many patterns precede it.
    """
    if len(dists) == 0:
        raise ValueError("need at least one pattern distribution")
    if n < 1:
        raise ValueError("n must be >= 1")
    for d in dists:
        if not isinstance(d, PatternDistribution):
            raise TypeError("dists must contain PatternDistribution instances")
    denom = _decimal_scale([s for d in dists for s in d.support])
    streams = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF).spawn(len(dists))
    cols = np.empty((n, len(dists)), dtype=np.int64)
    for j, (d, ss) in enumerate(zip(dists, streams)):
        rng = np.random.Generator(np.random.Philox(ss))
        values = np.array([int(s * denom) for s in d.support], dtype=np.int64)
        idx = rng.choice(len(values), size=n, p=np.asarray(d.probabilities))
        cols[:, j] = values[idx]
    return PatternEnsemble(cols, denom, tuple(dists))


def type_decomposition(ensemble: PatternEnsemble) -> TypeTable:
    uniq, counts = np.unique(ensemble.numerators, axis=0, return_counts=True)
    return TypeTable(uniq, ensemble.denominator, counts)


def fixed_type_table(types, counts) -> TypeTable:
    """Build a type table directly, e.g. to pin a balanced random field.

    ``types`` is a sequence of p-tuples of numbers (or decimal strings).
    """
    rows = [tuple(_as_decimal(v) for v in np.atleast_1d(np.asarray(t, dtype=object)).tolist()) for t in types]
    if len({len(r) for r in rows}) != 1:
        raise ValueError("all types must have the same dimension p")
    denom = _decimal_scale([v for r in rows for v in r])
    num = np.array([[int(v * denom) for v in r] for r in rows], dtype=np.int64)
    return TypeTable(num, denom, np.asarray(counts, dtype=np.int64))


def ensemble_from_table(table: TypeTable) -> PatternEnsemble:
    """Expand a type table into site columns (sites grouped by type)."""
    cols = np.repeat(table.numerators, table.counts, axis=0)
    return PatternEnsemble(cols, table.denominator)
