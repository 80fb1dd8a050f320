"""Hamiltonian, potentials and the projections sigma -> Y -> X.

Order parameters are always formed from integer counts: with type values
stored as ``num_a / denom`` the quantity ``n * denom * X_j`` is the integer
``sum_a num_a[j] * (2 k_a - n_a)``, divided once at the end. A spin
configuration and its lattice image therefore produce the same float X,
and hence the same energy, to the last bit.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .disorder import PatternEnsemble, TypeTable, type_decomposition


# ---------------------------------------------------------------------------
# Potentials
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PolynomialPotential:
    """v(x) = sum_k c_k * prod_j x_j ** e_kj.

    All inputs may carry leading batch dimensions; the trailing axis is the
    pattern index j.
    """

    p: int
    exponents: np.ndarray  # (K, p) non-negative ints
    coefficients: np.ndarray  # (K,)
    name: str = "polynomial"

    def __post_init__(self):
        e = np.asarray(self.exponents, dtype=np.int64).reshape(-1, self.p)
        c = np.asarray(self.coefficients, dtype=float).reshape(-1)
        if e.shape[0] != c.shape[0]:
            raise ValueError("one coefficient per monomial is required")
        if np.any(e < 0):
            raise ValueError("exponents must be non-negative")
        e.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "exponents", e)
        object.__setattr__(self, "coefficients", c)

    @classmethod
    def from_terms(cls, p: int, terms: Mapping[Sequence[int], float], name="polynomial"):
        exps = [tuple(int(v) for v in k) for k in terms]
        if any(len(k) != p for k in exps):
            raise ValueError(f"every exponent tuple must have length p={p}")
        return cls(p, np.array(exps, dtype=np.int64).reshape(-1, p), np.array(list(terms.values()), float), name)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        mon = np.prod(x[..., None, :] ** self.exponents, axis=-1)
        return mon @ self.coefficients

    def grad(self, x):
        x = np.asarray(x, dtype=float)
        base = x[..., None, :] ** self.exponents  # (..., K, p)
        g = np.empty(x.shape, dtype=float)
        for j in range(self.p):
            ej = self.exponents[:, j]
            dj = np.where(ej > 0, ej * x[..., None, j] ** np.maximum(ej - 1, 0), 0.0)
            others = np.prod(np.delete(base, j, axis=-1), axis=-1)
            g[..., j] = (dj * others) @ self.coefficients
        return g

    def hess(self, x):
        x = np.asarray(x, dtype=float)
        H = np.empty(x.shape + (self.p,), dtype=float)
        E = self.exponents
        for i in range(self.p):
            for j in range(i, self.p):
                f = np.ones(x.shape[:-1] + (E.shape[0],))
                for k in range(self.p):
                    ek = E[:, k]
                    if k == i == j:
                        fac = ek * (ek - 1) * x[..., None, k] ** np.maximum(ek - 2, 0)
                    elif k == i or k == j:
                        fac = ek * x[..., None, k] ** np.maximum(ek - 1, 0)
                    else:
                        fac = x[..., None, k] ** ek
                    f = f * fac
                H[..., i, j] = H[..., j, i] = f @ self.coefficients
        return H

    def key(self) -> tuple:
        return (self.name, self.p, tuple(map(tuple, self.exponents.tolist())), tuple(self.coefficients.tolist()))


def hopfield_potential(p: int) -> PolynomialPotential:
    """Classical Hopfield potential v(x) = sum_j x_j^2."""
    return PolynomialPotential(p, 2 * np.eye(p, dtype=np.int64), np.ones(p), name="hopfield")


def random_field_potential(p: int, field_strength: float = 1.0) -> PolynomialPotential:
    """v(x) = sum_{j<p} x_j^2 + h * x_p; the last pattern acts as an external field."""
    if p < 2:
        raise ValueError("the random-field potential needs p >= 2")
    exps = np.vstack([2 * np.eye(p, dtype=np.int64)[: p - 1], np.eye(p, dtype=np.int64)[p - 1]])
    coef = np.r_[np.ones(p - 1), field_strength]
    return PolynomialPotential(p, exps, coef, name="random_field")


# ---------------------------------------------------------------------------
# Lattice points and projections
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatticePoint:
    """Extended order parameter stored as per-type plus-counts n*Y_a^+."""

    plus_counts: tuple
    table: TypeTable

    def __post_init__(self):
        k = tuple(int(v) for v in self.plus_counts)
        if len(k) != self.table.n_types:
            raise ValueError(f"expected {self.table.n_types} plus-counts, got {len(k)}")
        for kk, na in zip(k, self.table.counts.tolist()):
            if not 0 <= kk <= na:
                raise ValueError(f"plus-count {kk} outside [0, {na}]")
        object.__setattr__(self, "plus_counts", k)

    @property
    def counts(self) -> np.ndarray:
        return np.asarray(self.plus_counts, dtype=np.int64)

    @property
    def y(self) -> np.ndarray:
        """Full Y vector ordered (Y_1^+, Y_1^-, Y_2^+, Y_2^-, ...)."""
        return counts_to_y(self.counts, self.table)


def counts_to_y(K, table: TypeTable) -> np.ndarray:
    K = np.asarray(K, dtype=float)
    out = np.empty(K.shape[:-1] + (table.L,), dtype=float)
    out[..., 0::2] = K / table.n
    out[..., 1::2] = (table.counts - K) / table.n
    return out


def y_to_counts(Y, table: TypeTable) -> np.ndarray:
    """Real-valued plus-counts n*Y_a^+ (no rounding)."""
    return np.asarray(Y, dtype=float)[..., 0::2] * table.n


def overlap_numerators(K, table: TypeTable) -> np.ndarray:
    """Integer n*denom*X for plus-count arrays of shape (..., |A|)."""
    K = np.asarray(K, dtype=np.int64)
    return (2 * K - table.counts) @ table.numerators


def project_counts(K, table: TypeTable) -> np.ndarray:
    """X for plus-count arrays (..., |A|); one integer-to-float division."""
    return overlap_numerators(K, table) / (table.n * table.denominator)


def project(Y: LatticePoint) -> np.ndarray:
    return project_counts(Y.counts, Y.table)


def projection_matrix(table: TypeTable) -> np.ndarray:
    """The (p, L) linear map Y -> X: column 2a is a, column 2a+1 is -a."""
    J = np.empty((table.p, table.L))
    J[:, 0::2] = table.types.T
    J[:, 1::2] = -table.types.T
    return J


def _check_spins(sigma, n):
    s = np.asarray(sigma)
    if s.ndim < 1 or s.shape[-1] != n:
        raise ValueError(f"spin configuration length {s.shape[-1] if s.ndim else 0} does not match n={n}")
    if not np.all(np.abs(s) == 1):
        raise ValueError("spins must be +1 or -1")
    return s.astype(np.int64)


def order_params(sigma, ensemble: PatternEnsemble) -> np.ndarray:
    """X_j = <sigma, xi_j> / n; sigma may be a batch of shape (..., n)."""
    s = _check_spins(sigma, ensemble.n)
    return (s @ ensemble.numerators) / (ensemble.n * ensemble.denominator)


def site_types(ensemble: PatternEnsemble, table: TypeTable) -> np.ndarray:
    """Type index of every site, consistent with ``table`` ordering."""
    lookup = {tuple(r): i for i, r in enumerate(table.numerators.tolist())}
    try:
        return np.array([lookup[tuple(r)] for r in ensemble.numerators.tolist()], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"site column {exc.args[0]} is not a type of the table") from None


def lift_counts(sigma, site_type: np.ndarray, n_types: int) -> np.ndarray:
    """Plus-counts of a (batch of) spin configurations given site types."""
    plus = (np.asarray(sigma) > 0).astype(np.int64)
    onehot = np.zeros((site_type.size, n_types), dtype=np.int64)
    onehot[np.arange(site_type.size), site_type] = 1
    return plus @ onehot


def lift(sigma, ensemble: PatternEnsemble, table: TypeTable | None = None) -> LatticePoint:
    """Extended order parameter of a spin configuration."""
    table = type_decomposition(ensemble) if table is None else table
    s = _check_spins(sigma, ensemble.n)
    if s.ndim != 1:
        raise ValueError("lift takes a single configuration; use lift_counts for batches")
    return LatticePoint(tuple(lift_counts(s, site_types(ensemble, table), table.n_types)), table)


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HopfieldModel:
    """Quenched disorder summary plus potential and inverse temperature."""

    table: TypeTable
    potential: PolynomialPotential
    beta: float

    def __post_init__(self):
        if not self.beta >= 0:
            raise ValueError("beta must be non-negative")
        if self.potential.p != self.table.p:
            raise ValueError(f"potential dimension {self.potential.p} != pattern count {self.table.p}")

    @property
    def n(self) -> int:
        return self.table.n

    def energy_counts(self, K) -> np.ndarray:
        """H = -n v(X) for plus-count arrays."""
        return -self.n * self.potential.value(project_counts(K, self.table))

    def key(self) -> tuple:
        return (self.table.key(), self.potential.key(), float(self.beta))


def hamiltonian(state, model: HopfieldModel, ensemble: PatternEnsemble | None = None) -> float:
    """Energy -n v(X) of a LatticePoint or of a spin configuration.

    Spin configurations need the site-level ``ensemble``.
    """
    if isinstance(state, LatticePoint):
        x = project(state)
    else:
        if ensemble is None:
            raise ValueError("a spin configuration needs its pattern ensemble")
        x = order_params(state, ensemble)
    return -model.n * model.potential.value(x)


# ---------------------------------------------------------------------------
# Lattice enumeration
# ---------------------------------------------------------------------------

DEFAULT_STATE_BUDGET = 5_000_000


class StateBudgetExceeded(ValueError):
    pass


class Lattice:
    """Mixed-radix enumeration of all plus-count vectors 0 <= k_a <= n_a.

    Index of k is sum_a k_a * stride_a with the last type varying fastest.
    """

    def __init__(self, table: TypeTable, budget: int = DEFAULT_STATE_BUDGET):
        self.table = table
        radix = table.counts + 1
        size = int(np.prod(radix.astype(object)))
        if size > budget:
            raise StateBudgetExceeded(
                f"lattice has {size} states, above the budget of {budget}; reduce n or the number of types")
        self.radix = radix
        self.size = size
        self.strides = np.r_[np.cumprod(radix[::-1])[::-1][1:], 1].astype(np.int64)
        idx = np.arange(size, dtype=np.int64)
        self.counts = (idx[:, None] // self.strides) % radix
        self.counts.setflags(write=False)
        self._x = None

    def index(self, K) -> np.ndarray:
        K = np.asarray(K, dtype=np.int64)
        if np.any(K < 0) or np.any(K > self.table.counts):
            raise ValueError("plus-counts outside the lattice")
        return K @ self.strides

    def point(self, i: int) -> LatticePoint:
        return LatticePoint(tuple(self.counts[int(i)].tolist()), self.table)

    @property
    def x(self) -> np.ndarray:
        """Order parameter X of every state, shape (size, p)."""
        if self._x is None:
            self._x = project_counts(self.counts, self.table)
            self._x.setflags(write=False)
        return self._x

    def x_numerators(self) -> np.ndarray:
        return overlap_numerators(self.counts, self.table)

    def __len__(self):
        return self.size
