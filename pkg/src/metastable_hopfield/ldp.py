"""Large-deviation machinery for the order parameters.

The log-moment function L(t) = sum_a q_a log cosh<t, a> is smooth and
strictly convex whenever the types span R^p. Its gradient maps R^p onto
the interior of the zonotope Z = sum_a q_a [-1, 1] a, which is therefore
the feasible domain of the Legendre transform L*. The rate function is
I = -beta v + L* + c with c fixed by min-normalisation (only differences
of I enter any formula downstream).

Two versions of the lifted rate on the Y-lattice are offered:

``paper``
    Î = I o pi_2, Hessian J^T H_I J (rank at most p).
``exact``
    -(1/n) log Q̂_n with log-binomials interpolated by log-Gamma; its
    Hessian carries the entropy curvature n * trigamma(nY + 1) of every
    coordinate, projected onto the tangent space of the lattice.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp, polygamma, psi

from .disorder import PatternDistribution, TypeTable
from .model import (HopfieldModel, Lattice, LatticePoint, PolynomialPotential, project_counts,
                    projection_matrix)

LOG2 = float(np.log(2.0))
NEWTON_MAXITER = 100
NEWTON_TOL = 1e-11
FEASIBILITY_MARGIN = 1e-9


def log_cosh(u):
    """Overflow-free log cosh u = |u| + log1p(exp(-2|u|)) - log 2."""
    a = np.abs(u)
    return a + np.log1p(np.exp(-2.0 * a)) - LOG2


def log_binomial(n, k):
    """log C(n, k) through log-Gamma; k may be real."""
    return gammaln(np.asarray(n, float) + 1) - gammaln(np.asarray(k, float) + 1) - gammaln(np.asarray(n, float) - k + 1)


class LegendreResult(NamedTuple):
    value: float
    t: np.ndarray
    finite: bool
    converged: bool
    iterations: int


def _facet_normals(types: np.ndarray) -> np.ndarray:
    """Unit normals of every facet of the zonotope generated by ``types``."""
    p = types.shape[1]
    if p == 1:
        return np.ones((1, 1))
    gens = [a for a in types if np.linalg.norm(a) > 0]
    normals = []
    for subset in itertools.combinations(range(len(gens)), p - 1):
        G = np.array([gens[i] for i in subset])
        _, s, vt = np.linalg.svd(G)
        if s.min() < 1e-12 * max(s.max(), 1.0):
            continue
        u = vt[-1]
        if not any(abs(abs(u @ v) - 1.0) < 1e-12 for v in normals):
            normals.append(u)
    return np.array(normals)


@dataclass(frozen=True)
class RateModel:
    """beta, potential and type probabilities q_a defining L, L* and I.

    Build with :meth:`quenched` or :meth:`annealed`; both compute the
    normalising constant ``c`` and the global minimiser ``x_min``.
    """

    beta: float
    potential: PolynomialPotential
    types: np.ndarray
    q: np.ndarray
    c: float = 0.0
    x_min: np.ndarray | None = None
    normals: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        types = np.atleast_2d(np.asarray(self.types, float))
        q = np.asarray(self.q, float)
        if self.beta < 0:
            raise ValueError("beta must be non-negative")
        if q.shape != (types.shape[0],) or np.any(q <= 0) or abs(q.sum() - 1) > 1e-12:
            raise ValueError("type probabilities must be positive and sum to 1")
        if np.linalg.matrix_rank(types) < types.shape[1]:
            raise ValueError("types do not span R^p; the feasible domain is degenerate")
        if types.shape[1] != self.potential.p:
            raise ValueError("potential dimension does not match the types")
        object.__setattr__(self, "types", types)
        object.__setattr__(self, "q", q)
        if self.normals is None:
            object.__setattr__(self, "normals", _facet_normals(types))

    # -- constructors -------------------------------------------------------
    @classmethod
    def quenched(cls, model: HopfieldModel) -> "RateModel":
        t = model.table
        return cls(model.beta, model.potential, t.types, t.frequencies).normalized()

    @classmethod
    def annealed(cls, dists: Sequence[PatternDistribution], beta: float, potential) -> "RateModel":
        supports = [np.array([float(s) for s in d.support]) for d in dists]
        probs = [np.asarray(d.probabilities) for d in dists]
        types, q = [], []
        for combo in itertools.product(*[range(len(s)) for s in supports]):
            types.append([supports[j][i] for j, i in enumerate(combo)])
            q.append(np.prod([probs[j][i] for j, i in enumerate(combo)]))
        q = np.array(q)
        return cls(beta, potential, np.array(types), q / q.sum()).normalized()

    @property
    def p(self) -> int:
        return self.types.shape[1]

    # -- log-moment function -------------------------------------------------
    def log_moment(self, t):
        """L(t), gradient and Hessian at a single t."""
        t = np.atleast_1d(np.asarray(t, float))
        u = self.types @ t
        th = np.tanh(u)
        sech2 = 1.0 - th * th
        # 1 - tanh^2 loses everything for |u| > ~19; use the exact tail
        big = np.abs(u) > 15
        sech2[big] = 4.0 * np.exp(-2.0 * np.abs(u[big])) / (1.0 + np.exp(-2.0 * np.abs(u[big]))) ** 2
        Lval = float(self.q @ log_cosh(u))
        grad = (self.q * th) @ self.types
        hess = (self.types * (self.q * sech2)[:, None]).T @ self.types
        return Lval, grad, hess

    def grad_L(self, t):
        t = np.asarray(t, float)
        return np.tanh(t @ self.types.T) @ (self.q[:, None] * self.types)

    # -- feasibility ---------------------------------------------------------
    def support_function(self, u) -> np.ndarray:
        return np.abs(np.atleast_2d(u) @ self.types.T) @ self.q

    def margin(self, x) -> np.ndarray:
        """Euclidean distance-like margin of x to the zonotope boundary (negative outside)."""
        x = np.asarray(x, float)
        h = self.support_function(self.normals)
        return np.min(h - np.abs(x @ self.normals.T), axis=-1)

    def feasible(self, x, margin=FEASIBILITY_MARGIN) -> np.ndarray:
        return self.margin(x) > margin

    # -- Legendre transform ---------------------------------------------------
    def legendre(self, x, t0=None) -> LegendreResult:
        """L*(x) = sup_t <t, x> - L(t) by damped Newton from t = 0."""
        x = np.atleast_1d(np.asarray(x, float))
        if x.shape != (self.p,) or not np.all(np.isfinite(x)):
            raise ValueError(f"x must be a finite vector of length {self.p}")
        if not self.feasible(x):
            return LegendreResult(np.inf, np.full(self.p, np.nan), False, True, 0)
        t = np.zeros(self.p) if t0 is None else np.array(t0, float)
        Lv, g, H = self.log_moment(t)
        obj = Lv - t @ x
        for it in range(1, NEWTON_MAXITER + 1):
            r = g - x
            if np.max(np.abs(r)) <= NEWTON_TOL:
                return LegendreResult(float(t @ x - Lv), t, True, True, it - 1)
            step = np.linalg.solve(H, r)
            s = 1.0
            while True:
                tn = t - s * step
                Ln, gn, Hn = self.log_moment(tn)
                on = Ln - tn @ x
                if on <= obj + 1e-15 * max(1.0, abs(obj)) or s < 1e-12:
                    break
                s *= 0.5
            t, Lv, g, H, obj = tn, Ln, gn, Hn, on
        r = g - x
        ok = np.max(np.abs(r)) <= NEWTON_TOL
        return LegendreResult(float(t @ x - Lv) if ok else np.inf, t, ok, ok, NEWTON_MAXITER)

    def free_energy_batch(self, X):
        """Vectorised -beta v + L* for many points (rows of X); inf where infeasible.

        Same damped Newton as :meth:`legendre`, run on all rows at once.
        Returns (values, t*) with t* NaN on infeasible rows.
        """
        X = np.atleast_2d(np.asarray(X, float))
        N, p = X.shape
        val = np.full(N, np.inf)
        T = np.full((N, p), np.nan)
        ok = self.feasible(X)
        idx = np.nonzero(ok)[0]
        x = X[idx]
        t = np.zeros_like(x)

        def parts(t):
            u = t @ self.types.T
            th = np.tanh(u)
            au = np.abs(u)
            sech2 = 4.0 * np.exp(-2 * au) / (1.0 + np.exp(-2 * au)) ** 2
            Lv = log_cosh(u) @ self.q
            g = (th * self.q) @ self.types
            H = np.einsum("na,ai,aj->nij", sech2 * self.q, self.types, self.types)
            return Lv, g, H

        Lv, g, H = parts(t)
        obj = Lv - np.einsum("ni,ni->n", t, x)
        active = np.ones(len(idx), bool)
        for _ in range(NEWTON_MAXITER):
            r = g - x
            active = np.max(np.abs(r), axis=1) > NEWTON_TOL
            if not active.any():
                break
            a = np.nonzero(active)[0]
            step = np.linalg.solve(H[a], r[a][..., None])[..., 0]
            s = np.ones(a.size)
            pending = np.ones(a.size, bool)
            tn = t[a].copy()
            for _ in range(40):
                cand = t[a] - s[:, None] * step
                Ln, gn, Hn = parts(cand)
                on = Ln - np.einsum("ni,ni->n", cand, x[a])
                accept = pending & (on <= obj[a] + 1e-15 * np.maximum(1.0, np.abs(obj[a])))
                tn[accept] = cand[accept]
                pending &= ~accept
                if not pending.any():
                    break
                s[pending] *= 0.5
            tn[pending] = (t[a] - s[:, None] * step)[pending]
            t[a] = tn
            Lv_a, g_a, H_a = parts(t[a])
            Lv[a], g[a], H[a] = Lv_a, g_a, H_a
            obj[a] = Lv_a - np.einsum("ni,ni->n", t[a], x[a])
        conv = np.max(np.abs(g - x), axis=1) <= NEWTON_TOL
        lstar = np.einsum("ni,ni->n", t, x) - Lv
        good = idx[conv]
        val[good] = -self.beta * self.potential.value(X[good]) + lstar[conv]
        T[good] = t[conv]
        return val, T

    # -- rate function ------------------------------------------------------
    def free_energy(self, x) -> float:
        """-beta v(x) + L*(x), i.e. I without the constant."""
        res = self.legendre(x)
        if not res.finite:
            return np.inf
        return float(-self.beta * self.potential.value(np.atleast_1d(x)) + res.value)

    def rate_I(self, x) -> float:
        return self.free_energy(x) + self.c

    def rate_I_derivatives(self, x):
        """(I, grad I, Hessian I, t*) at x; I is inf outside the domain."""
        x = np.atleast_1d(np.asarray(x, float))
        res = self.legendre(x)
        if not res.finite:
            nan = np.full(self.p, np.nan)
            return np.inf, nan, np.full((self.p, self.p), np.nan), nan
        _, _, HL = self.log_moment(res.t)
        val = -self.beta * self.potential.value(x) + res.value + self.c
        grad = -self.beta * self.potential.grad(x) + res.t
        hess = -self.beta * self.potential.hess(x) + np.linalg.inv(HL)
        return float(val), grad, 0.5 * (hess + hess.T), res.t

    # -- dual parametrisation x = grad L(t) -----------------------------------
    def dual_stationarity(self, t):
        """F(t) = t - beta grad v(grad L(t)); zeros are critical points of I."""
        _, x, HL = self.log_moment(t)
        F = t - self.beta * self.potential.grad(x)
        JF = np.eye(self.p) - self.beta * self.potential.hess(x) @ HL
        return F, JF, x

    def _dual_objective(self, t):
        Lv, x, HL = self.log_moment(t)
        val = -self.beta * self.potential.value(x) + t @ x - Lv
        grad = HL @ (t - self.beta * self.potential.grad(x))
        return val, grad

    def normalized(self, n_grid: int = 7) -> "RateModel":
        """Copy with c = -min(-beta v + L*) and the minimiser recorded."""
        base = RateModel(self.beta, self.potential, self.types, self.q, 0.0, None, self.normals)
        span = 3.0
        starts = [np.zeros(self.p)] + [np.array(c) for c in
                                      itertools.product(np.linspace(-span, span, n_grid), repeat=self.p)]
        best = None
        for t0 in starts:
            res = minimize(base._dual_objective, t0, jac=True, method="BFGS", options={"gtol": 1e-12})
            t = res.x
            for _ in range(30):
                F, JF, _ = base.dual_stationarity(t)
                if np.max(np.abs(F)) < 1e-14:
                    break
                try:
                    t = t - np.linalg.solve(JF, F)
                except np.linalg.LinAlgError:
                    break
            val, _ = base._dual_objective(t)
            if not np.isfinite(val):
                continue
            if best is None or val < best[0]:
                best = (val, t)
        val, t = best
        return RateModel(self.beta, self.potential, self.types, self.q, float(-val), self.grad_L(t), self.normals)

    def key(self) -> tuple:
        return (float(self.beta), self.potential.key(), self.types.tolist(), self.q.tolist())


def binary_entropy_rate(x):
    """Closed form of L* for a fair +-1 pattern: ((1+x)/2)log(1+x) + ((1-x)/2)log(1-x)."""
    x = np.asarray(x, float)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(x > -1, 0.5 * (1 + x) * np.log1p(x), 0.0)
        b = np.where(x < 1, 0.5 * (1 - x) * np.log1p(-x), 0.0)
    return a + b


# ---------------------------------------------------------------------------
# Lumped measure on the Y-lattice
# ---------------------------------------------------------------------------

class LumpedMeasure:
    """Exact lumped Gibbs weights log Q̂_n(Y) on the full lattice."""

    def __init__(self, model: HopfieldModel, lattice: Lattice | None = None):
        self.model = model
        self.table = model.table
        self.lattice = Lattice(model.table) if lattice is None else lattice
        self.unnormalized = self.raw_log_weight(self.lattice.counts)
        self.log_Z = float(logsumexp(self.unnormalized))
        self.log_weights = self.unnormalized - self.log_Z
        self.log_weights.setflags(write=False)

    def raw_log_weight(self, K) -> np.ndarray:
        """n beta v(X) + sum_a log C(n_a, k_a); K may be real-valued."""
        K = np.asarray(K)
        t = self.table
        if np.issubdtype(K.dtype, np.integer):
            x = project_counts(K, t)
        else:
            x = ((2 * K - t.counts) @ t.types) / t.n
        return t.n * self.model.beta * self.model.potential.value(x) + log_binomial(t.counts, K).sum(axis=-1)

    def log_weight(self, K) -> np.ndarray:
        """Normalised log Q̂_n at (possibly real) plus-counts."""
        return self.raw_log_weight(K) - self.log_Z

    @property
    def n(self):
        return self.table.n


def lumped_log_weight(Y, measure: LumpedMeasure) -> float:
    K = Y.counts if isinstance(Y, LatticePoint) else np.asarray(Y)
    return float(measure.log_weight(K))


def rate_hat_and_hessian(Y, rate: RateModel, table: TypeTable, mode: str = "exact",
                         measure: LumpedMeasure | None = None):
    """Lifted rate Î, its gradient and Hessian at Y (LatticePoint or L-vector).

    In exact mode Î is -(1/n) log Q̂_n, normalised with ``measure`` when
    given, and the returned gradient and Hessian are projected onto the
    tangent space of the lattice. Raises ValueError at lattice boundaries
    in exact mode, where the entropy derivative diverges.
    """
    y = Y.y if isinstance(Y, LatticePoint) else np.asarray(Y, float)
    J = projection_matrix(table)
    x = J @ y
    if mode == "paper":
        val, g, H, _ = rate.rate_I_derivatives(x)
        return val, J.T @ g, J.T @ H @ J
    if mode != "exact":
        raise ValueError(f"unknown Hessian mode {mode!r}")
    n = table.n
    ny = n * y
    if np.any(ny <= 0) or np.any(ny >= np.repeat(table.counts, 2)):
        raise ValueError("exact-mode Hessian is undefined on the lattice boundary")
    P = tangent_projector(table)
    K = y[0::2] * n
    raw = -rate.beta * n * rate.potential.value(x) - log_binomial(table.counts, K).sum()
    if measure is not None:
        raw += measure.log_Z
    val = raw / n
    g = -rate.beta * J.T @ rate.potential.grad(x) + psi(ny + 1)
    H = -rate.beta * J.T @ rate.potential.hess(x) @ J + np.diag(n * polygamma(1, ny + 1))
    return float(val), P @ g, P @ H @ P


def tangent_projector(table: TypeTable) -> np.ndarray:
    """Orthogonal projector onto span{e_a^+ - e_a^-} in Y-space."""
    Lq = table.L
    P = np.zeros((Lq, Lq))
    for a in range(table.n_types):
        i, j = 2 * a, 2 * a + 1
        P[i, i] = P[j, j] = 0.5
        P[i, j] = P[j, i] = -0.5
    return P


def rate_hat(Y, rate: RateModel, table: TypeTable) -> float:
    """Î = I o pi_2 evaluated at a lattice point or Y-vector."""
    y = Y.y if isinstance(Y, LatticePoint) else np.asarray(Y, float)
    return rate.rate_I(projection_matrix(table) @ y)


def kappa_hat(Y, rate: RateModel, measure: LumpedMeasure) -> float:
    """Subexponential correction with Q̂_n(Y) = exp(-n Î(Y)) * kappa_hat(Y)."""
    return float(np.exp(log_kappa_hat(Y, rate, measure)))


def log_kappa_hat(Y, rate: RateModel, measure: LumpedMeasure) -> float:
    """log kappa_hat; ``Y`` may be a LatticePoint or real plus-counts."""
    K = Y.counts if isinstance(Y, LatticePoint) else np.asarray(Y, float)
    t = measure.table
    if np.issubdtype(np.asarray(K).dtype, np.integer):
        x = project_counts(K, t)
    else:
        x = ((2 * K - t.counts) @ t.types) / t.n
    return float(measure.log_weight(K) + t.n * rate.rate_I(x))
