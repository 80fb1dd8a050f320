"""Critical points, gates, lifted saddle data and the asymptotic formulas.

Conventions
-----------
* Critical points of I are found in the dual variable t (x = grad L(t)),
  where grad I(x) = t - beta grad v(x); the map t -> x covers the open
  feasible domain, so Newton iterates can never leave it.
* Lifted centres (saddle or minimum on the Y-lattice) are continuous
  critical points of the log-Gamma interpolated lumped log-weight,
  started from the tilted point k_a = n_a (1 + tanh<t*, a>) / 2.
* ``el_norm="step"`` uses the lattice steps e_l (norm sqrt(2)/n);
  ``"unit"`` rescales them to unit length. ``gate_dir`` selects whether the
  rate sum uses w (``"w"``) or the lowest eigenvector v_1 of Ĥ (``"v1"``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import minimize
from scipy.special import logsumexp, ndtr, polygamma, psi

from .chain import LatticeChain
from .ldp import LumpedMeasure, RateModel, rate_hat_and_hessian
from .model import counts_to_y, projection_matrix
from .potential import log_dirichlet_form

ZERO_EIG = 1e-8
LOG_HALF_PI = math.log(math.pi / 2)


class AssumptionFailure(RuntimeError):
    """The landscape does not satisfy a precondition of the asymptotic formulas."""


# ---------------------------------------------------------------------------
# Critical points of I
# ---------------------------------------------------------------------------

@dataclass
class CriticalPoint:
    x: np.ndarray
    value: float
    eigenvalues: np.ndarray
    kind: str  # "minimum" | "saddle" | "other"
    t: np.ndarray
    grad_norm: float

    @property
    def index(self) -> int:
        return int(np.sum(self.eigenvalues < 0))

    def as_dict(self) -> dict:
        return {"x": self.x.tolist(), "I": self.value, "eigenvalues": self.eigenvalues.tolist(),
                "kind": self.kind, "grad_norm": self.grad_norm}


def _classify(eig):
    scale = max(1.0, float(np.max(np.abs(eig))))
    small = np.abs(eig) <= ZERO_EIG * scale
    if small.any():
        return "other"
    neg = int(np.sum(eig < 0))
    return "minimum" if neg == 0 else ("saddle" if neg == 1 else "other")


def _dual_newton(rate: RateModel, t, maxiter=60):
    t = np.array(t, float)
    F, JF, _ = rate.dual_stationarity(t)
    merit = float(F @ F)
    for _ in range(maxiter):
        if np.max(np.abs(F)) <= 1e-13:
            break
        try:
            step = np.linalg.solve(JF, F)
        except np.linalg.LinAlgError:
            return None
        s = 1.0
        while s > 1e-6:
            tn = t - s * step
            Fn, Jn, _ = rate.dual_stationarity(tn)
            mn = float(Fn @ Fn)
            if np.isfinite(mn) and mn < merit:
                break
            s *= 0.5
        else:
            return None
        t, F, JF, merit = tn, Fn, Jn, mn
    if np.max(np.abs(F)) > 1e-10:
        return None
    return t


def critical_point_at(rate: RateModel, t) -> CriticalPoint:
    x = rate.grad_L(t)
    val, grad, hess, tt = rate.rate_I_derivatives(x)
    eig = np.linalg.eigvalsh(hess)
    return CriticalPoint(x, val, eig, _classify(eig), tt, float(np.linalg.norm(grad)))


def find_critical_points(rate: RateModel, n_grid: int = 5, seeds: Sequence = (), dedup: float = 1e-6):
    """Damped dual Newton and dual descent from a multistart grid over the feasible domain."""
    p = rate.p
    R = rate.support_function(np.eye(p))
    axes = [np.linspace(-r, r, n_grid + 2)[1:-1] for r in R]
    starts = [np.array(c) for c in np.array(np.meshgrid(*axes, indexing="ij")).reshape(p, -1).T]
    starts += [np.atleast_1d(np.asarray(s, float)) for s in seeds]
    found: list[CriticalPoint] = []
    for x0 in starts:
        res = rate.legendre(x0)
        if not res.finite:
            continue
        # Newton on grad I = 0 lands on whatever critical point is nearest in
        # the merit sense, often a saddle; a descent run from the same start
        # reaches the minima even when they hug the edge of the domain
        descent = minimize(rate._dual_objective, res.t, jac=True, method="BFGS",
                           options={"gtol": 1e-10, "maxiter": 400}).x
        for t0 in (res.t, descent):
            t = _dual_newton(rate, t0)
            if t is None:
                continue
            cp = critical_point_at(rate, t)
            if not np.isfinite(cp.value) or cp.grad_norm > 1e-9:
                continue
            if all(np.linalg.norm(cp.x - o.x) > dedup for o in found):
                found.append(cp)
    if not any(c.kind == "minimum" for c in found):
        raise AssumptionFailure("no local minimum of I found")
    found.sort(key=lambda c: (c.value, tuple(c.x)))
    return found


# ---------------------------------------------------------------------------
# Gate
# ---------------------------------------------------------------------------

@dataclass
class GateSet:
    m: CriticalPoint
    M: list
    gate_value: float
    Z: list
    grid_gate_value: float
    boundary_min: float
    grid_step: float
    flags: list = field(default_factory=list)

    @property
    def barrier(self) -> float:
        return self.gate_value - self.m.value

    def as_dict(self) -> dict:
        return {"m": self.m.as_dict(), "M": [c.as_dict() for c in self.M], "gate_value": self.gate_value,
                "grid_gate_value": self.grid_gate_value, "barrier": self.barrier,
                "Z": [z.as_dict() for z in self.Z], "boundary_min": self.boundary_min,
                "grid_step": self.grid_step, "flags": list(self.flags)}


class _Grid:
    def __init__(self, rate: RateModel, h: float):
        p = rate.p
        R = rate.support_function(np.eye(p))
        self.axes = [np.arange(-math.floor(r / h), math.floor(r / h) + 1) * h for r in R]
        self.shape = tuple(a.size for a in self.axes)
        self.X = np.array(np.meshgrid(*self.axes, indexing="ij")).reshape(p, -1).T
        self.I, _ = rate.free_energy_batch(self.X)
        self.I = self.I + rate.c
        self.ok = np.isfinite(self.I)
        self.h = h
        self.strides = np.r_[np.cumprod(self.shape[::-1])[::-1][1:], 1].astype(np.int64)
        coords = (np.arange(self.X.shape[0])[:, None] // self.strides) % np.array(self.shape)
        self.coords = coords
        nb = []
        for j in range(p):
            for s in (-1, 1):
                c = coords[:, j] + s
                valid = (c >= 0) & (c < self.shape[j])
                nb.append(np.where(valid, np.arange(self.X.shape[0]) + s * self.strides[j], -1))
        self.nbrs = np.array(nb).T  # (N, 2p)
        nbok = np.where(self.nbrs >= 0, self.ok[np.maximum(self.nbrs, 0)], False)
        self.boundary = self.ok & ~nbok.all(axis=1)

    def nearest(self, x):
        d = np.linalg.norm(self.X - x, axis=1)
        d[~self.ok] = np.inf
        return int(np.argmin(d))

    def components(self, level):
        """Labels of connected components of {I < level} (-1 outside)."""
        inside = self.ok & (self.I < level)
        N = self.X.shape[0]
        rows, cols = [], []
        for k in range(self.nbrs.shape[1]):
            j = self.nbrs[:, k]
            e = inside & (j >= 0) & inside[np.maximum(j, 0)]
            rows.append(np.nonzero(e)[0])
            cols.append(j[e])
        A = sp.coo_matrix((np.ones(sum(r.size for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        _, lab = sp.csgraph.connected_components(A, directed=False)
        return np.where(inside, lab, -1)


def _minimax_node(grid: _Grid, start: int, targets: Sequence[int]) -> int:
    """Grid node at which a sweep in increasing I first joins start to a target."""
    order = np.argsort(grid.I, kind="stable")
    parent = np.arange(grid.X.shape[0])
    added = np.zeros(grid.X.shape[0], bool)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    targets = list(targets)
    for node in order:
        if not grid.ok[node]:
            break
        added[node] = True
        for j in grid.nbrs[node]:
            if j >= 0 and added[j]:
                a, b = find(node), find(j)
                if a != b:
                    parent[a] = b
        if added[start] and any(added[t] and find(t) == find(start) for t in targets):
            return int(node)
    raise AssumptionFailure("start and target minima are not connected in the feasible grid")


def _descent_label(rate, grid, labels, z: CriticalPoint, u, level, maxiter=5000):
    """Component labels reached by steepest descent started at z +- s u.

    Steps are capped at the grid spacing so the path cannot jump a ridge.
    """
    out = []
    for sgn in (1.0, -1.0):
        x = z.x + sgn * 0.5 * grid.h * u
        val, g, _, _ = rate.rate_I_derivatives(x)
        lab = -1
        for _ in range(maxiter):
            if not np.isfinite(val):
                break
            if val < level:
                node = grid.nearest(x)
                cand = [node] + [j for j in grid.nbrs[node] if j >= 0]
                labs = [labels[j] for j in cand if labels[j] >= 0]
                if labs:
                    lab = labs[0]
                    break
            gn = np.linalg.norm(g)
            if gn < 1e-12:
                break
            step = min(grid.h, 0.5 * gn) / gn
            while True:
                xn = x - step * g
                vn, gnew, _, _ = rate.rate_I_derivatives(xn)
                if np.isfinite(vn) and vn < val:
                    break
                step *= 0.5
                if step < 1e-14:
                    break
            if step < 1e-14:
                break
            x, val, g = xn, vn, gnew
        out.append(lab)
    return out


def find_gate(critical_points, rate: RateModel, m: CriticalPoint, h: float | None = None,
              tie_tol: float = 1e-8) -> GateSet:
    """Gate value and the set of optimal saddles between m and the deeper minima.

    M holds every other local minimum with I <= I(m) + 1e-9 (equal-depth
    minima are admitted so that symmetric landscapes have a target).
    """
    if m.kind != "minimum":
        raise ValueError("m must be a local minimum")
    minima = [c for c in critical_points if c.kind == "minimum"]
    M = [c for c in minima if c.value <= m.value + 1e-9 and np.linalg.norm(c.x - m.x) > 1e-6]
    if not M:
        raise AssumptionFailure("m is the unique global minimum; there is no deeper minimum to exit to")
    if h is None:
        h = 2e-3 if rate.p == 1 else (1e-2 if rate.p == 2 else 0.05)
    grid = _Grid(rate, h)
    start = grid.nearest(m.x)
    targets = [grid.nearest(c.x) for c in M]
    node = _minimax_node(grid, start, targets)
    grid_gate = float(grid.I[node])
    flags = []
    bmin = float(np.min(grid.I[grid.boundary])) if grid.boundary.any() else np.inf
    if grid.boundary[node]:
        raise AssumptionFailure("the minimax path crosses the boundary of the feasible domain")
    if bmin <= grid_gate:
        flags.append("boundary minimum of I lies below the gate value")

    # candidate saddles: polish from the merge node and from every neck cluster
    eta = 0.05 * (grid_gate - m.value)
    low = grid.components(grid_gate - eta)
    lab_m = low[start]
    labs_M = {low[t] for t in targets}
    neck = grid.ok & (grid.I <= grid_gate + eta) & (low < 0)
    neck_lab = np.full(grid.X.shape[0], -1)
    seeds = [grid.X[node]]
    if neck.any():
        # components of the neck set alone
        N = grid.X.shape[0]
        rows, cols = [], []
        for k in range(grid.nbrs.shape[1]):
            j = grid.nbrs[:, k]
            e = neck & (j >= 0) & neck[np.maximum(j, 0)]
            rows.append(np.nonzero(e)[0])
            cols.append(j[e])
        A = sp.coo_matrix((np.ones(sum(r.size for r in rows)), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(N, N))
        _, nl = sp.csgraph.connected_components(A, directed=False)
        neck_lab = np.where(neck, nl, -1)
        _, T = rate.free_energy_batch(grid.X[neck])
        gI = np.linalg.norm(T - rate.beta * rate.potential.grad(grid.X[neck]), axis=1)
        idx = np.nonzero(neck)[0]
        for c in np.unique(neck_lab[neck]):
            sel = neck_lab[idx] == c
            seeds.append(grid.X[idx[sel][np.argmin(gI[sel])]])
    cands = list(c for c in critical_points if c.kind == "saddle")
    for x0 in seeds:
        res = rate.legendre(x0)
        if not res.finite:
            continue
        t = _dual_newton(rate, res.t)
        if t is None:
            continue
        cp = critical_point_at(rate, t)
        if cp.kind == "saddle" and cp.grad_norm <= 1e-9 and all(np.linalg.norm(cp.x - o.x) > 1e-6 for o in cands):
            cands.append(cp)
    connecting = []
    for z in cands:
        if abs(z.value - grid_gate) > max(eta, 10 * h):
            continue
        _, _, H, _ = rate.rate_I_derivatives(z.x)
        ev, V = np.linalg.eigh(H)
        a, b = _descent_label(rate, grid, low, z, V[:, 0], grid_gate - eta)
        if {a, b} & {lab_m} and ({a, b} - {lab_m}) & labs_M:
            connecting.append(z)
    if not connecting:
        raise AssumptionFailure("no index-1 saddle connecting the valleys was found near the grid gate")
    gate_value = min(z.value for z in connecting)
    Z = [z for z in connecting if z.value - gate_value <= tie_tol]
    Z.sort(key=lambda z: tuple(z.x))
    if gate_value <= m.value:
        raise AssumptionFailure("gate value does not exceed I(m)")
    if bmin <= gate_value and "boundary minimum of I lies below the gate value" not in flags:
        flags.append("boundary minimum of I lies below the gate value")
    return GateSet(m, M, float(gate_value), Z, grid_gate, bmin, h, flags)


# ---------------------------------------------------------------------------
# Lifted centres on the Y-lattice
# ---------------------------------------------------------------------------

def _log_weight_derivs(K, measure: LumpedMeasure):
    t = measure.table
    beta = measure.model.beta
    pot = measure.model.potential
    x = ((2 * K - t.counts) @ t.types) / t.n
    g = 2 * beta * (t.types @ pot.grad(x)) + psi(t.counts - K + 1) - psi(K + 1)
    H = (4 * beta / t.n) * t.types @ pot.hess(x) @ t.types.T
    H = H - np.diag(polygamma(1, K + 1) + polygamma(1, t.counts - K + 1))
    return g, H


def lifted_center(x, rate_q: RateModel, measure: LumpedMeasure, maxiter=100) -> np.ndarray:
    """Real plus-counts K at the critical point of the interpolated log-weight near pi_2^{-1}(x).

    ``rate_q`` must be the quenched rate model (q_a = n_a/n), so that the
    tilted starting point projects exactly onto x.
    """
    t = measure.table
    res = rate_q.legendre(x)
    if not res.finite:
        raise AssumptionFailure(f"point {x} outside the feasible domain")
    K = t.counts * (1 + np.tanh(t.types @ res.t)) / 2
    for _ in range(maxiter):
        g, H = _log_weight_derivs(K, measure)
        if np.max(np.abs(g)) < 1e-12:
            break
        step = np.linalg.solve(H, g)
        s = 1.0
        while np.any(K - s * step <= 0) or np.any(K - s * step >= t.counts):
            s *= 0.5
        K = K - s * step
    return K


# ---------------------------------------------------------------------------
# Eigen-data
# ---------------------------------------------------------------------------

def step_matrix(table, el_norm: str = "step") -> np.ndarray:
    """Columns e_l in Y-coordinates for a type table."""
    return _steps(table.n_types, table.n, el_norm)


def _steps(n_types: int, n: int, el_norm: str) -> np.ndarray:
    Lq = 2 * n_types
    E = np.zeros((Lq, Lq))
    for a in range(n_types):
        E[2 * a, 2 * a], E[2 * a + 1, 2 * a] = -1.0 / n, 1.0 / n
        E[:, 2 * a + 1] = -E[:, 2 * a]
    if el_norm == "unit":
        E = E * (n / math.sqrt(2.0))
    elif el_norm != "step":
        raise ValueError(f"unknown e_l normalisation {el_norm!r}")
    return E


def center_rates(K, measure: LumpedMeasure) -> np.ndarray:
    """Metropolis rates r_l at real plus-counts K, ordered like the chain directions."""
    t = measure.table
    beta, pot, n = measure.model.beta, measure.model.potential, t.n
    x = ((2 * K - t.counts) @ t.types) / n
    v0 = pot.value(x)
    r = np.empty(t.L)
    for a in range(t.n_types):
        for sign, l in ((-1, 2 * a), (1, 2 * a + 1)):
            base = K[a] if sign < 0 else t.counts[a] - K[a]
            x2 = x + sign * 2 * t.types[a] / n
            r[l] = base / n * math.exp(-max(n * beta * (v0 - pot.value(x2)), 0.0))
    return r


def count_in_dice(counts_all, table, y_center, V, half_width) -> int:
    """Lattice points Y with |<Y - c, v_i>| <= half_width for every eigenvector."""
    Y = counts_to_y(counts_all, table)
    proj = (Y - y_center) @ V
    return int(np.all(np.abs(proj) <= half_width * (1 + 1e-12), axis=1).sum())


def count_in_dice_unclipped(center_counts, table, V, half_width) -> int:
    """Same count on the integer extension of the lattice (no 0 <= k_a <= n_a clipping).

    Near a lattice face a dice of half-width n^{-1/2} can stick out of the
    box; this count measures the lattice density the Gaussian sum needs.
    """
    n = table.n
    reach = int(math.ceil(half_width * n * math.sqrt(2))) + 1
    base = np.floor(center_counts).astype(np.int64)
    axes = [np.arange(b - reach, b + reach + 2) for b in base]
    K = np.array(np.meshgrid(*axes, indexing="ij")).reshape(len(axes), -1).T
    Y = counts_to_y(K, table)
    proj = (Y - counts_to_y(center_counts, table)) @ V
    return int(np.all(np.abs(proj) <= half_width * (1 + 1e-12), axis=1).sum())


@dataclass
class SaddleData:
    counts: np.ndarray
    y: np.ndarray
    x: np.ndarray
    log_Q: float
    gammas: np.ndarray
    V: np.ndarray
    rates: np.ndarray
    lam: float
    w_hat: np.ndarray
    w: np.ndarray
    v1: np.ndarray
    gamma_mask: np.ndarray
    gamma_terms: np.ndarray
    dice_count: int
    dice_count_unclipped: int
    mode: str
    el_norm: str
    gate_dir: str
    n: int

    @property
    def direction(self) -> np.ndarray:
        return self.w if self.gate_dir == "w" else self.v1

    @property
    def log_gamma_product(self) -> float:
        return float(np.sum(np.log(np.abs(self.gamma_terms[self.gamma_mask]))))

    @property
    def rate_sum(self) -> float:
        E = _steps(self.y.size // 2, self.n, self.el_norm)
        return float(np.sum(self.rates * (E.T @ self.direction) ** 2))

    def local_log_factor(self) -> float:
        """log of sqrt(pi/2)^|Gamma| |lambda| |prod|^{-1/2} sum_l r_l <e_l, dir>^2."""
        return (0.5 * self.gamma_mask.sum() * LOG_HALF_PI + math.log(abs(self.lam))
                - 0.5 * self.log_gamma_product + math.log(self.rate_sum))

    def as_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "x": self.x.tolist(), "log_Q": self.log_Q,
                "gammas": self.gammas.tolist(), "rates": self.rates.tolist(), "lambda": self.lam,
                "w": self.w.tolist(), "Gamma": np.nonzero(self.gamma_mask)[0].tolist(),
                "gamma_terms": self.gamma_terms.tolist(), "dice_count": self.dice_count,
                "dice_count_unclipped": self.dice_count_unclipped,
                "rate_sum": self.rate_sum, "mode": self.mode, "el_norm": self.el_norm, "gate_dir": self.gate_dir}


def saddle_eigendata(K, chain: LatticeChain, rate: RateModel, mode: str = "exact", el_norm: str = "step",
                     gate_dir: str = "w", toward=None) -> SaddleData:
    """Eigen-structure at a lifted saddle centre K (real plus-counts).

    ``toward`` is a point in X-space (typically m); w is oriented so that
    <X(toward) - X(z), J w> > 0, i.e. g -> 1 on the side of m.
    """
    table, measure = chain.table, chain.measure
    n = table.n
    y = counts_to_y(K, table)
    _, _, H = rate_hat_and_hessian(y, rate, table, mode, measure)
    gam, V = np.linalg.eigh(H)
    r = center_rates(K, measure)
    if np.any(r <= 0):
        raise AssumptionFailure("a transition rate vanishes at the saddle (boundary saddle)")
    E = step_matrix(table, el_norm)
    M = np.sqrt(r)[:, None] * (E.T @ H @ E) * np.sqrt(r)[None, :]
    lam_all, W = np.linalg.eigh(0.5 * (M + M.T))
    lam, wh = float(lam_all[0]), W[:, 0]
    if lam >= 0:
        raise AssumptionFailure(f"smallest eigenvalue {lam:.3e} of the rate-weighted step form is not negative")
    w = np.linalg.lstsq(E.T, wh / np.sqrt(r), rcond=None)[0]
    J = projection_matrix(table)
    if toward is not None and (J @ w) @ (np.asarray(toward) - J @ y) < 0:
        w, wh = -w, -wh
    terms = gam + 2 * abs(lam) * (V.T @ w) ** 2
    mask = np.abs(terms) > ZERO_EIG * np.max(np.abs(gam))
    dice = count_in_dice(chain.lattice.counts, table, y, V, n ** -0.5)
    dice_u = count_in_dice_unclipped(np.asarray(K, float), table, V, n ** -0.5)
    sd = SaddleData(np.asarray(K, float), y, J @ y, float(measure.log_weight(K)), gam, V, r, lam, wh, w,
                    V[:, 0], mask, terms, dice, dice_u, mode, el_norm, gate_dir, n)
    return sd


@dataclass
class MinimumData:
    counts: np.ndarray
    y: np.ndarray
    x: np.ndarray
    log_Q: float
    gammas: np.ndarray
    V: np.ndarray
    gamma_mask: np.ndarray
    dice_count: int
    dice_count_unclipped: int

    @property
    def log_gamma_product(self) -> float:
        return float(np.sum(np.log(np.abs(self.gammas[self.gamma_mask]))))

    def local_log_factor(self) -> float:
        return 0.5 * self.gamma_mask.sum() * LOG_HALF_PI - 0.5 * self.log_gamma_product

    def as_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "x": self.x.tolist(), "log_Q": self.log_Q,
                "gammas": self.gammas.tolist(), "Gamma": np.nonzero(self.gamma_mask)[0].tolist(),
                "dice_count": self.dice_count, "dice_count_unclipped": self.dice_count_unclipped}


def minimum_eigendata(K, chain: LatticeChain, rate: RateModel, mode: str = "exact") -> MinimumData:
    table, measure = chain.table, chain.measure
    y = counts_to_y(K, table)
    _, _, H = rate_hat_and_hessian(y, rate, table, mode, measure)
    gam, V = np.linalg.eigh(H)
    mask = np.abs(gam) > ZERO_EIG * np.max(np.abs(gam))
    dice = count_in_dice(chain.lattice.counts, table, y, V, table.n ** -0.5)
    dice_u = count_in_dice_unclipped(np.asarray(K, float), table, V, table.n ** -0.5)
    return MinimumData(np.asarray(K, float), y, projection_matrix(table) @ y, float(measure.log_weight(K)),
                       gam, V, mask, dice, dice_u)


# ---------------------------------------------------------------------------
# Lifting the gate
# ---------------------------------------------------------------------------

@dataclass
class LiftedPoint:
    """A continuous centre plus its lattice companions."""

    x_target: np.ndarray
    center: np.ndarray  # real plus-counts
    nearest: np.ndarray  # nearest lattice point (integer plus-counts)
    fiber_size: int
    fiber_log_spread: float  # max - min of log Q̂ over the lattice fiber
    cover_centers: list  # greedy dice cover of the lattice fiber (integer plus-counts)

    def as_dict(self) -> dict:
        return {"x": self.x_target.tolist(), "center": self.center.tolist(), "nearest": self.nearest.tolist(),
                "fiber_size": self.fiber_size, "fiber_log_spread": self.fiber_log_spread,
                "cover_size": len(self.cover_centers)}


def lift_point(x, chain: LatticeChain, rate_q: RateModel, mode: str = "exact") -> LiftedPoint:
    K = lifted_center(x, rate_q, chain.measure)
    lat = chain.lattice
    fiber = chain.nearest_fiber(x)
    idx = np.nonzero(fiber)[0]
    if idx.size == 0:
        raise AssumptionFailure("fiber empty on the lattice; increase n")
    lw = chain.measure.log_weights[idx]
    nearest = lat.counts[np.argmin(np.linalg.norm(lat.counts - K, axis=1))]
    # greedy cover of the fiber by dice centred at max-weight uncovered points
    order = idx[np.argsort(-lw, kind="stable")]
    covered = np.zeros(lat.size, bool)
    table = chain.table
    centers = []
    Yf = counts_to_y(lat.counts[idx], table)
    for i in order:
        if covered[i]:
            continue
        Kc = lat.counts[i].astype(float)
        yc = counts_to_y(Kc, table)
        try:
            _, _, H = rate_hat_and_hessian(yc, rate_q, table, mode, chain.measure)
            _, V = np.linalg.eigh(H)
        except ValueError:
            V = np.eye(table.L)
        inside = np.all(np.abs((Yf - yc) @ V) <= table.n ** -0.5 * (1 + 1e-12), axis=1)
        covered[idx[inside]] = True
        covered[i] = True
        centers.append(lat.counts[i].copy())
        if len(centers) > 10_000:
            break
    return LiftedPoint(np.asarray(x, float), K, nearest, int(idx.size), float(lw.max() - lw.min()), centers)


# ---------------------------------------------------------------------------
# Formulas
# ---------------------------------------------------------------------------

def g_function(Y, z, lam: float, w, n: int):
    """g(Y) = Phi_N(sqrt(n |lambda|) <Y - z, w>) with Phi_N the standard normal CDF."""
    Y = np.asarray(Y, float)
    return ndtr(math.sqrt(n * abs(lam)) * ((Y - np.asarray(z, float)) @ np.asarray(w, float)))


def variational_upper_bound(saddles: Sequence[SaddleData], n: int) -> float:
    """log of (n/4pi) sum_k Q̂(z_k) |D_k| sqrt(pi/2)^|Gamma| |lambda| |prod|^{-1/2} sum_l r_l <e_l, dir>^2."""
    terms = []
    for sd in saddles:
        if not np.all(np.abs(sd.gamma_terms[sd.gamma_mask]) > 0):
            raise AssumptionFailure("degenerate Gamma product")
        terms.append(sd.log_Q + math.log(sd.dice_count_unclipped) + sd.local_log_factor())
    return float(math.log(n / (4 * math.pi)) + logsumexp(terms))


def asymptotic_capacity(saddles: Sequence[SaddleData], n: int) -> float:
    """Asymptotic log capacity; the same expression as the variational bound."""
    return variational_upper_bound(saddles, n)


def valley_mass_asymptotic(minima: Sequence[MinimumData]) -> float:
    """log sum_s Q̂(m_s) |D_s| sqrt(pi/2)^|Gamma_m| |prod gamma|^{-1/2}."""
    return float(logsumexp([m.log_Q + math.log(m.dice_count_unclipped) + m.local_log_factor() for m in minima]))


@dataclass
class Prefactor:
    log_cn: float
    log_prediction: float
    log_valley_asymptotic: float
    exponent: float

    def as_dict(self) -> dict:
        return {"log_c_n": self.log_cn, "log_prediction": self.log_prediction,
                "log_valley_asymptotic": self.log_valley_asymptotic, "n_barrier": self.exponent}


def prefactor_cn(minimum: MinimumData, saddles: Sequence[SaddleData], rate: RateModel, n: int,
                 I_m: float, I_z: float) -> Prefactor:
    """c(n) and the exit-time prediction c(n) exp(n (I(z) - I(m))), all in logs.

    kappa_hat at a centre Y is exp(log Q̂(Y) + n I(pi_2 Y)).
    """
    J_m = minimum.x
    log_kappa_m = minimum.log_Q + n * rate.rate_I(J_m)
    denom = []
    for sd in saddles:
        log_kappa_z = sd.log_Q + n * rate.rate_I(sd.x)
        denom.append(log_kappa_z + sd.local_log_factor())
    log_cn = math.log(4 * math.pi / n) + minimum.local_log_factor() + log_kappa_m - logsumexp(denom)
    expo = n * (I_z - I_m)
    return Prefactor(float(log_cn), float(log_cn + expo), valley_mass_asymptotic([minimum]), float(expo))


# ---------------------------------------------------------------------------
# Maximum-principle bound and the harmonic-approximation diagnostic
# ---------------------------------------------------------------------------

@dataclass
class MaxPrincipleVerdict:
    max_abs: float
    bound: float
    holds: bool
    C: float
    delta: float
    epsilon: float
    theta: float

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def _layer_depth(edge_i, edge_j, N, B0) -> np.ndarray:
    adj = sp.coo_matrix((np.ones(edge_i.size), (edge_i, edge_j)), shape=(N, N)).tocsr()
    depth = sp.csgraph.dijkstra(adj, indices=np.nonzero(B0)[0], min_only=True, unweighted=True)
    return depth


def max_principle_check(F, edge_i, edge_j, weights, B0, C=None, delta=None, epsilon=None,
                        theta=None) -> MaxPrincipleVerdict:
    """Check max|F| <= eps + C delta / theta on a graph with edge weights.

    The graph is the set B (all states indexed 0..N-1) with undirected
    edges listed in both directions. Unspecified constants are measured:
    C as the largest graph distance to B0, delta as max |Delta F| off B0,
    epsilon as max |F| on B0, theta as the smallest edge weight.
    """
    F = np.asarray(F, float)
    N = F.size
    B0 = np.asarray(B0, bool)
    depth = _layer_depth(edge_i, edge_j, N, B0)
    if not np.all(np.isfinite(depth)):
        raise ValueError("a connected component of B does not meet B0")
    weights = np.asarray(weights, float)
    lap = np.zeros(N)
    np.add.at(lap, edge_i, weights * (F[edge_j] - F[edge_i]))
    C = float(depth.max()) if C is None else float(C)
    delta = float(np.max(np.abs(lap[~B0]))) if delta is None else float(delta)
    epsilon = float(np.max(np.abs(F[B0]))) if epsilon is None else float(epsilon)
    theta = float(weights.min()) if theta is None else float(theta)
    mx = float(np.max(np.abs(F)))
    bound = epsilon + C * delta / theta
    return MaxPrincipleVerdict(mx, bound, bool(mx <= bound * (1 + 1e-12) + 1e-300), C, delta, epsilon, theta)


@dataclass
class HarmonicDiagnostic:
    n: int
    scaled_error: float  # n * max over the inner dice of |g - Phi|
    inner_states: int
    outer_states: int
    max_principle: MaxPrincipleVerdict

    def as_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "max_principle"}
        d["max_principle"] = self.max_principle.as_dict()
        return d


def harmonic_diagnostic(sd: SaddleData, chain: LatticeChain, enlarge: float = 2.0) -> HarmonicDiagnostic:
    """Compare g with the harmonic function of the quadratic chain on an enlarged dice.

    Weights Q'(Y) = exp(-(n/2) <Y - c, Ĥ (Y - c)>) (the constant Q̂(z) drops
    out), constant rates r_l, and symmetric midpoint conductances. Boundary
    values on the outer layer are g itself, so epsilon = 0 in the bound.
    """
    table = chain.table
    n = table.n
    lat = chain.lattice
    Y = counts_to_y(lat.counts, table)
    H = sd.V @ np.diag(sd.gammas) @ sd.V.T
    proj = (Y - sd.y) @ sd.V
    half = n ** -0.5
    big = np.all(np.abs(proj) <= enlarge * half * (1 + 1e-12), axis=1)
    inner = np.all(np.abs(proj) <= half * (1 + 1e-12), axis=1)
    idx = np.nonzero(big)[0]
    pos = -np.ones(lat.size, dtype=np.int64)
    pos[idx] = np.arange(idx.size)
    g_all = chain.graph()
    dirs = chain.edge_direction
    keep = big[g_all.edge_i] & big[g_all.edge_j]
    ei, ej, dl = pos[g_all.edge_i[keep]], pos[g_all.edge_j[keep]], dirs[keep]
    Ysub = Y[idx] - sd.y
    mid = 0.5 * (Ysub[ei] + Ysub[ej])
    quad = np.einsum("ei,ij,ej->e", mid, H, mid)
    opp = dl ^ 1
    cond = np.exp(-0.5 * n * quad) * 0.5 * (sd.rates[dl] + sd.rates[opp])
    gval = g_function(Y[idx], sd.y, sd.lam, sd.w, n)
    # outer layer: states of the enlarged dice with a lattice neighbour outside it
    nb_out = np.zeros(lat.size, bool)
    leave = big[g_all.edge_i] & ~big[g_all.edge_j]
    nb_out[g_all.edge_i[leave]] = True
    B0 = nb_out[idx]
    free = np.nonzero(~B0)[0]
    fpos = -np.ones(idx.size, dtype=np.int64)
    fpos[free] = np.arange(free.size)
    deg = np.zeros(idx.size)
    np.add.at(deg, ei, cond)
    r = ~B0[ei]
    inn = r & ~B0[ej]
    Mx = sp.csc_matrix((np.r_[deg[free], -cond[inn]],
                        (np.r_[np.arange(free.size), fpos[ei[inn]]], np.r_[np.arange(free.size), fpos[ej[inn]]])),
                       shape=(free.size,) * 2)
    rhs = np.zeros(free.size)
    bnd = r & B0[ej]
    np.add.at(rhs, fpos[ei[bnd]], cond[bnd] * gval[ej[bnd]])
    phi = gval.copy()
    if free.size:
        phi[free] = spla.splu(Mx).solve(rhs)
    F = gval - phi
    inn_mask = inner[idx]
    verdict = max_principle_check(F, ei, ej, cond, B0)
    return HarmonicDiagnostic(n, float(n * np.max(np.abs(F[inn_mask]))), int(inn_mask.sum()), int(idx.size), verdict)


def dirichlet_of_g(sd: SaddleData, chain: LatticeChain, A, B) -> float:
    """log Dirichlet form of g on the full chain (with g = 1 on A and 0 on B)."""
    Y = counts_to_y(chain.lattice.counts, chain.table)
    g = g_function(Y, sd.y, sd.lam, sd.w, chain.n)
    g[np.asarray(A, bool)] = 1.0
    g[np.asarray(B, bool)] = 0.0
    return log_dirichlet_form(g, chain.graph())


def quadratic_dirichlet_of_g(sd: SaddleData, chain: LatticeChain, width: float = 8.0) -> float:
    """log d'(g): Dirichlet form of g under the quadratic weights around the saddle.

    Weights Q̂(c) exp(-(n/2) <Y - c, Ĥ (Y - c)>) at edge midpoints, constant
    rates r_l, summed over lattice points within ``width`` n^{-1/2} of the
    centre along every eigenvector. This is the lattice sum that the
    closed-form capacity expression approximates by Gaussian integrals.
    """
    table = chain.table
    n = table.n
    Y = counts_to_y(chain.lattice.counts, table)
    H = sd.V @ np.diag(sd.gammas) @ sd.V.T
    region = np.all(np.abs((Y - sd.y) @ sd.V) <= width * n ** -0.5, axis=1)
    g_all = chain.graph()
    keep = region[g_all.edge_i] & region[g_all.edge_j]
    ei, ej, dl = g_all.edge_i[keep], g_all.edge_j[keep], chain.edge_direction[keep]
    mid = 0.5 * (Y[ei] + Y[ej]) - sd.y
    quad = np.einsum("ei,ij,ej->e", mid, H, mid)
    lcond = sd.log_Q - 0.5 * n * quad + np.log(0.5 * (sd.rates[dl] + sd.rates[dl ^ 1]))
    g = g_function(Y, sd.y, sd.lam, sd.w, n)
    d = g[ej] - g[ei]
    nz = d != 0
    return float(logsumexp(lcond[nz] + 2 * np.log(np.abs(d[nz]))) - math.log(2.0))
