"""Exact lumped Metropolis chain on the Y-lattice and the spin-level chain.

Directions are indexed by l = 2a (a "+ -> -" flip at type a, lowering
k_a) and l = 2a + 1 (a "- -> +" flip, raising k_a). The step vector e_l in
Y-coordinates has two non-zero entries of size 1/n and norm sqrt(2)/n.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.special import logsumexp

from .disorder import PatternEnsemble, TypeTable, type_decomposition
from .ldp import LumpedMeasure
from .model import (DEFAULT_STATE_BUDGET, HopfieldModel, Lattice, LatticePoint, lift_counts,
                    order_params, project_counts, site_types)


@dataclass(frozen=True)
class ReversibleGraph:
    """A discrete-time reversible chain in log form.

    ``log_weights`` are the (normalised) stationary log-weights; each
    directed edge (i -> j) carries the log transition probability. The
    holding probability of a state is one minus its out-probabilities.
    """

    log_weights: np.ndarray
    edge_i: np.ndarray
    edge_j: np.ndarray
    edge_log_rate: np.ndarray
    hold: np.ndarray | None = None

    @property
    def n_states(self) -> int:
        return self.log_weights.shape[0]

    def out_rates(self) -> np.ndarray:
        out = np.zeros(self.n_states)
        np.add.at(out, self.edge_i, np.exp(self.edge_log_rate))
        return out

    def holding(self) -> np.ndarray:
        if self.hold is not None:
            return self.hold
        return 1.0 - self.out_rates()

    def log_conductance(self) -> np.ndarray:
        return self.log_weights[self.edge_i] + self.edge_log_rate

    def restrict(self, mask) -> "ReversibleGraph":
        """Sub-chain on ``mask``: edges leaving the set become holding mass."""
        mask = np.asarray(mask, bool)
        new = -np.ones(self.n_states, dtype=np.int64)
        new[mask] = np.arange(mask.sum())
        keep = mask[self.edge_i] & mask[self.edge_j]
        hold = self.holding().copy()
        leave = mask[self.edge_i] & ~mask[self.edge_j]
        np.add.at(hold, self.edge_i[leave], np.exp(self.edge_log_rate[leave]))
        return ReversibleGraph(self.log_weights[mask], new[self.edge_i[keep]], new[self.edge_j[keep]],
                               self.edge_log_rate[keep], hold[mask])

    def transition_matrix(self):
        P = coo_matrix((np.exp(self.edge_log_rate), (self.edge_i, self.edge_j)),
                       shape=(self.n_states, self.n_states)).tocsr()
        P = P + coo_matrix((self.holding(), (np.arange(self.n_states), np.arange(self.n_states))),
                           shape=P.shape).tocsr()
        return P

    def key(self) -> tuple:
        return (self.log_weights.tobytes(), self.edge_i.tobytes(), self.edge_j.tobytes(),
                self.edge_log_rate.tobytes())


def detailed_balance_residual(graph: ReversibleGraph) -> float:
    """max over edges of |log Q(i) + log r(i,j) - log Q(j) - log r(j,i)| / scale."""
    n = graph.n_states
    code = graph.edge_i * n + graph.edge_j
    rev = graph.edge_j * n + graph.edge_i
    order = np.argsort(code)
    pos = np.searchsorted(code[order], rev)
    if np.any(pos >= code.size) or np.any(code[order][np.minimum(pos, code.size - 1)] != rev):
        return np.inf  # an edge without its reverse
    back = order[pos]
    fwd = graph.log_weights[graph.edge_i] + graph.edge_log_rate
    bwd = graph.log_weights[graph.edge_j] + graph.edge_log_rate[back]
    scale = np.maximum(1.0, np.maximum(np.abs(fwd), np.abs(bwd)))
    return float(np.max(np.abs(fwd - bwd) / scale)) if fwd.size else 0.0


def is_irreducible(graph: ReversibleGraph) -> bool:
    A = coo_matrix((np.ones(graph.edge_i.size), (graph.edge_i, graph.edge_j)),
                   shape=(graph.n_states, graph.n_states))
    ncomp, _ = connected_components(A, directed=False)
    return ncomp == 1


def enumerate_lattice(table: TypeTable, budget: int = DEFAULT_STATE_BUDGET) -> Lattice:
    return Lattice(table, budget)


class LatticeChain:
    """Lumped Metropolis chain for a quenched model.

    Per-state rates are recomputed on demand by :meth:`rates`; the edge
    arrays used by the solvers are built once in :meth:`graph`.
    """

    def __init__(self, model: HopfieldModel, budget: int = DEFAULT_STATE_BUDGET):
        self.model = model
        self.table = model.table
        self.lattice = Lattice(model.table, budget)
        self.measure = LumpedMeasure(model, self.lattice)
        self._graph = None
        self._direction = None

    @property
    def n(self) -> int:
        return self.table.n

    @property
    def n_directions(self) -> int:
        return self.table.L

    def step_vectors(self) -> np.ndarray:
        """(L, L) matrix whose column l is e_l in Y-coordinates."""
        Lq = self.table.L
        E = np.zeros((Lq, Lq))
        for a in range(self.table.n_types):
            E[2 * a, 2 * a], E[2 * a + 1, 2 * a] = -1.0 / self.n, 1.0 / self.n
            E[:, 2 * a + 1] = -E[:, 2 * a]
        return E

    def rates(self, Y) -> tuple[np.ndarray, float]:
        """Per-direction transition probabilities and holding probability at Y."""
        K = np.asarray(Y.counts if isinstance(Y, LatticePoint) else Y, dtype=np.int64)
        t = self.table
        v = self.model.potential.value
        x0 = project_counts(K, t)
        v0 = v(x0)
        out = np.zeros(t.L)
        hold = 0.0
        for a in range(t.n_types):
            for sign, l in ((-1, 2 * a), (1, 2 * a + 1)):
                k = K[a] + sign
                if not 0 <= k <= t.counts[a]:
                    continue
                K2 = K.copy()
                K2[a] = k
                base = K[a] if sign < 0 else t.counts[a] - K[a]
                dv = self.n * self.model.beta * (v0 - v(project_counts(K2, t)))
                out[l] = base / self.n * np.exp(-max(dv, 0.0))
                hold += base / self.n * -np.expm1(-max(dv, 0.0))
        return out, hold

    def graph(self) -> ReversibleGraph:
        if self._graph is None:
            self._graph, self._direction = self._build()
        return self._graph

    @property
    def edge_direction(self) -> np.ndarray:
        self.graph()
        return self._direction

    def _build(self):
        t, lat = self.table, self.lattice
        K = lat.counts
        vv = self.model.potential.value(lat.x)
        I, J, LR, D = [], [], [], []
        hold = np.zeros(lat.size)
        for a in range(t.n_types):
            for sign, l in ((-1, 2 * a), (1, 2 * a + 1)):
                kk = K[:, a] + sign
                i = np.nonzero((kk >= 0) & (kk <= t.counts[a]))[0]
                j = i + sign * lat.strides[a]
                base = K[i, a] if sign < 0 else t.counts[a] - K[i, a]
                dv = self.n * self.model.beta * (vv[i] - vv[j])
                LR.append(np.log(base / self.n) - np.maximum(dv, 0.0))
                # rejected part of the proposal, so that rates + holding sum to 1 without cancellation
                np.add.at(hold, i, base / self.n * -np.expm1(-np.maximum(dv, 0.0)))
                I.append(i)
                J.append(j)
                D.append(np.full(i.size, l, dtype=np.int8))
        g = ReversibleGraph(self.measure.log_weights, np.concatenate(I), np.concatenate(J), np.concatenate(LR), hold)
        return g, np.concatenate(D)

    def states_at(self, x, tol: float = 0.0) -> np.ndarray:
        """Boolean mask of the fiber pi_2^{-1}(x) (within ``tol`` in sup-norm)."""
        return np.all(np.abs(self.lattice.x - np.asarray(x, float)) <= tol + 1e-15, axis=1)

    def nearest_fiber(self, x) -> np.ndarray:
        """Mask of all states whose X equals the lattice X value closest to x."""
        d = np.max(np.abs(self.lattice.x - np.asarray(x, float)), axis=1)
        num = self.lattice.x_numerators()
        target = num[np.argmin(d)]
        return np.all(num == target, axis=1)


# ---------------------------------------------------------------------------
# Spin level
# ---------------------------------------------------------------------------

SPIN_LIMIT = 14


class SpinChain:
    """Metropolis single-flip chain on {-1, +1}^n, enumerated exhaustively."""

    def __init__(self, ensemble: PatternEnsemble, model: HopfieldModel, max_n: int = SPIN_LIMIT):
        n = ensemble.n
        if n > max_n:
            raise ValueError(f"spin enumeration limited to n <= {max_n}, got {n}")
        if type_decomposition(ensemble).key() != model.table.key():
            raise ValueError("ensemble and model disorder do not match")
        self.ensemble = ensemble
        self.model = model
        self.n = n
        codes = np.arange(2 ** n, dtype=np.int64)
        self.spins = np.where((codes[:, None] >> np.arange(n)) & 1, 1, -1).astype(np.int8)
        self.x = order_params(self.spins, ensemble)
        v = model.potential.value(self.x)
        logw = n * model.beta * v
        self.log_weights = logw - logsumexp(logw)
        self.site_type = site_types(ensemble, model.table)
        self.plus_counts = lift_counts(self.spins, self.site_type, model.table.n_types)
        I = np.repeat(codes, n)
        site = np.tile(np.arange(n), codes.size)
        Jn = I ^ (1 << site)
        dv = n * model.beta * (v[I] - v[Jn])
        self.edge_i, self.edge_j, self.edge_site = I, Jn, site
        self.edge_log_rate = -np.log(n) - np.maximum(dv, 0.0)
        self.hold = np.zeros(codes.size)
        np.add.at(self.hold, I, -np.expm1(-np.maximum(dv, 0.0)) / n)

    def graph(self) -> ReversibleGraph:
        return ReversibleGraph(self.log_weights, self.edge_i, self.edge_j, self.edge_log_rate, self.hold)

    def lattice_index(self, lattice: Lattice) -> np.ndarray:
        return self.plus_counts @ lattice.strides


def lump_check(chain: LatticeChain, spin: SpinChain) -> dict:
    """Compare the pushforward of the spin chain with the lattice rates.

    Returns the maximal relative discrepancy of the induced transition
    probabilities and of the lumped weights.
    """
    lat = chain.lattice
    N = lat.size
    iy = spin.lattice_index(lat)
    mu = np.exp(spin.log_weights)
    Q = np.bincount(iy, weights=mu, minlength=N)
    Qhat = np.exp(chain.measure.log_weights)
    weight_err = float(np.max(np.abs(Q - Qhat) / Qhat))
    src, dst = iy[spin.edge_i], iy[spin.edge_j]
    flux = np.bincount(src * N + dst, weights=mu[spin.edge_i] * np.exp(spin.edge_log_rate), minlength=N * N)
    g = chain.graph()
    lat_rate = np.exp(g.edge_log_rate)
    induced = flux[g.edge_i * N + g.edge_j] / Q[g.edge_i]
    rate_err = float(np.max(np.abs(induced - lat_rate) / lat_rate))
    # no induced transitions outside the lattice edge set (besides holding)
    mask = np.ones(N * N, bool)
    mask[g.edge_i * N + g.edge_j] = False
    mask[np.arange(N) * N + np.arange(N)] = False
    stray = float(flux[mask].max()) if mask.any() else 0.0
    return {"rate_rel_err": rate_err, "weight_rel_err": weight_err, "stray_flux": stray}
