"""Monte Carlo hitting times on a reversible graph.

All trajectories advance in lockstep as numpy arrays. Trajectory k draws
its uniforms from its own Philox stream (spawned from the run seed), read
in blocks, so results do not depend on how many other trajectories run.
Holding steps are simulated explicitly; tau counts chain steps.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .chain import ReversibleGraph

log = logging.getLogger(__name__)


class StepBudgetExceeded(RuntimeError):
    pass


@dataclass
class McResult:
    samples: np.ndarray  # hitting times of finished trajectories
    censored: np.ndarray  # trajectory ids that hit the step budget
    mean: float
    stderr: float
    batch_ci: tuple
    seed: int

    @property
    def n_finished(self) -> int:
        return int(self.samples.size)

    def ks_exponential(self):
        """KS test of tau / mean(tau) against Exp(1)."""
        x = self.samples / self.samples.mean()
        return stats.kstest(x, "expon")

    def as_dict(self) -> dict:
        ks = self.ks_exponential()
        return {"trajectories": int(self.samples.size + self.censored.size), "finished": self.n_finished,
                "censored": int(self.censored.size), "mean": self.mean, "stderr": self.stderr,
                "batch_ci": list(self.batch_ci), "ks_statistic": float(ks.statistic),
                "ks_pvalue": float(ks.pvalue), "seed": self.seed}


def transition_tables(graph: ReversibleGraph):
    """Per-state cumulative probabilities and targets, holding last.

    Returns ``cum`` (N, d+1) and ``nbr`` (N, d+1) with d the max out-degree;
    unused slots repeat the holding entry with zero width.
    """
    N = graph.n_states
    order = np.lexsort((graph.edge_j, graph.edge_i))
    I, J = graph.edge_i[order], graph.edge_j[order]
    P = np.exp(graph.edge_log_rate[order])
    deg = np.bincount(I, minlength=N)
    d = int(deg.max()) if deg.size else 0
    start = np.r_[0, np.cumsum(deg)[:-1]]
    slot = np.arange(I.size) - start[I]
    probs = np.zeros((N, d + 1))
    nbr = np.repeat(np.arange(N)[:, None], d + 1, axis=1)
    probs[I, slot] = P
    nbr[I, slot] = J
    probs[:, d] = graph.holding()
    cum = np.cumsum(probs, axis=1)
    cum[:, -1] = np.inf  # absorb round-off: the last outcome takes the remainder
    return cum, nbr


def simulate_hits(graph: ReversibleGraph, target, start=None, nu=None, trajectories: int = 2000,
                  seed: int = 0, max_steps: int = 10**8, block: int = 4096, batches: int = 20,
                  tables=None) -> McResult:
    """Sample tau_target from a fixed start state or an initial law nu.

    Trajectories still running after ``max_steps`` are censored (reported,
    excluded from the estimate).
    """
    N = graph.n_states
    target = np.asarray(target, bool)
    if target.shape != (N,) or not target.any():
        raise ValueError("target must be a non-empty boolean mask")
    if (start is None) == (nu is None):
        raise ValueError("give exactly one of start or nu")
    seq = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF)
    init_ss, *traj_ss = seq.spawn(trajectories + 1)
    if nu is not None:
        nu = np.asarray(nu, float)
        cdf = np.cumsum(nu / nu.sum())
        u0 = np.random.Generator(np.random.Philox(init_ss)).random(trajectories)
        state = np.minimum(np.searchsorted(cdf, u0, side="right"), N - 1)
    else:
        state = np.full(trajectories, int(start))
    cum, nbr = tables if tables is not None else transition_tables(graph)
    gens = [np.random.Generator(np.random.Philox(s)) for s in traj_ss]
    tau = np.zeros(trajectories, dtype=np.int64)
    active = np.nonzero(~target[state])[0]
    buf = np.empty((trajectories, block))
    ptr = block
    step = 0
    while active.size and step < max_steps:
        if ptr == block:
            for k in active:
                buf[k] = gens[k].random(block)
            ptr = 0
        u = buf[active, ptr]
        ptr += 1
        s = state[active]
        choice = (u[:, None] >= cum[s]).sum(axis=1)
        state[active] = nbr[s, choice]
        step += 1
        hit = target[state[active]]
        if hit.any():
            tau[active[hit]] = step
            active = active[~hit]
    censored = active
    done = np.setdiff1d(np.arange(trajectories), censored)
    samples = tau[done].astype(float)
    if censored.size:
        log.warning("%d trajectories censored at %d steps", censored.size, max_steps)
    if samples.size == 0:
        raise StepBudgetExceeded(f"no trajectory reached the target within {max_steps} steps")
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(samples.size)) if samples.size > 1 else np.inf
    # batch means on log scale for an asymmetric interval
    nb = min(batches, samples.size)
    bm = np.array([b.mean() for b in np.array_split(samples, nb)])
    if nb > 1 and np.all(bm > 0):
        lb = np.log(bm)
        half = stats.t.ppf(0.975, nb - 1) * lb.std(ddof=1) / math.sqrt(nb)
        ci = (float(np.exp(lb.mean() - half)), float(np.exp(lb.mean() + half)))
    else:
        ci = (0.0, float("inf")) if mean > 0 else (0.0, 0.0)
    return McResult(samples, censored, mean, se, ci, int(seed))


def refuse_if_too_long(predicted_mean: float, trajectories: int, step_budget: float) -> None:
    """Reject runs whose predicted total number of steps exceeds the budget."""
    if predicted_mean * trajectories > step_budget:
        raise StepBudgetExceeded(
            f"predicted {predicted_mean:.3g} steps x {trajectories} trajectories exceeds budget {step_budget:.3g}")
