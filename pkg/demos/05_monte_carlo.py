"""
Simulated exit times against the exact answer
=============================================

Start trajectories from the equilibrium measure on the shallow well and
count steps until the deep well is reached. The sample mean should match
the potential-theoretic value and tau / mean should look exponential.
"""
import math

import numpy as np

from metastable_hopfield.chain import LatticeChain
from metastable_hopfield.disorder import fixed_type_table
from metastable_hopfield.mc import simulate_hits
from metastable_hopfield.model import HopfieldModel, hopfield_potential
from metastable_hopfield.potential import BoundaryProblem, mean_hitting, solve_harmonic

n = 16
n0 = math.floor(0.45 * n + 0.5)
chain = LatticeChain(HopfieldModel(fixed_type_table([(-1,), (1,)], [n0, n - n0]), hopfield_potential(1), 1.0))
g = chain.graph()
A, B = chain.nearest_fiber([-0.9575]), chain.nearest_fiber([0.9575])
exact = mean_hitting(solve_harmonic(BoundaryProblem(g, A, B)))

res = simulate_hits(g, B, nu=exact.nu, trajectories=2000, seed=1)
print(f"exact {exact.mean:.1f}   MC {res.mean:.1f} +- {res.stderr:.1f}   95% batch CI {res.batch_ci}")
print("KS against Exp(1):", res.ks_exponential())

q = np.quantile(res.samples / res.mean, [0.25, 0.5, 0.75])
print("quartiles of tau/mean:", q, " Exp(1):", -np.log([0.75, 0.5, 0.25]))
