"""
Capacities and exit times by potential theory
=============================================

Solve the Dirichlet problem for the equilibrium potential between the
shallow and the deep well of a one-dimensional model, then read off the
capacity, the equilibrium measure and the mean exit time.
"""
import math

import numpy as np

from metastable_hopfield.chain import LatticeChain
from metastable_hopfield.disorder import fixed_type_table
from metastable_hopfield.model import HopfieldModel, hopfield_potential
from metastable_hopfield.potential import (BoundaryProblem, capacity_forms, first_passage_times, mean_hitting,
                                           path_closed_form, solve_harmonic)

n = 200
n0 = math.floor(0.45 * n + 0.5)
model = HopfieldModel(fixed_type_table([(-1,), (1,)], [n0, n - n0]), hopfield_potential(1), 1.0)
chain = LatticeChain(model)
g = chain.graph()
A = chain.nearest_fiber([-0.9575])
B = chain.nearest_fiber([0.9575])

sol = solve_harmonic(BoundaryProblem(g, A, B))
print(sol.stats)

# The four ways of computing the capacity should agree to near machine precision.
forms = capacity_forms(sol)
print(forms, "spread:", forms.max_rel_spread)

hr = mean_hitting(sol)
print(f"log cap = {hr.log_capacity:.6f}, E_nu tau = {hr.mean:.6e} steps")

# %%
# Cross-check against first-passage times from every state, averaged over nu.
t = first_passage_times(g, B)
print("sum nu t =", float(np.dot(hr.nu, t)))

# %%
# With a single type the lattice is a path and the series-resistance formula
# gives the exact capacity.
cw = LatticeChain(HopfieldModel(fixed_type_table([(1,)], [n]), hopfield_potential(1), 1.0)).graph()
log_cap, _ = path_closed_form(cw, 0, n)
a = np.zeros(n + 1, bool)
a[0] = True
b = np.zeros(n + 1, bool)
b[n] = True
print("closed form:", log_cap, " solver:", mean_hitting(solve_harmonic(BoundaryProblem(cw, a, b))).log_capacity)
