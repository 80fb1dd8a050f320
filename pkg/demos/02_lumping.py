"""
Lumping the spin dynamics onto a small lattice
==============================================

The Metropolis chain on 2^n spin configurations projects exactly onto a
chain over the counts of plus spins per type. This script builds both and
compares them.
"""
import numpy as np

from metastable_hopfield.chain import LatticeChain, SpinChain, detailed_balance_residual, lump_check
from metastable_hopfield.disorder import ensemble_from_table, fixed_type_table
from metastable_hopfield.model import HopfieldModel, random_field_potential
from metastable_hopfield.potential import BoundaryProblem, mean_hitting, solve_harmonic

table = fixed_type_table([(1, 1), (1, -1)], [5, 5])
model = HopfieldModel(table, random_field_potential(2, 0.1), beta=1.5)

lattice = LatticeChain(model)
spin = SpinChain(ensemble_from_table(table), model)
print(f"{spin.graph().n_states} spin states lump onto {lattice.lattice.size} lattice states")

# pushforward of the spin rates and weights, compared edge by edge
print(lump_check(lattice, spin))
print("detailed balance residual (lattice):", detailed_balance_residual(lattice.graph()))

# %%
# Mean time to go from all minus to all plus, computed on both levels.
lat = lattice.lattice
A = np.all(lat.counts == 0, axis=1)
B = np.all(lat.counts == table.counts, axis=1)
idx = spin.lattice_index(lat)
coarse = mean_hitting(solve_harmonic(BoundaryProblem(lattice.graph(), A, B)))
fine = mean_hitting(solve_harmonic(BoundaryProblem(spin.graph(), A[idx], B[idx])))
print(f"lattice: E tau = {coarse.mean:.10e}   spins: E tau = {fine.mean:.10e}")
