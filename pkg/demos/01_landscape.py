"""
From random patterns to a free-energy landscape
================================================

Sample a disorder, group sites into types, and look at the rate function
of the order parameter: its critical points and the gate that separates
the shallow well from the deeper one.
"""
import numpy as np

from metastable_hopfield.asymptotics import find_critical_points, find_gate
from metastable_hopfield.disorder import PatternDistribution, fixed_type_table, sample_patterns, type_decomposition
from metastable_hopfield.ldp import RateModel
from metastable_hopfield.model import HopfieldModel, hopfield_potential, random_field_potential

# %%
# One pattern with values -1 / +1 drawn with probabilities 0.45 / 0.55.
# Sites with the same pattern value are exchangeable, so the disorder
# reduces to a table of types and counts.
dist = PatternDistribution((-1, 1), (0.45, 0.55))
ensemble = sample_patterns([dist], n=200, seed=3)
table = type_decomposition(ensemble)
print("types:", table.types.ravel(), "counts:", table.counts)

# %%
# The rate function I(x) = -beta v(x) + L*(x) + const for v(x) = x^2.
model = HopfieldModel(table, hopfield_potential(1), beta=1.0)
rate = RateModel.quenched(model)
xs = np.linspace(-0.99, 0.99, 9)
for x in xs:
    print(f"  I({x:+.3f}) = {rate.rate_I([x]):.5f}")

# %%
# Critical points come from Newton's method on the dual problem, started
# from a grid and from a descent run. The Hessian classifies each one.
cps = find_critical_points(rate)
for c in cps:
    print(f"{c.kind:8s} x = {c.x[0]:+.6f}  I = {c.value:.6f}  eigenvalues = {c.eigenvalues}")

# %%
# The two minima tie: with values +-1 the substitution s_i -> xi_i s_i turns
# this model into Curie-Weiss, whatever the counts. The tie is broken by
# taking the lexicographically smallest minimum as the start.
#
# The metastable start m is the higher minimum. The gate is the lowest
# level at which m connects to a deeper minimum; the saddles on that level
# are the optimal passes.
minima = [c for c in cps if c.kind == "minimum"]
m = max(minima, key=lambda c: (c.value, tuple(-c.x)))
gate = find_gate(cps, rate, m)
print("start minimum:", m.x, "gate value:", gate.gate_value, "barrier:", gate.barrier)
print("saddles:", [z.x.tolist() for z in gate.Z], "targets:", [c.x.tolist() for c in gate.M])

# %%
# A random field on a second pattern, with uneven type counts, does break
# the symmetry: one well is now strictly deeper.
uneven = HopfieldModel(fixed_type_table([(1, 1), (1, -1)], [24, 16]), random_field_potential(2, 0.1), beta=1.5)
rate2 = RateModel.quenched(uneven)
for c in find_critical_points(rate2):
    print(f"{c.kind:8s} x = {np.round(c.x, 5)}  I = {c.value:.6f}")
