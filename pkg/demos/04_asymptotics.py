"""
How fast does the asymptotic capacity kick in?
===============================================

Compare the exact capacity with the saddle-point asymptotics on the
benchmark model for growing n, for every choice of Hessian, lattice step
normalisation and gate direction. Exactly one choice converges.
"""
from metastable_hopfield.harness import pipeline
from metastable_hopfield.harness.presets import preset

cfg = preset("benchmark-1d", n=[50, 100, 200, 400])
report, rows = pipeline.sweep(cfg)

print("convergent:", report["summary"]["convergent_configurations"])
print(f"{'n':>5} {'exact/asym':>11} {'prediction/exact':>17} {'valley':>8}")
for r in report["instances"]:
    v = r["asymptotics"]["variants"]["exact/step/w"]
    print(f"{r['n']:5d} {v['ratio_capacity']:11.4f} {v['ratio_prediction']:17.4f} {v['ratio_valley']:8.4f}")

# %%
# The other variants, for contrast, at the largest n.
last = report["instances"][-1]["asymptotics"]["variants"]
for name, v in last.items():
    print(f"{name:14s} exact/asym = {v.get('ratio_capacity', float('nan')):.4g}")
