"""
Two symmetric passes
====================

A two-dimensional model that is symmetric under exchanging its two pattern
types has two mirror-image saddles between the wells. The capacity is the
sum of their contributions, and each half of the lattice carries half of it.
"""
from metastable_hopfield.harness import pipeline
from metastable_hopfield.harness.presets import preset

n = 200
cfg = preset("two-gate", n=n)
inst = pipeline.Instance(cfg, n)
print("saddles:", [z.x.round(4).tolist() for z in inst.gate.Z])

asym = pipeline.asymptotics_report(cfg, n, inst=inst)
mirror = pipeline.mirror_additivity(inst, [0, 1])
print("exact / two-saddle sum:", asym["variants"]["exact/step/w"]["ratio_capacity"])
print("full / (2 x half):     ", mirror["ratio_full_to_twice_half"])
print("sum / (2 x half):      ", mirror["ratio_sum_to_twice_half"])
