"""Distances between laws through their characteristic functions.

A point mass has |mu_hat| = 1 everywhere, so under the rational weight
(1 + |y|)^-2 its squared norm is the weight's total mass, 2.  Two nearby point
masses are close, and the distance between two empirical laws is bounded by
sqrt(pi) times the mean squared gap of any coupling of the samples.
"""

import numpy as np

from mfsc.measures import (LAW_BOUND_C0, AtomicMeasure, FourierWeight, law_distance_sq,
                           measure_norm_sq)

for x0 in (0.0, 1.0, -3.0):
    print(f"||delta_{x0:+.0f}||^2 = {measure_norm_sq(AtomicMeasure.dirac(x0), self_check=True):.6f}")

for h in (1.0, 0.1, 0.01):
    d = measure_norm_sq(AtomicMeasure.dirac(0.0) - AtomicMeasure.dirac(h))
    print(f"||delta_0 - delta_{h}||^2 = {d:.3e}")

rng = np.random.default_rng(0)
x1 = rng.normal(size=1000)
gauss = FourierWeight.gaussian()
print("\ncoupled samples      law distance^2   sqrt(pi) E[(x1 - x2)^2]")
for name, x2 in [("shift by 0.1", x1 + 0.1), ("scale by 2", 2 * x1),
                 ("independent noise", x1 + rng.normal(scale=0.5, size=x1.size))]:
    lhs = law_distance_sq(x1, x2, gauss)
    print(f"{name:20s} {lhs:14.5f}   {LAW_BOUND_C0 * np.mean((x1 - x2) ** 2):10.5f}")
