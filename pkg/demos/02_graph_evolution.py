"""
An evolving road network
========================

A synthetic network grows and shrinks between periods.  We diff consecutive
snapshots and look at the spectrum of the rescaled Laplacian that the graph
convolution consumes.
"""

import numpy as np

from evolvecast.data import EvolutionScenario, generate_scenario
from evolvecast.graph import compute_delta, laplacian_for

scenario = EvolutionScenario(periods=3, nodes=40, steps=96, steps_per_day=48, seed=4)
result = generate_scenario(scenario)

for (g_prev, _), (g_next, _) in zip(result.pairs, result.pairs[1:]):
    delta = compute_delta(g_prev, g_next)
    print(f"period {g_prev.period} -> {g_next.period}: {delta.summary()}")

# The rescaled Laplacian maps the normalized spectrum from [0, 2] onto [-1, 1].
snapshot, _ = result.pairs[-1]
lap = laplacian_for(snapshot)
ev = np.linalg.eigvalsh(lap.matrix)
print("lambda_max estimate", round(lap.lambda_max, 6), "converged", lap.converged)
print("spectrum of L_hat spans", round(ev.min(), 6), "to", round(ev.max(), 6))
