"""
Which nodes changed?
====================

Each surviving node gets a stability score: the earth mover's distance
between histograms of its recent readings before and after an evolution.
The generator plants level shifts on a few nodes, so we can check that the
most changed nodes are exactly the planted ones.
"""

from evolvecast.continual import buffer_capacity, build_histogram, emd, score_nodes, select_buffers
from evolvecast.data import EvolutionScenario, generate_scenario, split_bounds

# Two toy histograms: moving all mass two bins to the right costs 2 bin widths.
h1 = build_histogram([0.1, 0.2, 0.3], bins=3, value_range=(0, 3))
h2 = build_histogram([2.1, 2.2, 2.3], bins=3, value_range=(0, 3))
print("toy EMD", emd(h1, h2))

scenario = EvolutionScenario(periods=2, nodes=50, steps=576, steps_per_day=288, seed=1)
result = generate_scenario(scenario)
(_, x1), (_, x2) = result.pairs
end = split_bounds(scenario.steps)[0]
scores = score_nodes(x1.steps(0, end), x2.steps(0, end), tau=end)

planted = sorted(result.planted_shifts[2])
cap = buffer_capacity(0.15, len(scores))
buffers = select_buffers(scores, cap, max(cap, len(planted)))
print("planted shifts      ", planted)
print("update buffer       ", sorted(buffers.update_nodes))
print("consolidation buffer", sorted(buffers.consolidation_nodes))
print("top scores", [(n, round(s, 2)) for n, s in buffers.update[-5:]])
