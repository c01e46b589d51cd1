"""
Inside one forward pass
=======================

A small model forecasts twelve steps for every node.  Passing a ``trace``
dict exposes the spatial and temporal attention matrices, whose rows are
probability distributions.
"""

import numpy as np

from evolvecast import autodiff as ad
from evolvecast.data import EvolutionScenario, generate_scenario, make_windows, normalize
from evolvecast.graph import laplacian_for
from evolvecast.model import CastConfig, CastModel, chebyshev

# Chebyshev polynomials agree with cos(o * arccos x) on [-1, 1].
x = np.linspace(-1, 1, 5)
print("T_3 recurrence ", np.round(chebyshev(3, x), 6))
print("T_3 closed form", np.round(np.cos(3 * np.arccos(x)), 6))

scenario = EvolutionScenario(periods=1, nodes=12, steps=96, steps_per_day=48, features=2, seed=2)
(snapshot, raw), = generate_scenario(scenario).pairs
series = normalize(raw)
inputs, targets = make_windows(series, 12, 12)

config = CastConfig(stacks=2, blocks=2, heads=2, cheb_order=3, in_features=2,
                    spatial_channels=8, attention_channels=8, temporal_filters=8)
model = CastModel(config, seed=0)
lap = laplacian_for(snapshot)

trace = {}
with ad.no_grad():
    pred = model.forward(inputs[:4], lap, trace=trace)
print("inputs", inputs[:4].shape, "-> forecast", pred.shape)
for key in ("spatial", "temporal"):
    attn = trace[key][0]
    print(f"{key} attention {attn.shape}, row sums within",
          float(np.abs(attn.sum(axis=-1) - 1).max()))
