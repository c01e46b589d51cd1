"""
Retraining from scratch versus continual transfer
=================================================

The full scenario trains a fresh model every period.  The continual scenario
trains period 1 once, then moves the model forward by retraining only on new,
affected and buffered nodes, with an elastic weight consolidation penalty.
This takes roughly a minute on one core.
"""

import warnings

from evolvecast.data import EvolutionScenario, generate_scenario
from evolvecast.model import CastConfig
from evolvecast.runner import run_scenario
from evolvecast.training import ContinualConfig, TrainConfig

warnings.simplefilter("ignore", RuntimeWarning)

scenario = EvolutionScenario(periods=3, nodes=30, steps=288, steps_per_day=96, features=2,
                             noise=2.0, seed=3)
pairs = generate_scenario(scenario).pairs
model = CastConfig(stacks=1, blocks=2, heads=2, cheb_order=2, in_features=2,
                   spatial_channels=8, attention_channels=8, temporal_filters=8)
train = TrainConfig(max_epochs=15, patience=15, batch_size=32)
cont = ContinualConfig(fisher_samples=8, steps_per_day=96)

runs = {name: run_scenario(pairs, name, model, train, cont, seed=0) for name in ("full", "continual")}

print(f"{'scenario':<10} {'period':>6} {'nodes':>6} {'s/epoch':>8}  MAE@15/30/60 min")
for name, run in runs.items():
    for k, res in run.results.items():
        rows = run.report.select(period=k)
        maes = " ".join(f"{r.mae:6.2f}" for r in rows)
        nodes = rows[0].nodes
        print(f"{name:<10} {k:>6} {nodes:>6} {res.per_epoch_seconds:8.3f}  {maes}")
