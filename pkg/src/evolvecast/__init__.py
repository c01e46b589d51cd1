"""Evolution-aware spatio-temporal traffic forecasting with EMD rehearsal
buffers and elastic weight consolidation."""

from .autodiff import Parameter, Tensor, load_checkpoint, no_grad, save_checkpoint
from .continual import (
    Histogram,
    RehearsalBuffers,
    assemble_training_set,
    build_histogram,
    emd,
    emd_batch,
    score_nodes,
    select_buffers,
)
from .data import (
    EvolutionScenario,
    SeriesTensor,
    generate_scenario,
    load_dataset,
    make_windows,
    normalize,
    save_dataset,
)
from .graph import (
    GraphDelta,
    GraphSnapshot,
    apply_delta,
    build_adjacency,
    build_rescaled_laplacian,
    compute_delta,
    induced_subgraph,
)
from .metrics import MetricReport, mae, mape, rmse
from .model import CastConfig, CastModel
from .runner import run_scenario
from .training import (
    ContinualConfig,
    TrainConfig,
    compute_fisher,
    ewc_penalty,
    huber_loss,
    overall_loss,
    train_continual,
    train_full,
)

__version__ = "0.1.0"
