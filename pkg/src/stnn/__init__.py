"""Node-level traffic forecasting from local spacetimes.

Modules:
    autodiff  tape-based reverse-mode differentiation on numpy arrays
    context   distance/connectivity tensors and fixed-size local spacetimes
    model     attention + convolution network over one local spacetime
    training  data pipeline, training loop, metrics and baselines
    sim       mesoscopic grid simulator with scheduled closures
    io        dataset formats, adapters and checkpoints
    cli       the ``stnn`` command
"""

from .autodiff import Tensor, adam_step, conv2d_same, finite_diff_check, no_grad, softmax_rows
from .context import (DUMMY, ConnectivityTensor, DistanceTensor, LocalSpacetime, NeighborSet,
                      SensorFeatureTensor, build_local_spacetime, estimate_theta, gaussian_connectivity,
                      select_neighbors)
from .model import ModelConfig, STNNModel, extract_attention
from .training import MetricsReport, Normalizer, TrainConfig, evaluate, train

__version__ = "0.1.0"
