"""Decentralized proximal stochastic recursive momentum (DEEPSTORM) simulator."""
from .errors import CheckpointError, ConfigError, DeepstormError, DivergenceError, TopologyError
from .metrics import TraceRecord, sparsity_pct, stationarity_def2, stationarity_experiment
from .optimizer import (
    EstimatorConfig,
    RunConfig,
    Schedule,
    estimate_vtilde,
    init,
    run,
    run_dsgt,
    schedule_values,
    step,
)
from .problems import ProblemInstance, make_logistic_l1, make_quadratic
from .proximal import Regularizer, prox, prox_grad_map, prox_step
from .topology import (
    ChebyshevOperator,
    Graph,
    MixingMatrix,
    build_graph,
    chebyshev_rounds_for_target,
    laplacian_mixing,
    mix,
    spectral_gap,
    uniform_ring_mixing,
)

__version__ = "0.1.0"
