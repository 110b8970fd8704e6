"""Probabilistic dynamic OD demand estimation from multi-day link flows."""

from .behavior import (
    EquilibriumResult,
    RouteChoiceMatrix,
    logit_choice,
    solve_statistical_equilibrium,
    uniform_choice,
)
from .demand import (
    PDOD,
    DemandSample,
    NoiseDraw,
    demand_gradients,
    pdod_from_csv,
    pdod_to_csv,
    sample_demand,
    sample_demand_batch,
    substream,
)
from .distance import (
    DistanceKind,
    GaussianSummary,
    chain_to_samples,
    distance,
    distance_gradient,
    fit_summary,
)
from .dnl import DnlResult, LinkState, link_flows, run_dnl
from .estimator import (
    EstimationConfig,
    EstimationState,
    ForwardTape,
    backward_pass,
    estimate,
    forward_pass,
    load_state,
    optimizer_step,
    save_state,
)
from .evaluate import (
    BottleneckReport,
    EvaluationReport,
    ObservationSet,
    TriangularDemandSpec,
    UniformDemandSpec,
    bottleneck_demo,
    evaluate,
    generate_truth,
    observations_from_csv,
    observations_to_csv,
    r_squared,
    simulate_observations,
)
from .net import (
    Link,
    Network,
    PathTable,
    TimeGrid,
    enumerate_paths,
    flat_index,
    load_network,
    load_paths,
    path_free_flow_times,
)

__version__ = "0.1.0"
