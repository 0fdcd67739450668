"""Preemptive fleet-charging scheduler.

A finite-horizon stochastic program over cohort-aggregated EV charging:
value models are fitted backward over sampled states, dispatch runs the
fitted policy forward under deadline-aware feasible sets, and hindsight
and greedy baselines plus a Monte-Carlo harness quantify the gap.
"""

__version__ = "0.1.0"

from .arrivals import ArrivalModel, ParameterBox, model_for_layout
from .baselines import FcfsResult, SamplePath, SpResult, cumulative_cost, run_fcfs, solve_sp
from .bellman import (
    BellmanResult,
    InnerSolverConfig,
    StageProblem,
    empirical_bellman,
    lipschitz_bound,
    lipschitz_estimate,
    monotonicity_check,
    nonexpansiveness_check,
)
from .config import Scenario, build_scenario, dump_toml, load_scenario, save_config
from .dispatch import DispatchConfig, PathResult, charge_fractions, disaggregate, dispatch_path
from .errors import (
    CheckpointError,
    ConfigError,
    EmptyPolytopeError,
    EvschedError,
    FitError,
    InfeasibleProblemError,
    InfeasibleStageError,
    InstanceTooLargeError,
    NonFiniteObjectiveError,
    PropertyFailureError,
)
from .feasible import ActionPolytope, contains, gamma, gamma_prime, linmin
from .model import (
    BlockLayout,
    CostSchedule,
    FleetState,
    Menu,
    build_layout,
    partial_order_leq,
    stage_cost,
    state_from_vector,
    transition,
    zero_state,
)
from .oracle import ExactOracle, exhaustive_monotonicity, lipschitz_profile
from .rng import substream
from .training import FviConfig, TrainedPolicy, convergence_study, train_value_functions
from .value_models import (
    FeatureMap,
    FitDataset,
    LinearBasisModel,
    MlpModel,
    entry_caps_from_arrivals,
    feature_map_for,
    load_checkpoint,
    sample_states,
    state_box,
)

__all__ = [name for name in dir() if not name.startswith("_")]
