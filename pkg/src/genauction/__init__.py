"""Desk-scale generative ad auction: enumerable responses, exact mechanisms."""

__version__ = "0.1.0"

from .domain import (
    AdCandidate,
    AuctionContext,
    BidProfile,
    ClickRecord,
    PolicyDistribution,
    ResponseOutcome,
    ResponseSpace,
    enumerate_responses,
)
from .user_model import ScenarioConfig, UserModelParams, sample_clicks, sample_context, true_ctr
from .ctr_model import ClickDataset, PctrModel, bce_gradient, bce_loss, featurize, predict_pctr, train_pctr
from .mechanism import (
    BasePolicy,
    MechanismConfig,
    RewardConfig,
    expected_payment,
    itctr,
    objective,
    optimal_policy,
    realized_payment,
    response_reward,
)
from .irpo import (
    DpoConfig,
    IrpoConfig,
    PolicyParams,
    TrainingHistory,
    build_preference_set,
    dpo_loss_and_gradient,
    log_prob,
    mosaic_select,
    policy_distribution,
    run_irpo,
)
from .agents import AgentSpec, AuctionEnv, best_response, best_response_dynamics, ic_regret, um_utility, vm_objective
from .properties import (
    continuity_sweep,
    monotonicity_sweep,
    optimality_perturbation_test,
    unbiasedness_gap,
)
from .experiment import (
    ExperimentConfig,
    MetricsReport,
    default_config,
    run_equilibrium,
    run_experiment,
    verify_properties,
)
