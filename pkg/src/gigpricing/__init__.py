"""Preference-aware compensation pricing for crowdsourced on-demand platforms."""
from .choice import (
    ChoiceObservation,
    FitConfig,
    MnlEstimate,
    MnlParams,
    acceptance_probabilities,
    compensation_from_probs,
    fit_mnl,
    utility_of,
)
from .core import (
    CompensationDecision,
    ContractViolation,
    EpisodeResult,
    GigWorker,
    Instance,
    PreState,
    Request,
    run_episode,
    step_transition,
)
from .evaluation import EvalReport, evaluate, performance_ratio, tune_grid
from .oracle import full_info_value
from .policies import (
    CollectPolicy,
    FormulaPolicy,
    PercentagePolicy,
    PolicySpec,
    VfaPolicy,
    build_policy,
    sample_perturbation,
)
from .pricing import PricingInput, PricingOutput, lambert_w0, lambert_w0_log, optimal_compensations
from .simgen import SCENARIOS, ScenarioConfig, generate_scenario_set, load_scenario_set, save_scenario_set

__version__ = "0.1.0"
