"""Local differential privacy accounting with realized Bayesian knowledge gain.

The package tracks how much an adversary actually learns from the outputs of
LDP queries, instead of charging every query its worst-case DP guarantee.

Modules
-------
core        domains, beliefs, statements, and the log-domain likelihood state
mechanisms  randomized response, discretize-and-perturb, LDP regressions
accounting  realized loss, Bayesian privacy filters, odometer, query grouping
dcopt       difference-of-convex branch and bound over box domains
analysis    random-walk expectations and estimator covariance comparisons
cli         experiment harness and command-line interface
"""

from bayesloss.core import (
    Belief,
    BoxDomain,
    DiscreteDomain,
    LikelihoodState,
    Statement,
    knowledge_gain,
    posterior_belief,
    statement_confidence,
)
from bayesloss.mechanisms import (
    DcTerm,
    MechanismSpec,
    RegressionParams,
    dc_decompose,
    linear_mechanism,
    logistic_mechanism,
    mean_estimate,
    perturb_continuous,
    randomized_response,
    regression_log_likelihood,
    rr_log_likelihood,
    sample,
    square_log_decompose,
    truncated_linear_mechanism,
)
from bayesloss.accounting import (
    ACCEPT,
    REJECT,
    ApproxFilterState,
    BasicCompositionFilter,
    ContinuousLedger,
    ContractViolation,
    FilterState,
    OdometerReading,
    QueryRecord,
    approx_filter,
    approx_filter_check,
    approx_submit,
    bayesian_filter_check,
    dc_bound_oracle,
    discrete_bound_oracle,
    filter_execute,
    fresh_filter,
    grouped_loss_upper_bound,
    odometer,
    realized_loss,
    record_log_range,
    simplified_filter_check,
    submit,
)
from bayesloss.dcopt import (
    BnbNode,
    BnbResult,
    DcObjective,
    Envelope,
    EnvelopeError,
    Infeasible,
    LossBoundsResult,
    YBox,
    branch,
    branch_and_bound_min,
    concave_envelope,
    dca_local_minimize,
    realized_loss_bounds,
    solve_convex_subproblem,
)
from bayesloss.analysis import (
    MarkovResult,
    TransitionModel,
    WalkConfig,
    build_transition_model,
    composition_estimator,
    covariance_ratio,
    expected_queries_closed_form,
    expected_queries_fixed_budget,
    expected_queries_markov,
    forward_probability_matrix,
    inverse_probability_matrix,
    markov_expectation,
    simulate_walk_steps,
    state_space_size,
)
from bayesloss.cli import (
    ExperimentConfig,
    TraceRow,
    estimator_compare,
    healthcare_scenario,
    meanvar_scenario,
    percentile_curve,
    run_composition_experiment,
    walk_expected_report,
)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
