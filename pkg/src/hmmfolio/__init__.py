"""Portfolio construction under a hidden-Markov market model.

Closed-form active/passive portfolio optimization with latent regimes:
simulation, exact posterior filtering, penalized growth-optimal
allocation, EM estimation with state-count selection, and a walk-forward
backtesting harness.
"""

from .allocation import (
    EQUAL_WEIGHT,
    PortfolioRule,
    PreferenceSpec,
    decompose,
    gop,
    modified_market,
    mqp,
    optimal_portfolio,
    optimal_portfolio_path,
    performance_criterion,
    portfolio_growth_rate,
    posterior_average_portfolio,
)
from .backtest import (
    BacktestReport,
    BacktestSpec,
    calibrate_zeta,
    gain_loss_ratio,
    gbm_baseline_fit,
    metrics,
    run_backtests,
)
from .errors import (
    DecompositionUnavailableError,
    EstimationError,
    FilterDegenerateError,
    GeneratorFitError,
    HmmfolioError,
    InputError,
    ModelError,
    SingularPenaltyError,
)
from .estimation import (
    EmConfig,
    EmResult,
    em_fit,
    information_criteria,
    nearest_generator,
    select_states,
    viterbi,
)
from .filtering import FilterState, filter_path, filter_step, init_filter
from .market import TRADING_DT, HmmModel, PricePath, simulate_path

__version__ = "0.1.0"

__all__ = [
    "TRADING_DT", "HmmModel", "PricePath", "simulate_path",
    "FilterState", "init_filter", "filter_step", "filter_path",
    "PortfolioRule", "PreferenceSpec", "EQUAL_WEIGHT",
    "optimal_portfolio", "optimal_portfolio_path", "gop", "mqp",
    "decompose", "posterior_average_portfolio", "modified_market",
    "portfolio_growth_rate", "performance_criterion",
    "EmConfig", "EmResult", "em_fit", "viterbi", "select_states",
    "information_criteria", "nearest_generator",
    "BacktestSpec", "BacktestReport", "run_backtests", "metrics",
    "gain_loss_ratio", "calibrate_zeta", "gbm_baseline_fit",
    "HmmfolioError", "InputError", "ModelError", "FilterDegenerateError",
    "SingularPenaltyError", "DecompositionUnavailableError",
    "EstimationError", "GeneratorFitError",
]
