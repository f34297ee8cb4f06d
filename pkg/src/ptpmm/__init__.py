"""Clock skew and offset estimation for IEEE 1588 two-way message exchange.

Pipeline: simulate queuing delays through a switch cascade (:mod:`netsim`),
fit delay densities (:mod:`delay_models`), generate exchange timestamps and
evaluate likelihoods (:mod:`exchange`), estimate skew/offset with least
squares, local ML, or minimax-invariant schemes (:mod:`estimators`), and
benchmark everything by Monte-Carlo RMSE (:mod:`harness`).
"""

from .delay_models import (
    DelayModel,
    ExponentialDelay,
    GammaDelay,
    GaussianDelay,
    HistogramDelay,
    KdeDelay,
    SupportInterval,
    fit_empirical,
    load_delay_model,
    save_delay_model,
)
from .errors import (
    DegenerateDesignError,
    DegenerateFitError,
    EmptyPosteriorError,
    ExperimentError,
    InfeasibleStartError,
    PtpmmError,
    UnboundedPosteriorError,
    UnstableLoadError,
)
from .estimators import (
    Estimate,
    GmleEstimator,
    LmleEstimator,
    MinimaxKEstimator,
    MinimaxSEstimator,
    as_timestamp_set,
    gmle,
    lmle,
    minimax_k,
    minimax_s,
)
from .exchange import (
    ClockParams,
    DelayTrace,
    ExchangeSchedule,
    TimestampSet,
    generate_exchange,
    implied_delays,
    load_timestamps,
    log_likelihood_k,
    log_likelihood_s,
    save_timestamps,
    transform_k,
    transform_s,
)
from .harness import (
    ExperimentConfig,
    RmseRow,
    RmseTable,
    emit_csv,
    load_rmse_csv,
    make_sources,
    run_experiment,
)
from .netsim import (
    NetworkConfig,
    SimStats,
    TrafficModel,
    collect_training_trace,
    load_trace,
    save_trace,
    simulate_path_delays,
    traffic_model_by_name,
)
from .quadrature import (
    PosteriorMeans,
    QuadConfig,
    RatioResult,
    integrate_posterior_means,
    integrate_ratio,
    locate_posterior_box,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
