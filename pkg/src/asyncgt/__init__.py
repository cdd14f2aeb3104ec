"""Asynchronous decentralized SGD with push-sum gradient tracking.

A deterministic event-driven simulator for gossip optimization on directed
graphs: agents take noisy gradient steps, average possibly stale neighbor
publications under row-stochastic weights, and track the network-wide
gradient sum with column-stochastic mass splitting made delay-tolerant by
cumulative counters.
"""

from .digraph import (
    Digraph,
    MixingPair,
    NotStronglyConnectedError,
    build_mixing,
    generate_connectivity,
    generate_ring_plus_random,
    is_strongly_connected,
)
from .oracles import (
    LogisticOracle,
    ObjectiveOracle,
    QuadraticOracle,
    SampleDraw,
    SigmoidWellOracle,
    SingularSystemError,
    make_logistic,
    make_quadratic,
    make_sigmoid_wells,
)
from .scheduler import (
    ActivationPolicy,
    DelayModel,
    ScheduleEvent,
    generate_trace,
    max_observed_delay,
    next_event,
    verify_coverage,
    verify_delay_bound,
)
from .protocol import (
    AgentState,
    EventRecord,
    MissingPublicationError,
    NetworkStore,
    Publication,
    TrackingProtocol,
    init_states,
)
from .metrics import (
    MetricsSnapshot,
    WeightChannel,
    WeightChannelColdError,
    collect_snapshot,
    consensus_error,
    gradient_norm_error,
    mass_residual,
    merit,
    tracking_error,
)
from .config import ConfigError, ExperimentConfig, StepSchedule, build_steps
from .runner import (
    DegenerateSeriesError,
    RunResult,
    fit_rate,
    replay,
    run_experiment,
    run_replicate,
    run_sgd_reference,
    sweep,
)

__version__ = "0.1.0"
