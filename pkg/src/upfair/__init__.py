"""Utility proportional-fair bandwidth allocation toolkit."""

from .broker import (
    AckMessage,
    BrokerService,
    BrokerState,
    DecodeError,
    RateMessage,
    RegisterMessage,
    UnregisterMessage,
    decode_message,
    encode_message,
    handle_register,
    handle_unregister,
    reallocate,
)
from .shaper import LinkFifo, TokenBucket
from .simnet import (
    DownloadModel,
    QoEReport,
    Scenario,
    SimFlow,
    SimUE,
    StreamingModel,
    TraceSample,
    qoe_report,
    run,
)
from .solver import (
    AllocationProblem,
    AllocationResult,
    AppDescriptor,
    SolverError,
    SweepPoint,
    UserProfile,
    ValidationError,
    aggregate_demand,
    best_response,
    brute_force_oracle,
    default_rate_cap,
    solve,
    sweep,
)
from .utility import (
    LogarithmicUtility,
    QoEObservation,
    SigmoidalUtility,
    UtilityFunction,
    fit_sigmoidal,
    validate,
)

__version__ = "0.1.0"
