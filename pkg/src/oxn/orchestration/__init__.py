from oxn.orchestration.runtime import (
    BackendUnavailable,
    ExecResult,
    Journal,
    JournalEntry,
    OrchestrationError,
    ReadinessTimeout,
    RuntimeApi,
    RuntimeCallError,
    RuntimeHandle,
    ServiceState,
)
from oxn.orchestration.compose import (
    ComposeParseError,
    ServiceDef,
    SueModel,
    UnknownServiceError,
    build_sue,
    filter_services,
    load_compose,
    parse_compose,
)
from oxn.orchestration.lifecycle import start, teardown

__all__ = [
    "BackendUnavailable",
    "ComposeParseError",
    "ExecResult",
    "Journal",
    "JournalEntry",
    "OrchestrationError",
    "ReadinessTimeout",
    "RuntimeApi",
    "RuntimeCallError",
    "RuntimeHandle",
    "ServiceDef",
    "ServiceState",
    "SueModel",
    "UnknownServiceError",
    "build_sue",
    "filter_services",
    "load_compose",
    "parse_compose",
    "start",
    "teardown",
]
