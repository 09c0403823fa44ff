from oxn.treatments.base import (
    ApplyFailed,
    FaultTreatment,
    InstrumentationTreatment,
    NonRevertible,
    Phase,
    PreconditionFailed,
    RevertFailed,
    Treatment,
    TreatmentError,
    TreatmentRecord,
    lookup,
    make_treatment,
    register,
    registered_actions,
)
from oxn.treatments import library
from oxn.treatments.schedule import (
    ScheduleEntry,
    ScheduleOverflow,
    Scheduler,
    TreatmentSchedule,
    apply_fault,
    plan_schedule,
    required_run_time,
    revert_fault,
)

__all__ = [
    "ApplyFailed",
    "FaultTreatment",
    "InstrumentationTreatment",
    "NonRevertible",
    "Phase",
    "PreconditionFailed",
    "RevertFailed",
    "ScheduleEntry",
    "ScheduleOverflow",
    "Scheduler",
    "Treatment",
    "TreatmentError",
    "TreatmentRecord",
    "TreatmentSchedule",
    "apply_fault",
    "library",
    "lookup",
    "make_treatment",
    "plan_schedule",
    "register",
    "registered_actions",
    "required_run_time",
    "revert_fault",
]
