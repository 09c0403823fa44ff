"""Treatment interface, parameter models, and the action registry."""

from __future__ import annotations

import enum
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field
from typing import Any, ClassVar

from pydantic import BaseModel, ConfigDict

from oxn.units import Seconds


class Phase(str, enum.Enum):
    INSTRUMENTATION = "instrumentation"
    FAULT = "fault"


class TreatmentError(Exception):
    pass


class PreconditionFailed(TreatmentError):
    pass


class ApplyFailed(TreatmentError):
    pass


class RevertFailed(TreatmentError):
    pass


class NonRevertible(TreatmentError):
    pass


class Params(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    service_name: str


class FaultParams(Params):
    duration: Seconds


@dataclass
class TreatmentRecord:
    """One applied treatment. Timestamps are copied from the runtime journal."""

    name: str
    action: str
    target: str
    params: dict[str, Any]
    phase: str = Phase.FAULT.value
    start: float | None = None
    end: float | None = None
    status: str = "applied"  # applied | reverted | failed
    error: str | None = None
    planned_offset: float | None = None

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TreatmentRecord":
        return cls(**data)

    @property
    def window(self) -> tuple[float, float]:
        if self.start is None or self.end is None:
            raise ValueError(f"record {self.name!r} has no closed window")
        return self.start, self.end


class Treatment(ABC):
    """A controlled change to the system under experiment.

    Subclasses set ``action`` (the identifier used in experiment files),
    ``phase`` and ``params_model`` and register themselves with
    :func:`register`. Fault treatments implement :meth:`apply` and
    :meth:`revert` against a runtime; instrumentation treatments implement
    :meth:`environment`, which is merged into the target's environment before
    the system starts.
    """

    action: ClassVar[str]
    phase: ClassVar[Phase]
    params_model: ClassVar[type[Params]]
    revertible: ClassVar[bool] = True

    def __init__(self, name: str, params: Params | dict[str, Any]):
        if not isinstance(params, Params):
            params = self.params_model.model_validate(params)
        self.name = name
        self.params = params

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r}, target={self.target!r})"

    @property
    def target(self) -> str:
        return self.params.service_name

    @property
    def duration(self) -> float:
        return getattr(self.params, "duration", 0.0)

    def record(self, **kw) -> TreatmentRecord:
        return TreatmentRecord(
            name=self.name,
            action=self.action,
            target=self.target,
            params=self.params.model_dump(mode="json"),
            phase=self.phase.value,
            **kw,
        )

    def preconditions(self, runtime) -> list[str]:
        return []

    # fault phase
    def apply(self, runtime) -> float:
        raise NotImplementedError(f"{self.action} is not a fault treatment")

    def revert(self, runtime) -> float:
        raise NotImplementedError(f"{self.action} is not a fault treatment")

    # instrumentation phase
    def environment(self) -> dict[str, str]:
        raise NotImplementedError(f"{self.action} is not an instrumentation treatment")


class FaultTreatment(Treatment):
    phase = Phase.FAULT
    params_model = FaultParams

    @abstractmethod
    def apply(self, runtime) -> float: ...

    @abstractmethod
    def revert(self, runtime) -> float: ...


class InstrumentationTreatment(Treatment):
    phase = Phase.INSTRUMENTATION

    @abstractmethod
    def environment(self) -> dict[str, str]: ...


@dataclass
class _Registry:
    actions: dict[str, type[Treatment]] = field(default_factory=dict)


_registry = _Registry()


def register(cls: type[Treatment]) -> type[Treatment]:
    """Class decorator making a treatment available to experiment files."""
    if cls.action in _registry.actions and _registry.actions[cls.action] is not cls:
        raise ValueError(f"action {cls.action!r} already registered")
    _registry.actions[cls.action] = cls
    return cls


def unregister(action: str) -> None:
    _registry.actions.pop(action, None)


def lookup(action: str) -> type[Treatment]:
    try:
        return _registry.actions[action]
    except KeyError:
        raise KeyError(f"unknown treatment action {action!r}") from None


def registered_actions() -> list[str]:
    return sorted(_registry.actions)


def make_treatment(name: str, action: str, params: dict[str, Any]) -> Treatment:
    return lookup(action)(name, params)
