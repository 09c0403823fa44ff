"""Runtime abstraction shared by the container and simulated backends.

Every mutation goes through :class:`RuntimeApi`, which serializes calls and
appends them to a :class:`Journal`. The journal is the only source of
timestamps used for labeling.
"""

from __future__ import annotations

import enum
import json
import logging
import threading
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

from oxn.clock import Clock

log = logging.getLogger(__name__)


class OrchestrationError(Exception):
    pass


class BackendUnavailable(OrchestrationError):
    pass


class ReadinessTimeout(OrchestrationError):
    def __init__(self, unready: Sequence[str], timeout: float):
        self.unready = list(unready)
        super().__init__(f"services not ready after {timeout:g}s: {', '.join(self.unready)}")


class RuntimeCallError(OrchestrationError):
    """A runtime call failed (service gone, daemon error, ...)."""


class ServiceState(str, enum.Enum):
    STARTING = "starting"
    READY = "ready"
    PAUSED = "paused"
    KILLED = "killed"
    STOPPED = "stopped"


_TRANSITIONS = {
    ServiceState.STARTING: {ServiceState.READY, ServiceState.KILLED, ServiceState.STOPPED},
    ServiceState.READY: {ServiceState.PAUSED, ServiceState.KILLED, ServiceState.STOPPED},
    ServiceState.PAUSED: {ServiceState.READY, ServiceState.KILLED, ServiceState.STOPPED},
    ServiceState.KILLED: {ServiceState.STOPPED},
    ServiceState.STOPPED: set(),
}


@dataclass(frozen=True)
class JournalEntry:
    seq: int
    t: float
    op: str
    service: str | None = None
    detail: dict[str, Any] = field(default_factory=dict)
    ok: bool = True

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class Journal:
    """Append-only, totally ordered log; optionally mirrored to an NDJSON file."""

    def __init__(self, clock: Clock, path: str | Path | None = None):
        self.clock = clock
        self.path = Path(path) if path is not None else None
        self.entries: list[JournalEntry] = []
        self._lock = threading.Lock()
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, op: str, service: str | None = None, ok: bool = True, **detail) -> JournalEntry:
        with self._lock:
            t = self.clock.now()
            if self.entries and t < self.entries[-1].t:
                t = self.entries[-1].t
            entry = JournalEntry(len(self.entries), t, op, service, detail, ok)
            self.entries.append(entry)
            if self.path is not None:
                with self.path.open("a") as fh:
                    fh.write(entry.to_json() + "\n")
                    fh.flush()
            return entry

    def __iter__(self):
        return iter(list(self.entries))

    def __len__(self) -> int:
        return len(self.entries)

    def find(self, op: str, service: str | None = None) -> list[JournalEntry]:
        return [e for e in self.entries if e.op == op and (service is None or e.service == service)]

    @staticmethod
    def read(path: str | Path) -> list[JournalEntry]:
        out = []
        for line in Path(path).read_text().splitlines():
            if line.strip():
                out.append(JournalEntry(**json.loads(line)))
        return out


@dataclass(frozen=True)
class ExecResult:
    exit_code: int
    output: str = ""


class RuntimeApi:
    """Capability interface used by treatments.

    Backends implement the underscore methods; the public methods enforce
    state transitions, serialize calls and journal them.
    """

    backend: str = "abstract"

    def __init__(self, clock: Clock, journal: Journal):
        self.clock = clock
        self.journal = journal
        self.states: dict[str, ServiceState] = {}
        self.started = False
        self._lock = threading.RLock()

    # -- backend hooks -------------------------------------------------
    def _pause(self, service: str) -> None:
        raise NotImplementedError

    def _unpause(self, service: str) -> None:
        raise NotImplementedError

    def _kill(self, service: str) -> None:
        raise NotImplementedError

    def _exec(self, service: str, command: list[str]) -> ExecResult:
        raise NotImplementedError

    def _patch_env(self, service: str, key: str, value: str) -> None:
        raise NotImplementedError

    # -- public, journaled ---------------------------------------------
    def state(self, service: str) -> ServiceState:
        try:
            return self.states[service]
        except KeyError:
            raise RuntimeCallError(f"unknown service {service!r}") from None

    def _transition(self, service: str, new: ServiceState) -> None:
        old = self.state(service)
        if new not in _TRANSITIONS[old]:
            raise RuntimeCallError(f"{service}: illegal transition {old.value} -> {new.value}")
        self.states[service] = new

    def _call(self, op: str, service: str, fn, *args, new_state: ServiceState | None = None, **detail):
        with self._lock:
            if new_state is not None:
                old = self.state(service)
                if new_state not in _TRANSITIONS[old]:
                    self.journal.append(op, service, ok=False, error=f"illegal in state {old.value}", **detail)
                    raise RuntimeCallError(f"{op} {service}: illegal in state {old.value}")
            try:
                result = fn(service, *args)
            except RuntimeCallError as exc:
                self.journal.append(op, service, ok=False, error=str(exc), **detail)
                raise
            if new_state is not None:
                self._transition(service, new_state)
            if isinstance(result, ExecResult):
                detail = {**detail, "exit_code": result.exit_code}
            entry = self.journal.append(op, service, **detail)
            return entry, result

    def pause(self, service: str) -> JournalEntry:
        return self._call("pause", service, self._pause, new_state=ServiceState.PAUSED)[0]

    def unpause(self, service: str) -> JournalEntry:
        return self._call("unpause", service, self._unpause, new_state=ServiceState.READY)[0]

    def kill(self, service: str) -> JournalEntry:
        return self._call("kill", service, self._kill, new_state=ServiceState.KILLED)[0]

    def exec(self, service: str, command: Sequence[str]) -> tuple[JournalEntry, ExecResult]:
        command = list(command)
        if self.state(service) is not ServiceState.READY:
            with self._lock:
                self.journal.append("exec", service, ok=False, command=command,
                                    error=f"service is {self.state(service).value}")
            raise RuntimeCallError(f"exec in {service}: service is {self.state(service).value}")
        return self._call("exec", service, self._exec, command, command=command)

    def probe(self, service: str, command: Sequence[str]) -> ExecResult:
        """Run a read-only check inside a service (not journaled)."""
        if self.state(service) is not ServiceState.READY:
            raise RuntimeCallError(f"probe in {service}: service is {self.state(service).value}")
        return self._exec(service, list(command))

    def patch_env(self, service: str, key: str, value: str) -> JournalEntry:
        if self.started:
            raise RuntimeCallError("environment patches are only allowed before start")
        return self._call("patch_env", service, self._patch_env, key, str(value), key=key, value=str(value))[0]

    def mark(self, op: str, service: str | None = None, **detail) -> JournalEntry:
        """Journal an event that does not mutate the runtime (e.g. window ends)."""
        with self._lock:
            return self.journal.append(op, service, **detail)


@dataclass
class RuntimeHandle:
    backend: str
    runtime: RuntimeApi
    started_at: float
    ready_at: float | None = None
    torn_down: bool = False

    @property
    def service_states(self) -> dict[str, ServiceState]:
        return dict(self.runtime.states)

    @property
    def journal(self) -> Journal:
        return self.runtime.journal
