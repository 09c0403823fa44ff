"""Bring the SUE up and down on either backend."""

from __future__ import annotations

import logging

from oxn.clock import VirtualClock, WallClock
from oxn.orchestration.runtime import (
    BackendUnavailable,
    Journal,
    OrchestrationError,
    RuntimeApi,
    RuntimeHandle,
    ServiceState,
)

log = logging.getLogger(__name__)

BACKENDS = ("sim", "container")


def create_runtime(model, backend: str = "sim", *, clock=None, journal: Journal | None = None,
                   entry: str | None = None, seed: int = 0, topology=None, client=None,
                   project: str = "oxn") -> RuntimeApi:
    """Runtime for ``model`` that has not been started yet (env patches allowed)."""
    if backend == "sim":
        from oxn.sim.runtime import SimRuntime

        clock = VirtualClock() if clock is None else clock
        journal = Journal(clock) if journal is None else journal
        if entry is None:
            entry = topology.entry if topology is not None else next(iter(model.services), "")
        if model.services and entry not in model.services:
            raise OrchestrationError(f"load target {entry!r} is not a service of the SUE")
        return SimRuntime(model, clock, journal, entry=entry, seed=seed, topology=topology)
    if backend == "container":
        from oxn.orchestration.container import ContainerRuntime

        clock = WallClock() if clock is None else clock
        journal = Journal(clock) if journal is None else journal
        return ContainerRuntime(model, clock, journal, client=client, project=project)
    raise ValueError(f"unknown backend {backend!r}; expected one of {BACKENDS}")


def start(model, backend: str = "sim", *, runtime: RuntimeApi | None = None,
          readiness_timeout: float = 120.0, **kw) -> RuntimeHandle:
    """Start every service and wait until all are ready."""
    if runtime is None:
        runtime = create_runtime(model, backend, **kw)
    clock, journal = runtime.clock, runtime.journal
    started_at = clock.now()
    journal.append("sue_start", backend=runtime.backend, services=sorted(runtime.states))
    if runtime.backend == "sim":
        runtime.boot()
        for name in runtime.states:
            journal.append("start", name)
        for name in runtime.states:
            runtime._transition(name, ServiceState.READY)
            journal.append("ready", name)
    else:
        try:
            runtime.boot(readiness_timeout)
        except BackendUnavailable:
            journal.append("sue_start_failed", ok=False, error="backend unavailable")
            raise
    runtime.started = True
    ready = journal.append("sue_ready")
    return RuntimeHandle(runtime.backend, runtime, started_at=started_at, ready_at=ready.t)


def teardown(handle: RuntimeHandle) -> dict:
    """Stop and remove every service. Idempotent and best-effort."""
    if handle.torn_down:
        return {"status": "already torn down"}
    runtime = handle.runtime
    pre_terminated = []
    for name, state in list(runtime.states.items()):
        if state is ServiceState.STOPPED:
            continue
        if state is ServiceState.KILLED:
            pre_terminated.append(name)
        runtime.states[name] = ServiceState.STOPPED
        runtime.journal.append("stop", name, pre_terminated=state is ServiceState.KILLED)
    if runtime.backend == "container":
        try:
            runtime.stop_all()
        except Exception as exc:  # best effort
            log.warning("teardown: %s", exc)
    runtime.journal.append("sue_stopped")
    handle.torn_down = True
    return {
        "status": "torn down",
        "services": {n: s.value for n, s in runtime.states.items()},
        "pre_terminated": pre_terminated,
        "journal_entries": len(runtime.journal),
    }
