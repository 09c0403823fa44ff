"""Sequential fault scheduling.

Faults run one after another. The first fault waits for a warm-up gap equal
to the largest ``left_window`` so every fault has a labeled pre-fault
baseline; consecutive faults are separated by the largest window of any
response; the last fault is followed by the largest ``right_window``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

from oxn.treatments.base import (
    ApplyFailed,
    NonRevertible,
    Phase,
    PreconditionFailed,
    RevertFailed,
    Treatment,
    TreatmentRecord,
    lookup,
    make_treatment,
)

log = logging.getLogger(__name__)


class ScheduleOverflow(ValueError):
    def __init__(self, required: float, run_time: float):
        self.required = required
        self.run_time = run_time
        super().__init__(
            f"fault schedule needs run_time >= {required:g}s but run_time is {run_time:g}s"
        )


def _gaps(responses) -> tuple[float, float, float]:
    lefts = [r.left_window for r in responses] or [0.0]
    rights = [r.right_window for r in responses] or [0.0]
    warmup = max(lefts)
    tail = max(rights)
    return warmup, max(warmup, tail), tail


def _faults(treatments) -> list:
    return [t for t in treatments if lookup(t.action).phase is Phase.FAULT]


def required_run_time(spec) -> float:
    """Shortest run_time that fits every fault plus its observation windows."""
    faults = _faults(spec.treatments)
    if not faults:
        return 0.0
    warmup, gap, tail = _gaps(spec.responses)
    durations = [float(t.params["duration"]) for t in faults]
    return warmup + sum(durations) + gap * (len(faults) - 1) + tail


@dataclass(frozen=True)
class ScheduleEntry:
    treatment: Treatment
    offset: float

    @property
    def end_offset(self) -> float:
        return self.offset + self.treatment.duration


@dataclass(frozen=True)
class TreatmentSchedule:
    entries: tuple[ScheduleEntry, ...]
    run_time: float
    warmup: float = 0.0
    gap: float = 0.0
    tail: float = 0.0

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def windows(self) -> list[tuple[float, float]]:
        return [(e.offset, e.end_offset) for e in self.entries]


def plan_schedule(spec) -> TreatmentSchedule:
    """Plan planned offsets (seconds from load start) for the fault treatments."""
    run_time = float(spec.loadgen.run_time)
    faults = _faults(spec.treatments)
    warmup, gap, tail = _gaps(spec.responses)
    if not faults:
        return TreatmentSchedule((), run_time)
    needed = required_run_time(spec)
    if needed > run_time:
        raise ScheduleOverflow(needed, run_time)
    entries = []
    offset = warmup
    for t in faults:
        treatment = make_treatment(t.name, t.action, t.params)
        entries.append(ScheduleEntry(treatment, offset))
        offset += treatment.duration + gap
    return TreatmentSchedule(tuple(entries), run_time, warmup, gap, tail)


def apply_fault(entry: ScheduleEntry, runtime) -> TreatmentRecord:
    treatment = entry.treatment
    problems = treatment.preconditions(runtime)
    if problems:
        raise PreconditionFailed("; ".join(problems))
    start = treatment.apply(runtime)
    return treatment.record(start=start, status="applied", planned_offset=entry.offset)


def revert_fault(record: TreatmentRecord, runtime) -> TreatmentRecord:
    """Undo an applied fault; on failure the record is marked ``failed``."""
    if record.status != "applied":
        raise ValueError(f"record {record.name!r} is {record.status}, not applied")
    treatment = make_treatment(record.name, record.action, record.params)
    if not treatment.revertible:
        raise NonRevertible(f"{record.name}: {record.action} cannot be reverted")
    try:
        record.end = treatment.revert(runtime)
    except RevertFailed as exc:
        record.status = "failed"
        record.error = str(exc)
        record.end = runtime.mark("revert_failed", treatment.target, treatment=record.name).t
        raise
    record.status = "reverted"
    return record


@dataclass
class Scheduler:
    """Single sequential actor applying a schedule against a clock.

    All fault-phase runtime calls come from here. ``on_abort`` is invoked
    with the exception when an apply fails; the driver then tears down.
    """

    schedule: TreatmentSchedule
    runtime: object
    on_abort: Callable[[BaseException], None] | None = None
    records: list[TreatmentRecord] = field(default_factory=list)
    tainted: list[str] = field(default_factory=list)
    aborted: BaseException | None = None
    _killed: set = field(default_factory=set)

    def install(self, clock, load_start: float) -> None:
        for i, entry in enumerate(self.schedule):
            clock.call_at(load_start + entry.offset, lambda e=entry: self._start(e), priority=-1)
            clock.call_at(load_start + entry.end_offset, lambda i=i: self._stop(i), priority=-1)

    def _find(self, name: str) -> TreatmentRecord | None:
        for r in self.records:
            if r.name == name:
                return r
        return None

    def _start(self, entry: ScheduleEntry) -> None:
        if self.aborted is not None:
            return
        t = entry.treatment
        if t.target in self._killed:
            rec = t.record(status="failed", error=f"target {t.target!r} was killed earlier",
                           planned_offset=entry.offset)
            self.records.append(rec)
            return
        try:
            rec = apply_fault(entry, self.runtime)
        except (PreconditionFailed, ApplyFailed) as exc:
            log.error("applying %s failed: %s", t.name, exc)
            self.records.append(t.record(status="failed", error=str(exc), planned_offset=entry.offset))
            self.aborted = exc
            if self.on_abort is not None:
                self.on_abort(exc)
            return
        if not t.revertible:
            self._killed.add(t.target)
        self.records.append(rec)

    def _stop(self, index: int) -> None:
        if self.aborted is not None:
            return
        entry = self.schedule.entries[index]
        rec = self._find(entry.treatment.name)
        if rec is None or rec.status != "applied":
            return
        if not entry.treatment.revertible:
            rec.end = self.runtime.mark("window_end", rec.target, treatment=rec.name).t
            return
        try:
            revert_fault(rec, self.runtime)
        except RevertFailed as exc:
            log.warning("reverting %s failed: %s", rec.name, exc)
            self.tainted.append(f"{rec.name}: revert failed: {exc}")

    def finish(self) -> None:
        """Close any window left open (e.g. after an abort) and taint the run."""
        for rec in self.records:
            if rec.status == "applied" and rec.end is None:
                treatment = make_treatment(rec.name, rec.action, rec.params)
                if treatment.revertible:
                    try:
                        revert_fault(rec, self.runtime)
                        continue
                    except RevertFailed as exc:
                        self.tainted.append(f"{rec.name}: revert failed: {exc}")
                        continue
                rec.end = self.runtime.mark("window_end", rec.target, treatment=rec.name).t
