"""End-to-end experiment driver and the machine-readable report.

``run_experiment`` executes parse, SUE build, start, load with concurrent
fault scheduling, collection, labeling, storage and detection, then writes
``report.json`` into the run directory. A (partial) report is written no
matter which step fails.
"""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import time
import uuid
from contextlib import contextmanager
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from urllib.parse import urlparse

from oxn import __version__
from oxn.clock import VirtualClock, WallClock
from oxn.config import ConfigError, ExperimentSpec, load_experiment
from oxn.detection import InsufficientBaseline, detect, summarize
from oxn.loadgen import LoadGenerator, SimTransport, HttpTransport, TargetUnreachable, compile_load_profile
from oxn.observation import (
    ObservationError,
    SimMetrics,
    SimTraces,
    TimeSeriesFrame,
    collect_metric,
    collect_traces,
    label_frame,
    trace_series,
)
from oxn.orchestration import Journal, OrchestrationError, build_sue, start, teardown
from oxn.orchestration.compose import EFFECTIVE_COMPOSE
from oxn.orchestration.lifecycle import create_runtime
from oxn.store import StoreError, atomic_write, write_store
from oxn.treatments import TreatmentError, make_treatment
from oxn.treatments.schedule import Scheduler, plan_schedule
from oxn.units import FormatError

log = logging.getLogger(__name__)

REPORT = "report.json"
JOURNAL = "journal.ndjson"
LOADSTATS = "loadstats.csv"
SCHEMA_VERSION = 1

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ORCHESTRATION = 2
EXIT_RUNTIME = 3
EXIT_DETECTION = 4

# fields that legitimately differ between two runs of the same file and seed
VOLATILE_FIELDS = ("run_id", "timings")

DETECTION_NOTE = (
    "detection_latency is the time from fault start to the row completing the first run of k "
    "flagged rows; false_alarm_rate is the flagged fraction of pre-fault baseline rows. "
    "Both are working definitions, not standardized observability metrics."
)


class StepFailed(Exception):
    def __init__(self, step: str, code: int, cause: BaseException):
        self.step = step
        self.code = code
        self.cause = cause
        super().__init__(f"{step}: {cause}")


@dataclass
class RunResult:
    exit_code: int
    run_dir: Path
    report: dict

    @property
    def ok(self) -> bool:
        return self.exit_code == EXIT_OK


@dataclass
class _Run:
    """Mutable state threaded through the pipeline steps."""

    path: Path
    run_dir: Path
    run_id: str
    backend: str
    seed: int
    report: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @contextmanager
    def step(self, name: str, code: int, *errors: type[BaseException]):
        t0 = time.perf_counter()
        try:
            yield
        except errors as exc:
            raise StepFailed(name, code, exc) from exc
        finally:
            self.timings[name] = round(time.perf_counter() - t0, 6)


def default_run_id(path: Path) -> str:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%SZ")
    return f"{path.stem}-{stamp}-{uuid.uuid4().hex[:6]}"


def load_schema(name: str = "report") -> dict:
    text = resources.files("oxn").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate_report(report: dict) -> None:
    import jsonschema

    jsonschema.validate(report, load_schema("report"))


def strip_volatile(report: dict) -> dict:
    """Copy of ``report`` without run id and timing fields (for run comparison)."""
    out = {k: v for k, v in report.items() if k not in VOLATILE_FIELDS}
    if "frames" in out:
        out["frames"] = [{k: v for k, v in f.items() if k != "run_id"} for f in out["frames"]]
    return out


def _frame_name(response: str, treatment: str | None, multi: bool) -> str:
    return f"{response}@{treatment}" if multi and treatment else response


def _collect(spec: ExperimentSpec, records, load_start: float, load_end: float, metrics, traces):
    """Labeled frames per (response, fault window); the whole run for baselines."""
    faults = [r for r in records if r.phase == "fault" and r.start is not None and r.end is not None]
    if spec.baseline or not faults:
        spans = [(None, load_start, load_end, 0.0, 0.0)]
    else:
        spans = [(r.name, r.start, r.end, None, None) for r in faults]
    multi = len(spans) > 1
    labeled, series = [], []
    for name, s, e, _, _ in spans:
        for resp in spec.responses:
            if name is None:
                window = (s, e)
            else:
                window = (max(load_start, s - resp.left_window), min(load_end, e + resp.right_window))
            fname = _frame_name(resp.name, name, multi)
            if resp.kind == "metric":
                frame = collect_metric(metrics, resp, window)
                frame.response = fname
                lf = label_frame(frame, faults)
                labeled.append(lf)
                series.append((lf, name))
            else:
                frame = collect_traces(traces, resp, window)
                frame.response = fname
                labeled.append(label_frame(frame, faults))
                for sf in trace_series(frame, window, resp.step):
                    lf = label_frame(sf, faults)
                    labeled.append(lf)
                    series.append((lf, name))
    return labeled, series


def _detect(spec: ExperimentSpec, series, records) -> dict:
    by_name = {r.name: r for r in records}
    results, problems = [], []
    for lf, name in series:
        if name is None:
            continue
        rec = by_name[name]
        if lf.frame.empty_result:
            problems.append({"response": lf.response, "treatment": name, "error": "empty result"})
            continue
        try:
            results.append(detect(lf, rec, spec.detection))
        except InsufficientBaseline as exc:
            problems.append({"response": lf.response, "treatment": name, "error": str(exc)})
    return {
        "config": spec.detection.model_dump(),
        "results": [r.to_dict() for r in results],
        "skipped": problems,
        "summary": summarize(results) if results else {},
        "note": DETECTION_NOTE,
    }


def run_experiment(path: str | Path, *, backend: str = "sim", seed: int = 0, out: str | Path = "runs",
                   run_id: str | None = None, prometheus_url: str | None = None,
                   jaeger_url: str | None = None, topology=None) -> RunResult:
    """Run one experiment file and write its report under ``out/<run_id>/``."""
    path = Path(path)
    run_id = run_id or default_run_id(path)
    run_dir = Path(out) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    run = _Run(path, run_dir, run_id, backend, seed)
    wall0 = time.perf_counter()
    started = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")

    source = path.read_text() if path.is_file() else ""
    report = run.report
    report.update({
        "schema_version": SCHEMA_VERSION,
        "run_id": run_id,
        "status": "running",
        "exit_code": None,
        "failure": None,
        "engine_version": __version__,
        "backend": backend,
        "seed": seed,
        "experiment": {"file": path.name, "sha256": hashlib.sha256(source.encode()).hexdigest(),
                       "source": source},
        "sue": None,
        "schedule": None,
        "treatments": [],
        "load": None,
        "journal": None,
        "manifest": None,
        "frames": [],
        "empty_results": [],
        "detection": None,
        "taint": [],
    })
    handle = None
    exit_code = EXIT_OK
    try:
        with run.step("parse", EXIT_VALIDATION, ConfigError, FormatError, OSError, ValueError):
            spec = load_experiment(path)
            schedule = plan_schedule(spec)
            report["schedule"] = {
                "warmup": schedule.warmup, "gap": schedule.gap, "tail": schedule.tail,
                "run_time": schedule.run_time,
                "planned": [{"name": e.treatment.name, "offset": e.offset, "end_offset": e.end_offset}
                            for e in schedule],
            }

        with run.step("build_sue", EXIT_ORCHESTRATION, OrchestrationError, TreatmentError, ValueError):
            model = build_sue(spec.sue)
            if backend == "sim":
                clock = VirtualClock()
            elif backend == "container":
                clock = WallClock()
                if not prometheus_url or not jaeger_url:
                    raise OrchestrationError("container backend needs --prometheus-url and --jaeger-url")
            else:
                raise OrchestrationError(f"unknown backend {backend!r}")
            journal = Journal(clock, run_dir / JOURNAL)
            report["journal"] = JOURNAL
            entry = urlparse(spec.loadgen.base_url).hostname
            runtime = create_runtime(model, backend, clock=clock, journal=journal, entry=entry,
                                     seed=seed, topology=topology)
            records = []
            for t in spec.instrumentation_treatments:
                treatment = make_treatment(t.name, t.action, t.params)
                first = None
                for key, value in treatment.environment().items():
                    e = runtime.patch_env(treatment.target, key, value)
                    first = first if first is not None else e.t
                records.append(treatment.record(start=first, end=first, status="applied"))
            atomic_write(run_dir / EFFECTIVE_COMPOSE, model.render())
            report["sue"] = {"services": model.names(), "effective_compose": EFFECTIVE_COMPOSE,
                             "load_target": entry}
            report["treatments"] = [r.to_dict() for r in records]

        with run.step("start", EXIT_ORCHESTRATION, OrchestrationError, ValueError):
            handle = start(model, runtime=runtime, readiness_timeout=spec.sue.readiness_timeout)

        with run.step("run", EXIT_RUNTIME, TargetUnreachable, TreatmentError):
            profile = compile_load_profile(spec.loadgen)
            load_start = float(clock.now())
            load_end = load_start + profile.run_time
            if backend == "sim":
                transport = SimTransport(runtime, timeout=spec.loadgen.request_timeout)
            else:
                transport = HttpTransport(spec.loadgen.base_url, timeout=spec.loadgen.request_timeout)
            scheduler = Scheduler(schedule, runtime)
            abort: list[BaseException] = []

            def on_unreachable(exc):
                if any(r.status == "applied" and r.end is None for r in scheduler.records):
                    runtime.mark("unreachable_during_fault", entry)
                    return
                abort.append(exc)

            gen = LoadGenerator(profile, spec.loadgen.tasks, transport, clock, seed=seed,
                                think_time=spec.loadgen.think_time, on_unreachable=on_unreachable)
            runtime.mark("load_start")
            gen.install(load_start)
            scheduler.install(clock, load_start)
            t = load_start
            while t < load_end and not abort and scheduler.aborted is None:
                t = min(load_end, t + 1.0)
                clock.run_until(t)
            stats = gen.finish()
            scheduler.finish()
            runtime.mark("load_end")
            stats.write_csv(run_dir / LOADSTATS)
            records += scheduler.records
            report["treatments"] = [r.to_dict() for r in records]
            report["taint"] = list(scheduler.tainted)
            report["load"] = {"start": load_start, "end": load_end, "stats": stats.summary(),
                              "stats_csv": LOADSTATS}
            if scheduler.aborted is not None:
                raise scheduler.aborted
            if abort:
                raise abort[0]

        with run.step("collect", EXIT_DETECTION, ObservationError, ValueError):
            if backend == "sim":
                metrics, traces = SimMetrics(runtime.sim), SimTraces(runtime.sim)
            else:
                metrics, traces = prometheus_url, jaeger_url
            labeled, series = _collect(spec, records, load_start, load_end, metrics, traces)
            report["empty_results"] = sorted(lf.response for lf in labeled if lf.frame.empty_result)

        with run.step("store", EXIT_DETECTION, StoreError, OSError):
            manifest = write_store(labeled, run_dir, run_id=run_id,
                                   experiment_sha256=report["experiment"]["sha256"], records=records)
            report["manifest"] = "manifest.json"
            report["frames"] = [vars(f) for f in manifest.frames]

        with run.step("detect", EXIT_DETECTION, ValueError):
            report["detection"] = _detect(spec, series, records)
    except StepFailed as exc:
        exit_code = exc.code
        report["failure"] = {"step": exc.step, "type": type(exc.cause).__name__, "error": str(exc.cause)}
        log.error("step %s failed: %s", exc.step, exc.cause)
    finally:
        if handle is not None:
            t0 = time.perf_counter()
            td = teardown(handle)
            run.timings["teardown"] = round(time.perf_counter() - t0, 6)
            report["pre_terminated"] = td.get("pre_terminated", [])

    report["status"] = "ok" if exit_code == EXIT_OK else "failed"
    report["exit_code"] = exit_code
    report["timings"] = {"steps": run.timings, "total": round(time.perf_counter() - wall0, 6),
                         "started_at": started}
    try:
        validate_report(report)
        atomic_write(run_dir / REPORT, json.dumps(report, indent=2, sort_keys=True, default=_json_default) + "\n")
    except Exception as exc:  # report IO or schema failure
        log.error("writing report failed: %s", exc)
        if exit_code == EXIT_OK:
            exit_code = EXIT_DETECTION
        report["exit_code"] = exit_code
    return RunResult(exit_code, run_dir, report)


def _json_default(o):
    import numpy as np

    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def load_report(run_dir: str | Path) -> dict:
    return json.loads((Path(run_dir) / REPORT).read_text())


def format_summary(report: dict) -> str:
    """Human-readable overview of a report."""
    lines = [f"run {report['run_id']}  status={report['status']}  exit={report['exit_code']}  "
             f"backend={report['backend']}  seed={report['seed']}"]
    if report.get("failure"):
        f = report["failure"]
        lines.append(f"failed at {f['step']}: {f['type']}: {f['error']}")
    load = report.get("load")
    if load:
        s = load["stats"]
        lines.append(f"load: {s['requests']} requests, failure ratio {s['failure_ratio']:.4f}, "
                     f"max users {s['max_users']}")
    for r in report.get("treatments", []):
        window = "" if r["start"] is None else f" [{r['start']:.3f}, {r['end'] if r['end'] is None else round(r['end'], 3)}]"
        lines.append(f"treatment {r['name']} ({r['action']} -> {r['target']}, {r['phase']}): {r['status']}{window}")
    for f in report.get("frames", []):
        flag = "  EMPTY" if f["empty_result"] else ""
        lines.append(f"frame {f['response']}: {f['rows']} rows{flag}")
    det = report.get("detection") or {}
    for name, s in (det.get("summary") or {}).items():
        lat = "-" if s["min_latency"] is None else f"{s['min_latency']:g}s"
        lines.append(f"{name}: {s['verdict']} by {s['detecting_responses'] or 'none'}, min latency {lat}, "
                     f"mean false-alarm rate {s['mean_false_alarm_rate']:.4f}")
    for t in report.get("taint", []):
        lines.append(f"taint: {t}")
    return "\n".join(lines)
