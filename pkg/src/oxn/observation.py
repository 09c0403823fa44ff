"""Response collection and treatment labeling.

Metric responses come from a Prometheus-compatible ``query_range`` API and
trace responses from a Jaeger-compatible ``/api/traces`` API. Either may be
a URL or an in-process backend object exposing the same call.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

log = logging.getLogger(__name__)

NO_TREATMENT = "NoTreatment"
RETRIES = 3


class ObservationError(Exception):
    pass


class BackendUnreachable(ObservationError):
    pass


class OverlapError(ObservationError):
    pass


# -- frames -----------------------------------------------------------------


@dataclass
class TimeSeriesFrame:
    response: str
    query: str
    step: float
    timestamp: np.ndarray  # epoch seconds, millisecond precision
    value: np.ndarray
    empty_result: bool = False

    kind = "metric"
    COLUMNS = ("timestamp", "value")

    def __post_init__(self):
        self.timestamp = np.round(np.asarray(self.timestamp, dtype=float), 3)
        self.value = np.asarray(self.value, dtype=float)
        if len(self.timestamp) > 1 and not (np.diff(self.timestamp) > 0).all():
            raise ValueError(f"{self.response}: timestamps must be strictly increasing")

    def __len__(self) -> int:
        return len(self.timestamp)

    @property
    def anchors(self) -> np.ndarray:
        return self.timestamp

    def columns(self) -> dict[str, np.ndarray]:
        return {"timestamp": self.timestamp, "value": self.value}


@dataclass
class TraceFrame:
    response: str
    query: str
    trace_id: np.ndarray
    span_id: np.ndarray
    service: np.ndarray
    operation: np.ndarray
    start: np.ndarray  # microseconds since epoch
    duration: np.ndarray  # microseconds
    status: np.ndarray
    empty_result: bool = False

    kind = "trace"
    COLUMNS = ("trace_id", "span_id", "service", "operation", "start", "duration", "status")

    def __post_init__(self):
        for name in ("trace_id", "span_id", "service", "operation", "status"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=object))
        self.start = np.asarray(self.start, dtype=np.int64)
        self.duration = np.asarray(self.duration, dtype=np.int64)
        if (self.duration < 0).any():
            raise ValueError("span durations must be >= 0")
        if any(not t for t in self.trace_id):
            raise ValueError("trace ids must be non-empty")

    def __len__(self) -> int:
        return len(self.start)

    @property
    def anchors(self) -> np.ndarray:
        # spans are labeled by their start time
        return self.start / 1e6

    def columns(self) -> dict[str, np.ndarray]:
        return {c: getattr(self, c) for c in self.COLUMNS}

    @classmethod
    def empty(cls, response: str, query: str) -> "TraceFrame":
        return cls(response, query, [], [], [], [], [], [], [], empty_result=True)


@dataclass
class LabeledFrame:
    frame: TimeSeriesFrame | TraceFrame
    labels: np.ndarray
    records: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frame)

    @property
    def response(self) -> str:
        return self.frame.response

    @property
    def kind(self) -> str:
        return self.frame.kind


# -- backends ---------------------------------------------------------------


class MetricsBackend(Protocol):
    def query_range(self, query: str, start: float, end: float, step: float) -> dict: ...


class TracesBackend(Protocol):
    def find_traces(self, service: str, start_us: int, end_us: int, operation: str | None = None,
                    limit: int | None = None) -> dict: ...


def _get_json(client, url: str, params: dict) -> dict:
    import httpx

    last = None
    for attempt in range(RETRIES + 1):
        try:
            resp = client.get(url, params=params)
            if resp.status_code >= 500:
                raise httpx.HTTPStatusError(f"server error {resp.status_code}", request=resp.request,
                                            response=resp)
            resp.raise_for_status()
            return resp.json()
        except (httpx.TransportError, httpx.HTTPStatusError) as exc:
            last = exc
            if isinstance(exc, httpx.HTTPStatusError) and exc.response.status_code < 500:
                raise ObservationError(f"{url}: {exc.response.status_code} {exc.response.text}") from exc
            if attempt < RETRIES:
                time.sleep(0.2 * 2 ** attempt)
    raise BackendUnreachable(f"{url}: {last}")


class PrometheusHttp:
    def __init__(self, url: str, client=None, timeout: float = 30.0):
        import httpx

        self.url = url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)

    def query_range(self, query, start, end, step) -> dict:
        return _get_json(self.client, f"{self.url}/api/v1/query_range",
                         {"query": query, "start": repr(float(start)), "end": repr(float(end)),
                          "step": repr(float(step))})


class JaegerHttp:
    def __init__(self, url: str, client=None, timeout: float = 30.0):
        import httpx

        self.url = url.rstrip("/")
        self.client = client or httpx.Client(timeout=timeout)

    def find_traces(self, service, start_us, end_us, operation=None, limit=None) -> dict:
        params = {"service": service, "start": int(start_us), "end": int(end_us)}
        if operation:
            params["operation"] = operation
        if limit:
            params["limit"] = int(limit)
        return _get_json(self.client, f"{self.url}/api/traces", params)


class SimMetrics:
    def __init__(self, state):
        self.state = state

    def query_range(self, query, start, end, step) -> dict:
        from oxn.sim.engine import query_range

        return query_range(self.state, query, start, end, step)


class SimTraces:
    def __init__(self, state):
        self.state = state

    def find_traces(self, service, start_us, end_us, operation=None, limit=None) -> dict:
        from oxn.sim.engine import find_traces

        return find_traces(self.state, service, start_us, end_us, operation=operation, limit=limit)


# -- collection ---------------------------------------------------------------


def collect_metric(endpoint, response, window: tuple[float, float]) -> TimeSeriesFrame:
    """Range-query ``response.query`` over ``window`` at resolution ``response.step``."""
    if isinstance(endpoint, str):
        endpoint = PrometheusHttp(endpoint)
    t0, t1 = window
    doc = endpoint.query_range(response.query, t0, t1, response.step)
    if doc.get("status") != "success":
        raise ObservationError(f"{response.name}: query failed: {doc.get('error', doc)}")
    data = doc.get("data", {})
    if data.get("resultType") != "matrix":
        raise ObservationError(f"{response.name}: expected a matrix result, got {data.get('resultType')}")
    sums: dict[float, float] = {}
    for series in data.get("result", []):
        for ts, val in series.get("values", []):
            key = round(float(ts), 3)
            sums[key] = sums.get(key, 0.0) + float(val)
    ts = sorted(sums)
    return TimeSeriesFrame(response.name, response.query, float(response.step), ts, [sums[t] for t in ts],
                           empty_result=not ts)


def collect_traces(endpoint, response, window: tuple[float, float], limit: int | None = None) -> TraceFrame:
    """Spans of the response's service (and operation) starting inside ``window``."""
    if isinstance(endpoint, str):
        endpoint = JaegerHttp(endpoint)
    t0, t1 = window
    start_us, end_us = int(round(t0 * 1e6)), int(round(t1 * 1e6))
    doc = endpoint.find_traces(response.service_name, start_us, end_us,
                               operation=response.operation_name, limit=limit)
    if doc.get("errors"):
        raise ObservationError(f"{response.name}: trace query failed: {doc['errors']}")
    rows = []
    for trace in doc.get("data") or []:
        processes = trace.get("processes", {})
        for span in trace.get("spans", []):
            svc = processes.get(span.get("processID"), {}).get("serviceName")
            if svc != response.service_name:
                continue
            if response.operation_name and span.get("operationName") != response.operation_name:
                continue
            start = int(span["startTime"])
            if not start_us <= start <= end_us:
                continue
            error = any(t.get("key") == "error" and t.get("value") in (True, "true") for t in span.get("tags", []))
            rows.append((span["traceID"], span["spanID"], svc, span.get("operationName", ""), start,
                         int(span.get("duration", 0)), "error" if error else "ok"))
    if not rows:
        return TraceFrame.empty(response.name, response.query)
    rows.sort(key=lambda r: (r[4], r[0], r[1]))
    cols = list(zip(*rows))
    return TraceFrame(response.name, response.query, *cols)


def trace_series(frame: TraceFrame, window: tuple[float, float], step: float = 1.0) -> list[TimeSeriesFrame]:
    """Reduce spans to per-step span count and p95 duration (ms) series."""
    t0, t1 = window
    n = int(np.floor((t1 - t0) / step + 1e-9)) + 1
    edges = t0 + step * np.arange(n)
    anchors = frame.anchors
    idx = np.floor((anchors - t0) / step + 1e-9).astype(np.int64) if len(frame) else np.empty(0, dtype=np.int64)
    keep = (idx >= 0) & (idx < n)
    idx = idx[keep]
    durations = frame.duration[keep] / 1000.0
    counts = np.bincount(idx, minlength=n).astype(float)
    p95_t, p95_v = [], []
    order = np.argsort(idx, kind="stable")
    bounds = np.searchsorted(idx[order], np.arange(n + 1))
    for k in range(n):
        chunk = durations[order[bounds[k]:bounds[k + 1]]]
        if len(chunk):
            p95_t.append(edges[k])
            p95_v.append(np.percentile(chunk, 95))
    return [
        TimeSeriesFrame(f"{frame.response}.span_count", frame.query, step, edges, counts,
                        empty_result=frame.empty_result),
        TimeSeriesFrame(f"{frame.response}.p95_duration_ms", frame.query, step, p95_t, p95_v,
                        empty_result=not p95_t),
    ]


# -- labeling -----------------------------------------------------------------


def _windows(records: Sequence) -> list[tuple[float, float, str]]:
    wins = sorted((float(r.start), float(r.end), r.name) for r in records
                  if r.start is not None and r.end is not None)
    for (s0, e0, n0), (s1, e1, n1) in zip(wins, wins[1:]):
        if s1 <= e0:
            raise OverlapError(f"treatment windows overlap: {n0} [{s0}, {e0}] and {n1} [{s1}, {e1}]")
    return wins


def label_frame(frame, records: Sequence) -> LabeledFrame:
    """Label each row with the treatment whose [start, end] window contains it.

    Metric rows are anchored at their timestamp, spans at their start time.
    Rows outside every window are ``NoTreatment``.
    """
    wins = _windows(records)
    anchors = np.round(frame.anchors, 6)
    labels = np.full(len(frame), NO_TREATMENT, dtype=object)
    for start, end, name in wins:
        labels[(anchors >= round(start, 6)) & (anchors <= round(end, 6))] = name
    return LabeledFrame(frame, labels, list(records))
