"""In-process simulation of the system under experiment.

Requests walk the call graph of a :class:`SimTopology`; each hop adds its
latency and applies whatever fault modifiers are active on that service.
Telemetry goes into append-only buffers: counter increments per service and
spans in columnar arrays. Metric samples are derived from the increments at
the service's export ticks, which is how the export interval shows up in the
data.
"""

from __future__ import annotations

import bisect
import re
import threading
from array import array
from dataclasses import dataclass, field

import numpy as np

from oxn.clock import Clock
from oxn.sim.topology import SimTopology
from oxn.units import FormatError, parse_duration

OK, ERROR = 0, 1
STATUS_OK = 200
STATUS_ERROR = 500
STATUS_LOST = 503
STATUS_TIMEOUT = 504


class UnsupportedExpr(ValueError):
    pass


@dataclass
class Modifiers:
    added_delay_ms: float = 0.0
    loss_p: float = 0.0
    corrupt_p: float = 0.0
    paused: bool = False
    killed: bool = False
    cpu_pressure: int = 0

    def neutral(self) -> bool:
        return self == Modifiers()


@dataclass(frozen=True)
class Response:
    status: int
    latency_ms: float

    @property
    def ok(self) -> bool:
        return self.status < 400


class SpanBuffer:
    """Columnar span store; ids are derived from (user, seq, hop)."""

    def __init__(self):
        self.user = array("q")
        self.seq = array("q")
        self.hop = array("q")
        self.parent = array("q")
        self.service = array("q")
        self.operation = array("q")
        self.start = array("d")  # seconds since epoch
        self.duration = array("d")  # milliseconds
        self.status = array("b")

    def __len__(self) -> int:
        return len(self.start)

    def append(self, user, seq, hop, parent, service, operation, start, duration, status):
        self.user.append(user)
        self.seq.append(seq)
        self.hop.append(hop)
        self.parent.append(parent)
        self.service.append(service)
        self.operation.append(operation)
        self.start.append(start)
        self.duration.append(duration)
        self.status.append(status)

    def columns(self) -> dict[str, np.ndarray]:
        return {
            name: np.frombuffer(getattr(self, name), dtype=getattr(self, name).typecode).copy()
            for name in ("user", "seq", "hop", "parent", "service", "operation", "start", "duration", "status")
        }

    def digest(self) -> bytes:
        import hashlib

        h = hashlib.sha256()
        for name in ("user", "seq", "hop", "parent", "service", "operation", "start", "duration", "status"):
            h.update(getattr(self, name).tobytes())
        return h.digest()


def trace_id(user: int, seq: int) -> str:
    return f"{user:08x}{seq:024x}"


def span_id(user: int, seq: int, hop: int) -> str:
    return f"{(user & 0xFFFF):04x}{(seq & 0xFFFFFFFF):08x}{hop:04x}"


@dataclass
class SimState:
    """Mutable simulation state: fault modifiers plus telemetry buffers."""

    topology: SimTopology
    clock: Clock
    started_at: float = 0.0
    modifiers: dict[str, Modifiers] = field(default_factory=dict)
    pauses: dict[str, list[list[float | None]]] = field(default_factory=dict)
    killed_at: dict[str, float] = field(default_factory=dict)
    increments: dict[str, array] = field(default_factory=dict)
    spans: SpanBuffer = field(default_factory=SpanBuffer)
    requests: int = 0

    def __post_init__(self):
        self._lock = threading.Lock()
        self.services = self.topology.by_name
        self.index = {name: i for i, name in enumerate(self.services)}
        self.operations: list[str] = []
        self._op_index: dict[str, int] = {}
        for name in self.services:
            self.modifiers.setdefault(name, Modifiers())
            self.pauses.setdefault(name, [])
            self.increments.setdefault(name, array("d"))
        if not self.started_at:
            self.started_at = self.clock.now()

    def op_id(self, name: str) -> int:
        i = self._op_index.get(name)
        if i is None:
            i = self._op_index[name] = len(self.operations)
            self.operations.append(name)
        return i

    # -- fault modifiers ----------------------------------------------------
    def set_paused(self, service: str, paused: bool) -> None:
        m = self.modifiers[service]
        now = self.clock.now()
        if paused and not m.paused:
            self.pauses[service].append([now, None])
        elif not paused and m.paused:
            self.pauses[service][-1][1] = now
        m.paused = paused

    def set_killed(self, service: str) -> None:
        self.modifiers[service].killed = True
        self.killed_at.setdefault(service, self.clock.now())

    # -- metric export ------------------------------------------------------
    def _exporting(self, service: str, t: float) -> bool:
        k = self.killed_at.get(service)
        if k is not None and t >= k:
            return False
        for start, end in self.pauses[service]:
            if start <= t and (end is None or t < end):
                return False
        return True

    def export_samples(self, service: str, until: float | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Cumulative counter samples as the service's SDK would export them."""
        svc = self.services[service]
        interval = svc.export_interval_ms / 1000.0
        horizon = self.clock.now() if until is None else until
        n = int(np.floor((horizon - self.started_at) / interval + 1e-9))
        if n <= 0:
            return np.empty(0), np.empty(0)
        ticks = self.started_at + interval * np.arange(1, n + 1)
        keep = np.array([self._exporting(service, t) for t in ticks], dtype=bool)
        ticks = ticks[keep]
        inc = np.sort(np.frombuffer(self.increments[service], dtype="d"))
        values = np.searchsorted(inc, ticks, side="right").astype(float)
        return ticks, values


def handle_request(topology: SimTopology, state: SimState, task, rng, t: float | None = None,
                   user: int = 0, seq: int = 0, timeout_ms: float = 1000.0) -> Response:
    """Serve one request issued at ``t`` against the entry service.

    ``task`` needs ``verb`` and ``endpoint``; ``rng`` is the caller's
    ``random.Random`` stream. Dropped packets and unresponsive services make
    the client wait for ``timeout_ms``.
    """
    if t is None:
        t = state.clock.now()
    services = state.services
    modifiers = state.modifiers
    jitter = topology.latency_jitter
    u_sample = rng.random()
    spans = []
    hop_counter = [0]

    def visit(name: str, arrive: float, parent_hop: int):
        """Returns (elapsed_ms, failure_status or 0)."""
        m = modifiers[name]
        if m.killed or m.paused:
            return 0.0, STATUS_TIMEOUT
        if m.loss_p and rng.random() < m.loss_p:
            return 0.0, STATUS_LOST
        svc = services[name]
        hop = hop_counter[0]
        hop_counter[0] += 1
        own = svc.base_latency_ms * (rng.lognormvariate(0.0, jitter) if jitter else 1.0)
        if m.cpu_pressure:
            own *= 1.0 + topology.stress_slowdown * m.cpu_pressure
        own += m.added_delay_ms
        if m.corrupt_p and rng.random() < m.corrupt_p:
            own += topology.retransmit_ms
        state.increments[name].append(arrive)
        elapsed = own
        failure = 0
        if svc.error_rate and rng.random() < svc.error_rate:
            failure = STATUS_ERROR
        else:
            for callee in svc.calls:
                sub, failure = visit(callee, arrive + elapsed / 1000.0, hop)
                elapsed += sub
                if failure:
                    break
        if failure in (STATUS_LOST, STATUS_TIMEOUT):
            # the caller waits for the client timeout
            elapsed = max(elapsed, timeout_ms - (arrive - t) * 1000.0)
        if u_sample < svc.sampling_rate:
            if name == topology.entry:
                op = f"{task.verb.upper()} {task.endpoint}"
            else:
                op = svc.operation or f"{name}/handle"
            spans.append((hop, parent_hop, state.index[name], op, arrive, elapsed, ERROR if failure else OK))
        return elapsed, failure

    with state._lock:
        state.requests += 1
        elapsed, failure = visit(topology.entry, t, -1)
        for hop, parent, svc_i, op, arrive, dur, status in spans:
            state.spans.append(user, seq, hop, parent, svc_i, state.op_id(op), arrive, dur, status)
    if failure in (STATUS_LOST, STATUS_TIMEOUT) or elapsed >= timeout_ms:
        return Response(failure or STATUS_TIMEOUT, timeout_ms)
    if failure:
        return Response(failure, elapsed)
    return Response(STATUS_OK, elapsed)


# -- Prometheus-compatible range queries -------------------------------------

_RAW = re.compile(r"([a-zA-Z_:][a-zA-Z0-9_:]*)")
_FUNC = re.compile(r"(rate|increase)\(\s*([a-zA-Z_:][a-zA-Z0-9_:]*)\s*\[([0-9]+(?:ms|s|m|h))\]\s*\)")


def parse_expr(expr: str) -> tuple[str, str, float]:
    """``name`` | ``rate(name[w])`` | ``increase(name[w])`` -> (func, name, window)."""
    expr = expr.strip()
    m = _FUNC.fullmatch(expr)
    if m:
        try:
            window = parse_duration(m.group(3))
        except FormatError as exc:
            raise UnsupportedExpr(str(exc)) from None
        if window <= 0:
            raise UnsupportedExpr("range window must be positive")
        return m.group(1), m.group(2), float(window)
    m = _RAW.fullmatch(expr)
    if m:
        return "raw", m.group(1), 0.0
    raise UnsupportedExpr(f"unsupported expression {expr!r}")


def _fmt(v: float) -> str:
    return format(v, ".17g")


def query_range(state: SimState, expr: str, t0: float, t1: float, step: float) -> dict:
    """Evaluate ``expr`` at ``t0, t0+step, ... <= t1`` (Prometheus matrix JSON).

    A point is produced only at steps where the service exported a fresh
    sample within the preceding step, so sparser export intervals yield
    fewer rows. ``increase`` is the exact counter delta over the range
    window (no extrapolation); before the first sample the counter is 0.
    """
    func, name, window = parse_expr(expr)
    if step <= 0:
        raise ValueError("step must be positive")
    steps = t0 + step * np.arange(int(np.floor((t1 - t0) / step + 1e-9)) + 1) if t1 >= t0 else np.empty(0)
    result = []
    for svc_name, svc in state.services.items():
        if svc.counter_name != name:
            continue
        ticks, values = state.export_samples(svc_name)
        points = []
        for t in steps:
            hi = bisect.bisect_right(ticks, t + 1e-9)
            if hi == 0 or ticks[hi - 1] <= t - step + 1e-9:
                continue
            v = values[hi - 1]
            if func != "raw":
                lo = bisect.bisect_right(ticks, t - window + 1e-9)
                base = values[lo - 1] if lo > 0 else 0.0
                v = v - base
                if func == "rate":
                    v = v / window
            points.append([round(float(t), 3), _fmt(float(v))])
        if points:
            result.append({"metric": {"__name__": name, "service": svc_name}, "values": points})
    return {"status": "success", "data": {"resultType": "matrix", "result": result}}


# -- Jaeger-compatible trace search ------------------------------------------


def find_traces(state: SimState, service: str, start_us: int, end_us: int,
                operation: str | None = None, limit: int | None = None) -> dict:
    """Traces with a span of ``service`` (and ``operation``) starting in the window."""
    if service not in state.index:
        return {"data": [], "total": 0, "limit": limit or 0, "offset": 0, "errors": None}
    with state._lock:
        cols = state.spans.columns()
    start_us_col = np.round(cols["start"] * 1e6).astype(np.int64)
    mask = (cols["service"] == state.index[service]) & (start_us_col >= start_us) & (start_us_col <= end_us)
    if operation is not None:
        op = state._op_index.get(operation)
        mask &= cols["operation"] == (op if op is not None else -1)
    composite = (cols["user"] << 32) | cols["seq"]
    keys = np.unique(composite[mask])
    if limit:
        keys = keys[:limit]
    idx = np.nonzero(np.isin(composite, keys))[0]
    idx = idx[np.lexsort((cols["hop"][idx], composite[idx]))]
    names = list(state.services)
    data = []
    groups = np.split(idx, np.nonzero(np.diff(composite[idx]))[0] + 1) if len(idx) else []
    for group in groups:
        user, seq = int(cols["user"][group[0]]), int(cols["seq"][group[0]])
        tid = trace_id(user, seq)
        processes, spans = {}, []
        for i in group.tolist():
            svc_i = int(cols["service"][i])
            pid = f"p{svc_i + 1}"
            processes[pid] = {"serviceName": names[svc_i], "tags": []}
            hop, parent = int(cols["hop"][i]), int(cols["parent"][i])
            refs = []
            if parent >= 0:
                refs = [{"refType": "CHILD_OF", "traceID": tid, "spanID": span_id(user, seq, parent)}]
            spans.append({
                "traceID": tid,
                "spanID": span_id(user, seq, hop),
                "operationName": state.operations[int(cols["operation"][i])],
                "references": refs,
                "startTime": int(start_us_col[i]),
                "duration": int(round(float(cols["duration"][i]) * 1000)),
                "tags": [{"key": "error", "type": "bool", "value": bool(cols["status"][i])}],
                "processID": pid,
            })
        data.append({"traceID": tid, "spans": spans, "processes": processes, "warnings": None})
    return {"data": data, "total": len(data), "limit": limit or 0, "offset": 0, "errors": None}
