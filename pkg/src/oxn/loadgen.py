"""Staged closed-workload load generation.

A stage list compiles into a piecewise user curve: a linear ramp from the
previous user count at ``spawn_rate`` users/s followed by a hold. Virtual
users are keyed to the experiment clock: the active population changes only
at whole seconds and always equals :func:`users_at` at that second.
"""

from __future__ import annotations

import bisect
import csv
import itertools
import logging
import math
import queue
import random
import threading
import time
from array import array
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)

UNREACHABLE_SECONDS = 10


class ProfileError(ValueError):
    pass


class TargetUnreachable(RuntimeError):
    pass


@dataclass(frozen=True)
class Segment:
    t_start: float
    t_end: float
    from_users: int
    target_users: int
    spawn_rate: float

    @property
    def is_ramp(self) -> bool:
        return self.from_users != self.target_users


@dataclass(frozen=True)
class LoadProfile:
    segments: tuple[Segment, ...]
    run_time: float

    def __post_init__(self):
        t = 0.0
        for s in self.segments:
            if not math.isclose(s.t_start, t, abs_tol=1e-9) or s.t_end <= s.t_start:
                raise ProfileError(f"segments must be contiguous and non-empty near t={t:g}")
            if s.target_users < 0:
                raise ProfileError("target_users must be >= 0")
            t = s.t_end
        if self.segments and not math.isclose(t, self.run_time, abs_tol=1e-9):
            raise ProfileError(f"segments cover [0, {t:g}) but run_time is {self.run_time:g}")

    @property
    def starts(self) -> list[float]:
        return [s.t_start for s in self.segments]


def compile_load_profile(spec) -> LoadProfile:
    """Compile a :class:`~oxn.config.LoadgenSpec` into a :class:`LoadProfile`."""
    run_time = float(spec.run_time)
    segments: list[Segment] = []
    t, users = 0.0, 0
    for i, stage in enumerate(spec.stages):
        target, rate = int(stage.users), float(stage.spawn_rate)
        ramp = abs(target - users) / rate
        if ramp > stage.duration + 1e-9:
            raise ProfileError(
                f"stage {i}: moving from {users} to {target} users at {rate:g}/s takes {ramp:g}s, "
                f"longer than the stage ({stage.duration:g}s)"
            )
        end = t + float(stage.duration)
        if ramp > 0:
            segments.append(Segment(t, t + ramp, users, target, rate))
        if end - (t + ramp) > 1e-9:
            segments.append(Segment(t + ramp, end, target, target, rate))
        t, users = end, target
    if run_time - t > 1e-9:
        rate = segments[-1].spawn_rate if segments else 1.0
        segments.append(Segment(t, run_time, users, users, rate))
    return LoadProfile(tuple(segments), run_time)


def users_at(profile: LoadProfile, t: float) -> int:
    """User count at ``t`` seconds; ramps round toward the previous count."""
    if not 0 <= t < profile.run_time:
        raise ValueError(f"t={t!r} outside [0, {profile.run_time:g})")
    i = bisect.bisect_right(profile.starts, t) - 1
    seg = profile.segments[i]
    if not seg.is_ramp:
        return seg.target_users
    delta = seg.target_users - seg.from_users
    moved = min(abs(delta), math.floor(seg.spawn_rate * (t - seg.t_start) + 1e-9))
    return seg.from_users + (moved if delta > 0 else -moved)


@dataclass
class LoadStats:
    """Per-second series plus the raw request log."""

    start: float
    active_users: np.ndarray
    requests_sent: np.ndarray
    successes: np.ndarray
    failures: np.ndarray
    p50: np.ndarray
    p95: np.ndarray
    p99: np.ndarray
    request_time: np.ndarray = field(default_factory=lambda: np.empty(0))  # offset from start, s
    request_latency: np.ndarray = field(default_factory=lambda: np.empty(0))  # ms
    request_ok: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=bool))
    request_task: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int64))

    COLUMNS = ("second", "active_users", "requests_sent", "successes", "failures", "p50_ms", "p95_ms", "p99_ms")

    def __len__(self) -> int:
        return len(self.active_users)

    def in_window(self, t0: float, t1: float) -> np.ndarray:
        """Mask of requests issued in [t0, t1] (offsets from load start)."""
        return (self.request_time >= t0) & (self.request_time <= t1)

    def failure_ratio(self, t0: float, t1: float) -> float:
        mask = self.in_window(t0, t1)
        n = int(mask.sum())
        return float((~self.request_ok[mask]).sum() / n) if n else float("nan")

    def median_latency(self, t0: float, t1: float) -> float:
        mask = self.in_window(t0, t1)
        return float(np.median(self.request_latency[mask])) if mask.any() else float("nan")

    def rows(self):
        for s in range(len(self)):
            yield [s, int(self.active_users[s]), int(self.requests_sent[s]), int(self.successes[s]),
                   int(self.failures[s]), *(None if np.isnan(v) else round(float(v), 3)
                                            for v in (self.p50[s], self.p95[s], self.p99[s]))]

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for row in self.rows():
                w.writerow(["" if v is None else v for v in row])

    def summary(self) -> dict:
        sent = int(self.requests_sent.sum())
        lat = self.request_latency
        return {
            "seconds": len(self),
            "requests": sent,
            "successes": int(self.successes.sum()),
            "failures": int(self.failures.sum()),
            "failure_ratio": round(float(self.failures.sum() / sent), 6) if sent else 0.0,
            "max_users": int(self.active_users.max()) if len(self) else 0,
            "latency_p50_ms": round(float(np.percentile(lat, 50)), 3) if len(lat) else None,
            "latency_p95_ms": round(float(np.percentile(lat, 95)), 3) if len(lat) else None,
            "latency_p99_ms": round(float(np.percentile(lat, 99)), 3) if len(lat) else None,
        }


def user_rng(seed: int, index: int) -> random.Random:
    """Independent, reproducible stream for one virtual user."""
    entropy = np.random.SeedSequence([seed & 0xFFFFFFFF, index]).generate_state(2)
    return random.Random(int(entropy[0]) << 32 | int(entropy[1]))


# -- transports -----------------------------------------------------------

Transport = Callable[..., "object"]  # (task, t, rng, user, seq) -> response with .status/.latency_ms/.ok


@dataclass(frozen=True)
class HttpResult:
    status: int
    latency_ms: float

    @property
    def ok(self) -> bool:
        return 0 < self.status < 400


class HttpTransport:
    """Real HTTP/1.1 requests. GET/DELETE params go in the query string, POST/PUT as JSON."""

    def __init__(self, base_url: str, timeout: float = 1.0, client=None):
        import httpx

        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.client = client or httpx.Client(timeout=timeout)
        self._httpx = httpx

    def __call__(self, task, t=None, rng=None, user=0, seq=0) -> HttpResult:
        url = self.base_url + task.endpoint
        kw = {"params": task.params} if task.verb in ("get", "delete") else {"json": task.params}
        t0 = time.monotonic()
        try:
            resp = self.client.request(task.verb.upper(), url, timeout=self.timeout, **kw)
            resp.read()
            status = resp.status_code
        except self._httpx.HTTPError:
            status = 0
        return HttpResult(status, (time.monotonic() - t0) * 1000.0)


class SimTransport:
    """Requests served in-process by a simulated SUE at experiment-clock time."""

    def __init__(self, runtime, timeout: float = 1.0):
        self.runtime = runtime
        self.timeout_ms = timeout * 1000.0

    def __call__(self, task, t, rng, user=0, seq=0):
        from oxn.sim.engine import handle_request

        state = self.runtime.sim
        return handle_request(state.topology, state, task, rng, t, user=user, seq=seq, timeout_ms=self.timeout_ms)


# -- the generator ----------------------------------------------------------


@dataclass
class _User:
    index: int
    rng: random.Random
    gen: int = 0
    active: bool = False
    seq: int = 0


class LoadGenerator:
    """Closed-workload generator bound to one clock.

    On a virtual clock users are discrete-event actors; on a wall clock each
    user is a thread. Either way the population is adjusted once per second
    by the same tick, and request outcomes flow through one aggregator.
    """

    def __init__(self, profile: LoadProfile, tasks: Sequence, transport: Transport, clock,
                 seed: int = 0, think_time: float = 0.0,
                 on_unreachable: Callable[[TargetUnreachable], None] | None = None):
        if not tasks:
            raise ValueError("at least one task is required")
        self.profile = profile
        self.tasks = list(tasks)
        self.transport = transport
        self.clock = clock
        self.seed = seed
        self.think_time = think_time
        self.on_unreachable = on_unreachable
        self.seconds = math.ceil(profile.run_time - 1e-9)
        self._cum_weights = list(itertools.accumulate(getattr(t, "weight", 1) for t in self.tasks))
        self._users: list[_User] = []
        self._n_active = 0
        self._active_log = np.zeros(self.seconds, dtype=np.int64)
        self._sent = np.zeros(self.seconds, dtype=np.int64)
        self._ok = np.zeros(self.seconds, dtype=np.int64)
        self._t = array("d")
        self._lat = array("d")
        self._okflag = array("b")
        self._task = array("q")
        self._queue: queue.SimpleQueue = queue.SimpleQueue()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self.start: float | None = None
        self.end: float | None = None
        self.unreachable: TargetUnreachable | None = None

    # -- population -------------------------------------------------------
    def install(self, start: float) -> None:
        self.start = start
        self.end = start + self.profile.run_time
        for s in range(self.seconds):
            self.clock.call_at(start + s, lambda s=s: self._tick(s), priority=-2)

    def _user(self, i: int) -> _User:
        while len(self._users) <= i:
            self._users.append(_User(len(self._users), user_rng(self.seed, len(self._users))))
        return self._users[i]

    def _tick(self, second: int) -> None:
        self._drain()
        if self._stop.is_set():
            return
        target = users_at(self.profile, second)
        now = self.start + second
        while self._n_active < target:
            u = self._user(self._n_active)
            u.active = True
            u.gen += 1
            self._launch(u, now)
            self._n_active += 1
        while self._n_active > target:
            u = self._users[self._n_active - 1]
            u.active = False
            u.gen += 1
            self._n_active -= 1
        self._active_log[second] = sum(1 for u in self._users if u.active)
        self._check_unreachable(second)

    def _check_unreachable(self, second: int) -> None:
        if second < UNREACHABLE_SECONDS or self.unreachable is not None:
            return
        window = slice(second - UNREACHABLE_SECONDS, second)
        if (self._sent[window] > 0).all() and (self._ok[window] == 0).all():
            exc = TargetUnreachable(
                f"every request failed for {UNREACHABLE_SECONDS} consecutive seconds "
                f"(t={second - UNREACHABLE_SECONDS}..{second}s)"
            )
            if self.on_unreachable is not None:
                self.on_unreachable(exc)
            else:
                self.unreachable = exc

    def stop(self) -> None:
        self._stop.set()
        for u in self._users:
            u.active = False
            u.gen += 1
        self._n_active = 0

    # -- requests ---------------------------------------------------------
    def _pick(self, rng: random.Random):
        if len(self.tasks) == 1:
            return 0
        x = rng.random() * self._cum_weights[-1]
        return bisect.bisect_right(self._cum_weights, x)

    def _launch(self, u: _User, now: float) -> None:
        if self.clock.virtual:
            gen = u.gen
            self.clock.call_at(now, lambda: self._virtual_request(u, gen))
        else:
            th = threading.Thread(target=self._thread_loop, args=(u, u.gen), daemon=True,
                                  name=f"vu-{u.index}")
            self._threads.append(th)
            th.start()

    def _virtual_request(self, u: _User, gen: int) -> None:
        if gen != u.gen or not u.active:
            return
        t = self.clock.now()
        if t >= self.end:
            return
        ti = self._pick(u.rng)
        resp = self.transport(self.tasks[ti], t, u.rng, user=u.index, seq=u.seq)
        u.seq += 1
        self._record(t, resp.latency_ms, resp.ok, ti)
        nxt = t + max(resp.latency_ms / 1000.0 + self.think_time, 1e-6)
        self.clock.call_at(nxt, lambda: self._virtual_request(u, gen))

    def _thread_loop(self, u: _User, gen: int) -> None:
        while u.active and u.gen == gen and not self._stop.is_set():
            t = self.clock.now()
            if t >= self.end:
                return
            ti = self._pick(u.rng)
            resp = self.transport(self.tasks[ti], t, u.rng, user=u.index, seq=u.seq)
            u.seq += 1
            self._queue.put((t, resp.latency_ms, resp.ok, ti))
            if self.think_time:
                time.sleep(self.think_time)

    def _drain(self) -> None:
        while True:
            try:
                item = self._queue.get_nowait()
            except queue.Empty:
                return
            self._record(*item)

    def _record(self, t: float, latency_ms: float, ok: bool, task_index: int) -> None:
        offset = t - self.start
        second = int(offset)
        if not 0 <= second < self.seconds:
            return
        self._t.append(offset)
        self._lat.append(latency_ms)
        self._okflag.append(1 if ok else 0)
        self._task.append(task_index)
        self._sent[second] += 1
        if ok:
            self._ok[second] += 1

    # -- results ----------------------------------------------------------
    def finish(self, join_timeout: float = 5.0) -> LoadStats:
        self.stop()
        for th in self._threads:
            th.join(join_timeout)
        self._drain()
        t = np.frombuffer(self._t, dtype="d").copy()
        lat = np.frombuffer(self._lat, dtype="d").copy()
        ok = np.frombuffer(self._okflag, dtype="b").astype(bool)
        task = np.frombuffer(self._task, dtype="q").copy()
        seconds = t.astype(np.int64)
        n = self.seconds
        p = {q: np.full(n, np.nan) for q in (50, 95, 99)}
        if len(t):
            order = np.argsort(seconds, kind="stable")
            bounds = np.searchsorted(seconds[order], np.arange(n + 1))
            for s in range(n):
                chunk = lat[order[bounds[s]:bounds[s + 1]]]
                if len(chunk):
                    for q in p:
                        p[q][s] = np.percentile(chunk, q)
        sent = self._sent.copy()
        succ = self._ok.copy()
        return LoadStats(
            start=self.start, active_users=self._active_log.copy(), requests_sent=sent,
            successes=succ, failures=sent - succ, p50=p[50], p95=p[95], p99=p[99],
            request_time=t, request_latency=lat, request_ok=ok, request_task=task,
        )


def run_load(profile: LoadProfile, tasks: Sequence, base_url: str, clock, *, transport: Transport | None = None,
             seed: int = 0, think_time: float = 0.0, timeout: float = 1.0, start: float | None = None) -> LoadStats:
    """Drive the whole profile on ``clock`` and return the collected stats.

    Raises :class:`TargetUnreachable` if every request failed for ten
    consecutive seconds.
    """
    if transport is None:
        transport = HttpTransport(base_url, timeout=timeout)
    gen = LoadGenerator(profile, tasks, transport, clock, seed=seed, think_time=think_time)
    start = clock.now() if start is None else start
    gen.install(start)
    end = start + profile.run_time
    step = 1.0
    t = start
    while t < end and gen.unreachable is None:
        t = min(end, t + step)
        clock.run_until(t)
    stats = gen.finish()
    if gen.unreachable is not None:
        raise gen.unreachable
    return stats
