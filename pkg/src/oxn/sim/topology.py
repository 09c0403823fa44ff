"""Topology of the simulated system under experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

DEFAULT_EXPORT_INTERVAL_MS = 60_000  # OpenTelemetry SDK default
DEFAULT_LATENCY_MS = 10.0


class TopologyError(ValueError):
    pass


@dataclass
class SimService:
    name: str
    base_latency_ms: float = DEFAULT_LATENCY_MS
    error_rate: float = 0.0
    calls: list[str] = field(default_factory=list)
    counter: str | None = None
    operation: str | None = None
    interfaces: list[str] = field(default_factory=lambda: ["eth0"])
    tools: list[str] = field(default_factory=lambda: ["tc", "stress-ng"])
    export_interval_ms: int = DEFAULT_EXPORT_INTERVAL_MS
    sampling_rate: float = 1.0

    @property
    def counter_name(self) -> str:
        if self.counter:
            return self.counter
        return "app_" + self.name.replace("-", "_").replace(".", "_") + "_requests_total"


@dataclass
class SimTopology:
    services: list[SimService]
    entry: str
    seed: int = 0
    latency_jitter: float = 0.2  # sigma of the lognormal per-hop multiplier
    retransmit_ms: float = 200.0  # penalty for a corrupted segment
    stress_slowdown: float = 0.5  # latency multiplier per stress worker

    def __post_init__(self):
        self.validate()

    @property
    def by_name(self) -> dict[str, SimService]:
        return {s.name: s for s in self.services}

    def validate(self) -> None:
        names = [s.name for s in self.services]
        if len(set(names)) != len(names):
            raise TopologyError("duplicate service names")
        known = set(names)
        if self.services and self.entry not in known:
            raise TopologyError(f"entry service {self.entry!r} is not in the topology")
        for s in self.services:
            if not 0.0 <= s.error_rate <= 1.0 or not 0.0 <= s.sampling_rate <= 1.0:
                raise TopologyError(f"{s.name}: probabilities must lie in [0, 1]")
            if s.base_latency_ms < 0 or s.export_interval_ms < 1:
                raise TopologyError(f"{s.name}: negative latency or export interval < 1ms")
            for c in s.calls:
                if c not in known:
                    raise TopologyError(f"{s.name} calls unknown service {c!r}")
        # acyclic call graph
        graph = {s.name: s.calls for s in self.services}
        state: dict[str, int] = {}

        def visit(n, trail):
            if state.get(n) == 1:
                raise TopologyError("call graph has a cycle: " + " -> ".join([*trail, n]))
            if state.get(n) == 2:
                return
            state[n] = 1
            for c in graph[n]:
                visit(c, [*trail, n])
            state[n] = 2

        for n in graph:
            visit(n, [])

    @classmethod
    def default(cls, seed: int = 0) -> "SimTopology":
        """Three-service desk topology: gateway -> recommender -> datastore."""
        return cls(
            services=[
                SimService("gateway", base_latency_ms=10.0, calls=["recommender"]),
                SimService("recommender", base_latency_ms=15.0, calls=["datastore"]),
                SimService("datastore", base_latency_ms=5.0),
            ],
            entry="gateway",
            seed=seed,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def from_dict(cls, data: dict) -> "SimTopology":
        data = dict(data)
        data["services"] = [SimService(**s) for s in data.get("services", [])]
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path) -> "SimTopology":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sampling_rate(env: dict[str, str]) -> float:
    sampler = env.get("OTEL_TRACES_SAMPLER", "parentbased_always_on")
    arg = env.get("OTEL_TRACES_SAMPLER_ARG")
    if sampler in ("always_on", "parentbased_always_on"):
        return 1.0
    if sampler in ("always_off", "parentbased_always_off"):
        return 0.0
    if sampler in ("traceidratio", "parentbased_traceidratio"):
        return float(arg) if arg is not None else 1.0
    raise TopologyError(f"unsupported OTEL_TRACES_SAMPLER {sampler!r}")


def topology_from_model(model, entry: str, seed: int = 0) -> SimTopology:
    """Derive a topology from an effective SUE model.

    Per-service simulation settings come from an ``x-sim`` mapping in the
    compose file (``base_latency_ms``, ``error_rate``, ``calls``, ``counter``,
    ``operation``, ``interfaces``, ``tools``); telemetry settings come from the
    OpenTelemetry environment variables the instrumentation treatments patch.
    """
    allowed = {"base_latency_ms", "error_rate", "calls", "counter", "operation", "interfaces", "tools"}
    services = []
    for name, svc in model.services.items():
        xsim = dict(svc.extra.get("x-sim") or {})
        unknown = set(xsim) - allowed
        if unknown:
            raise TopologyError(f"{name}: unknown x-sim keys {sorted(unknown)}")
        env = svc.environment
        services.append(
            SimService(
                name=name,
                export_interval_ms=int(env.get("OTEL_METRIC_EXPORT_INTERVAL", DEFAULT_EXPORT_INTERVAL_MS)),
                sampling_rate=_sampling_rate(env),
                **xsim,
            )
        )
    known = {s.name for s in services}
    for s in services:
        # calls to services filtered out of the SUE are dropped
        s.calls = [c for c in s.calls if c in known]
    return SimTopology(services=services, entry=entry, seed=seed)
