"""The built-in treatment library.

Fault treatments drive the runtime (pause/kill through the daemon API,
``tc netem`` and ``stress-ng`` through exec). Instrumentation treatments
rewrite OpenTelemetry SDK environment variables before startup.
"""

from __future__ import annotations

import math
import shlex
from typing import Annotated, Literal

from pydantic import Field, model_validator

from oxn.orchestration.runtime import RuntimeCallError
from oxn.treatments.base import (
    ApplyFailed,
    FaultParams,
    FaultTreatment,
    InstrumentationTreatment,
    NonRevertible,
    Params,
    RevertFailed,
    register,
)

Percentage = Annotated[int, Field(ge=0, le=100, strict=True)]
Probability = Annotated[float, Field(ge=0.0, le=1.0)]


def _run(runtime, service: str, command: list[str], failure=ApplyFailed) -> float:
    try:
        entry, result = runtime.exec(service, command)
    except RuntimeCallError as exc:
        raise failure(str(exc)) from exc
    if result.exit_code != 0:
        raise failure(f"{shlex.join(command)} exited {result.exit_code}: {result.output.strip()}")
    return entry.t


# -- Docker-level faults --------------------------------------------------


@register
class Pause(FaultTreatment):
    """Suspend every process of the target; the service stops responding."""

    action = "pause"

    def apply(self, runtime) -> float:
        try:
            return runtime.pause(self.target).t
        except RuntimeCallError as exc:
            raise ApplyFailed(str(exc)) from exc

    def revert(self, runtime) -> float:
        try:
            return runtime.unpause(self.target).t
        except RuntimeCallError as exc:
            raise RevertFailed(str(exc)) from exc


@register
class Kill(FaultTreatment):
    """Terminate the target. Terminal: there is no recovery."""

    action = "kill"
    revertible = False

    def apply(self, runtime) -> float:
        try:
            return runtime.kill(self.target).t
        except RuntimeCallError as exc:
            raise ApplyFailed(str(exc)) from exc

    def revert(self, runtime) -> float:
        raise NonRevertible(f"{self.name}: kill cannot be reverted")


# -- traffic control ------------------------------------------------------


class NetworkParams(FaultParams):
    interface: str


class NetemTreatment(FaultTreatment):
    params_model = NetworkParams

    def netem_args(self) -> list[str]:
        raise NotImplementedError

    def apply_command(self) -> list[str]:
        return ["tc", "qdisc", "add", "dev", self.params.interface, "root", "netem", *self.netem_args()]

    def revert_command(self) -> list[str]:
        return ["tc", "qdisc", "del", "dev", self.params.interface, "root", "netem"]

    def preconditions(self, runtime) -> list[str]:
        try:
            result = runtime.probe(self.target, ["tc", "qdisc", "show", "dev", self.params.interface])
        except RuntimeCallError as exc:
            return [f"{self.target}: {exc}"]
        if result.exit_code != 0:
            return [f"{self.target}: traffic control unavailable on {self.params.interface} "
                    f"(exit {result.exit_code})"]
        if "netem" in result.output:
            return [f"{self.target}: a netem qdisc is already installed on {self.params.interface}"]
        return []

    def apply(self, runtime) -> float:
        return _run(runtime, self.target, self.apply_command())

    def revert(self, runtime) -> float:
        return _run(runtime, self.target, self.revert_command(), failure=RevertFailed)


class DelayParams(NetworkParams):
    delay_ms: Annotated[int, Field(ge=0, strict=True)]


@register
class NetworkDelay(NetemTreatment):
    action = "delay"
    params_model = DelayParams

    def netem_args(self) -> list[str]:
        return ["delay", f"{self.params.delay_ms}ms"]


class LossParams(NetworkParams):
    loss_percentage: Percentage


@register
class PacketLoss(NetemTreatment):
    action = "loss"
    params_model = LossParams

    def netem_args(self) -> list[str]:
        return ["loss", f"{self.params.loss_percentage}%"]


class CorruptParams(NetworkParams):
    corrupt_percentage: Percentage


@register
class PacketCorruption(NetemTreatment):
    action = "corrupt"
    params_model = CorruptParams

    def netem_args(self) -> list[str]:
        return ["corrupt", f"{self.params.corrupt_percentage}%"]


# -- stressors ------------------------------------------------------------


class StressParams(FaultParams):
    stressor: Literal["cpu", "vm", "io"] = "cpu"
    workers: Annotated[int, Field(ge=1, strict=True)] = 1


@register
class Stress(FaultTreatment):
    action = "stress"
    params_model = StressParams

    def apply_command(self) -> list[str]:
        timeout = max(1, math.ceil(self.duration))
        inner = f"stress-ng --{self.params.stressor} {self.params.workers} --timeout {timeout}s"
        return ["sh", "-c", f"nohup {inner} >/dev/null 2>&1 &"]

    def preconditions(self, runtime) -> list[str]:
        try:
            result = runtime.probe(self.target, ["stress-ng", "--version"])
        except RuntimeCallError as exc:
            return [f"{self.target}: {exc}"]
        if result.exit_code != 0:
            return [f"{self.target}: stress-ng unavailable (exit {result.exit_code})"]
        return []

    def apply(self, runtime) -> float:
        return _run(runtime, self.target, self.apply_command())

    def revert(self, runtime) -> float:
        # stress-ng may already have exited on its own timeout
        return _run(runtime, self.target, ["sh", "-c", "pkill stress-ng || true"], failure=RevertFailed)


# -- instrumentation ------------------------------------------------------


class MetricIntervalParams(Params):
    export_interval_ms: Annotated[int, Field(ge=1, strict=True)]


@register
class MetricSamplingRate(InstrumentationTreatment):
    """Set the periodic metric export interval of the target's SDK."""

    action = "otel_metrics_interval"
    params_model = MetricIntervalParams

    def environment(self) -> dict[str, str]:
        return {"OTEL_METRIC_EXPORT_INTERVAL": str(self.params.export_interval_ms)}


class SamplingRateParams(Params):
    sampling_rate: Probability


@register
class TracingSamplingRate(InstrumentationTreatment):
    action = "otel_tracing_sampling_rate"
    params_model = SamplingRateParams

    def environment(self) -> dict[str, str]:
        return {
            "OTEL_TRACES_SAMPLER": "traceidratio",
            "OTEL_TRACES_SAMPLER_ARG": repr(float(self.params.sampling_rate)),
        }


class SamplingStrategyParams(Params):
    strategy: Literal["always", "never", "probabilistic"]
    sampling_rate: Probability | None = None

    @model_validator(mode="after")
    def _rate_iff_probabilistic(self):
        if (self.strategy == "probabilistic") != (self.sampling_rate is not None):
            raise ValueError("sampling_rate is required for, and only for, the probabilistic strategy")
        return self


@register
class TracingSamplingStrategy(InstrumentationTreatment):
    action = "otel_tracing_sampling_strategy"
    params_model = SamplingStrategyParams

    def environment(self) -> dict[str, str]:
        if self.params.strategy == "always":
            return {"OTEL_TRACES_SAMPLER": "always_on"}
        if self.params.strategy == "never":
            return {"OTEL_TRACES_SAMPLER": "always_off"}
        return {
            "OTEL_TRACES_SAMPLER": "traceidratio",
            "OTEL_TRACES_SAMPLER_ARG": repr(float(self.params.sampling_rate)),
        }
