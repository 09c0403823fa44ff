"""Fault detection over labeled response frames.

The built-in detector is a z-score threshold fitted on the pre-fault
baseline. A fault counts as detected once ``k`` consecutive rows inside the
fault window are flagged.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Protocol, Sequence

import numpy as np

from oxn.observation import NO_TREATMENT, LabeledFrame, TimeSeriesFrame

EPSILON = 1e-9
MIN_BASELINE = 10


class InsufficientBaseline(ValueError):
    pass


class Detector(Protocol):
    def fit(self, baseline: np.ndarray) -> "Detector": ...

    def score(self, values: np.ndarray) -> np.ndarray: ...


@dataclass
class ThresholdDetector:
    """Flags values more than ``z`` standard deviations from the baseline mean.

    The standard deviation is the population one (``ddof=0``) and is floored
    at ``EPSILON`` so a constant baseline flags any deviation but never the
    baseline value itself.
    """

    z: float = 3.0
    mu: float | None = None
    sigma: float | None = None

    def fit(self, baseline: np.ndarray) -> "ThresholdDetector":
        baseline = np.asarray(baseline, dtype=float)
        self.mu = float(baseline.mean())
        self.sigma = max(float(baseline.std()), EPSILON)
        return self

    def score(self, values: np.ndarray) -> np.ndarray:
        if self.mu is None:
            raise RuntimeError("detector is not fitted")
        return np.abs(np.asarray(values, dtype=float) - self.mu) > self.z * self.sigma


@dataclass
class DetectionResult:
    response: str
    treatment: str
    detected: bool
    detection_latency: float | None
    false_alarm_rate: float
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def first_run_end(flags: np.ndarray, k: int) -> int | None:
    """Index of the row completing the first run of ``k`` consecutive True values."""
    run = 0
    for i, f in enumerate(flags):
        run = run + 1 if f else 0
        if run >= k:
            return i
    return None


def detect(frame: LabeledFrame, record, config=None, detector: Detector | None = None) -> DetectionResult:
    """Decide whether ``record``'s fault is visible in a metric frame.

    Baseline rows are the ``NoTreatment`` rows before the fault start. The
    reported latency is the timestamp of the row completing the first run of
    ``k`` flagged rows, minus the fault start.
    """
    z = getattr(config, "z", 3.0) if config is not None else 3.0
    k = getattr(config, "k", 3) if config is not None else 3
    inner = frame.frame
    if not isinstance(inner, TimeSeriesFrame):
        raise TypeError("detect needs a metric frame; reduce traces with trace_series first")
    start, end = record.window
    t = inner.timestamp
    v = inner.value
    baseline = (frame.labels == NO_TREATMENT) & (t < start)
    n_base = int(baseline.sum())
    if n_base < MIN_BASELINE:
        raise InsufficientBaseline(f"{inner.response}: {n_base} baseline rows before {record.name}, need {MIN_BASELINE}")
    det = detector if detector is not None else ThresholdDetector(z=z)
    det.fit(v[baseline])
    flags = det.score(v)
    in_window = (t >= start) & (t <= end)
    hit = first_run_end(flags[in_window], k)
    latency = None if hit is None else float(t[in_window][hit] - start)
    params = {"z": z, "k": k, "detector": type(det).__name__}
    if isinstance(det, ThresholdDetector):
        params.update(mu=det.mu, sigma=det.sigma, baseline_rows=n_base)
    return DetectionResult(inner.response, record.name, hit is not None, latency,
                           float(flags[baseline].mean()), params)


def summarize(results: Sequence[DetectionResult]) -> dict[str, dict]:
    """Per-treatment roll-up: detecting responses, fastest detection, mean false-alarm rate."""
    if not results:
        raise ValueError("nothing to summarize")
    out: dict[str, dict] = {}
    for name in sorted({r.treatment for r in results}):
        rs = sorted((r for r in results if r.treatment == name), key=lambda r: r.response)
        hits = [r for r in rs if r.detected]
        min_latency = min((r.detection_latency for r in hits), default=None)
        out[name] = {
            "detecting_responses": [r.response for r in hits],
            "min_latency": min_latency,
            "fastest_responses": [r.response for r in hits if r.detection_latency == min_latency],
            "mean_false_alarm_rate": float(np.mean([r.false_alarm_rate for r in rs])),
            "verdict": "detected" if hits else "undetected",
        }
    return out
