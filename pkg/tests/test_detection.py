from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oxn.config import DetectionConfig
from oxn.detection import (
    DetectionResult,
    InsufficientBaseline,
    ThresholdDetector,
    detect,
    first_run_end,
    summarize,
)
from oxn.observation import LabeledFrame, TimeSeriesFrame, TraceFrame, label_frame
from oxn.treatments import TreatmentRecord

T0 = 1_700_000_000.0


def frame(values, step=1.0, fault_start=50, fault_end=69, name="r"):
    """Rows at T0 + i*step; the fault covers row indices [fault_start, fault_end]."""
    values = np.asarray(values, dtype=float)
    ts = T0 + step * np.arange(len(values))
    rec = TreatmentRecord("fault", "delay", "svc", {}, "fault", start=float(ts[fault_start]),
                          end=float(ts[fault_end]), status="reverted")
    return label_frame(TimeSeriesFrame(name, "q", step, ts, values), [rec]), rec


def synthetic(seed, shift=40.0, n_base=50, n_fault=20, n_after=10):
    rng = np.random.default_rng(seed)
    base = rng.normal(10, 1, n_base)
    fault = np.full(n_fault, 10.0 + shift) if shift else rng.normal(10, 1, n_fault)
    return np.concatenate([base, fault, rng.normal(10, 1, n_after)])


@pytest.mark.parametrize("step", [1.0, 5.0, 15.0])
def test_step_change_detected_on_third_row(step):
    lf, rec = frame(synthetic(0), step=step)
    res = detect(lf, rec, DetectionConfig(z=3, k=3))
    assert res.detected and res.detection_latency == pytest.approx(2 * step)


def test_same_distribution_rarely_detected():
    hits = 0
    for seed in range(100):
        lf, rec = frame(synthetic(seed, shift=0))
        hits += detect(lf, rec).detected
    assert hits <= 5


def test_zero_variance_baseline():
    lf, rec = frame(np.full(80, 7.0))
    res = detect(lf, rec)
    assert not res.detected and res.false_alarm_rate == 0.0 and res.detection_latency is None
    values = np.full(80, 7.0)
    values[50:] = 7.001
    res = detect(*frame(values))
    assert res.detected and res.detection_latency == 2.0


def test_false_alarm_rate_counts_flagged_baseline_rows():
    values = np.zeros(80)
    values[:50] = np.tile([0.0, 1.0], 25)
    values[10] = 100.0
    res = detect(*frame(values))
    assert res.false_alarm_rate == pytest.approx(1 / 50)


def test_insufficient_baseline():
    with pytest.raises(InsufficientBaseline):
        detect(*frame(synthetic(0), fault_start=9, fault_end=20))
    detect(*frame(synthetic(0), fault_start=10, fault_end=20))


def test_trace_frames_must_be_reduced():
    tf = TraceFrame("t", "svc", ["a"], ["b"], ["svc"], ["op"], [int(T0 * 1e6)], [1], ["ok"])
    rec = TreatmentRecord("f", "delay", "svc", {}, "fault", start=T0, end=T0 + 1, status="reverted")
    with pytest.raises(TypeError):
        detect(label_frame(tf, [rec]), rec)


def test_detector_is_label_blind_after_fitting():
    lf, rec = frame(synthetic(3))
    relabeled = LabeledFrame(lf.frame, np.where(np.arange(len(lf.labels)) >= 50, "other", lf.labels), lf.records)
    assert detect(lf, rec) == detect(relabeled, rec)


def test_first_run_end():
    assert first_run_end(np.array([1, 1, 0, 1, 1, 1], bool), 3) == 5
    assert first_run_end(np.array([1, 1, 0, 1, 1], bool), 3) is None
    assert first_run_end(np.array([], bool), 1) is None


def test_unfitted_detector_refuses_to_score():
    with pytest.raises(RuntimeError):
        ThresholdDetector().score(np.zeros(3))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.5, 4.0), st.floats(0.0, 2.0), st.floats(0.0, 6.0), st.integers(1, 4))
def test_raising_z_never_helps(seed, z, dz, shift, k):
    lf, rec = frame(synthetic(seed, shift=shift) if shift else synthetic(seed, shift=0))
    lo = detect(lf, rec, DetectionConfig(z=z, k=k))
    hi = detect(lf, rec, DetectionConfig(z=z + dz, k=k))
    assert hi.false_alarm_rate <= lo.false_alarm_rate
    if hi.detected:
        assert lo.detected and lo.detection_latency <= hi.detection_latency


def result(resp, treatment, latency=None, far=0.0):
    return DetectionResult(resp, treatment, latency is not None, latency, far)


def test_summary_aggregates():
    s = summarize([result("b", "delay", 2.0, 0.1), result("a", "delay", None, 0.3), result("c", "loss")])
    assert s["delay"] == {
        "detecting_responses": ["b"], "min_latency": 2.0, "fastest_responses": ["b"],
        "mean_false_alarm_rate": pytest.approx(0.2), "verdict": "detected",
    }
    assert s["loss"]["verdict"] == "undetected" and s["loss"]["min_latency"] is None


def test_summary_tie_is_stable_by_name():
    s = summarize([result("zeta", "f", 4.0), result("alpha", "f", 4.0), result("mid", "f", 6.0)])
    assert s["f"]["fastest_responses"] == ["alpha", "zeta"]
    assert s["f"]["detecting_responses"] == ["alpha", "mid", "zeta"]


def test_summary_needs_results():
    with pytest.raises(ValueError):
        summarize([])
