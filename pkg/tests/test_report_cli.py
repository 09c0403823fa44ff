from __future__ import annotations

import json
import time

import jsonschema
import numpy as np
import pytest

from conftest import treatment, variant, write_experiment
from oxn.cli import main
from oxn.observation import LabeledFrame, TimeSeriesFrame, label_frame
from oxn.plots import plot_frame, render_plots
from oxn.report import (
    EXIT_ORCHESTRATION,
    EXIT_VALIDATION,
    format_summary,
    load_report,
    load_schema,
    run_experiment,
    strip_volatile,
)
from oxn.treatments import TreatmentRecord

INSTRUMENT = treatment("change_metric_interval", "otel_metrics_interval",
                       service_name="recommendation-service", export_interval_ms=1000)
LOSS = treatment("loss", "loss", service_name="recommendation-service", duration="30s",
                 loss_percentage=50, interface="eth0")
DELAY = treatment("delay", "delay", service_name="recommendation-service", duration="20s",
                  delay_ms=200, interface="eth0")


def short(**changes):
    """A three minute experiment with small windows."""
    doc = variant(
        responses=[{"recs": {"type": "metric", "metric_name": "increase(app_recommendations_counter_total[1m])",
                             "left_window": "60s", "right_window": "30s", "step": 1}},
                   {"frontend_spans": {"type": "trace", "service_name": "frontend",
                                       "left_window": "60s", "right_window": "30s"}}],
        treatments=[INSTRUMENT, LOSS],
        loadgen={"run_time": "3m", "base_url": "http://frontend:8080",
                 "stages": [{"duration": 180, "users": 10, "spawn_rate": 10}],
                 "tasks": [{"endpoint": "/", "verb": "get", "params": {}}]},
    )
    doc["experiment"].update(changes)
    return doc


@pytest.fixture(scope="module")
def finished(tmp_path_factory):
    d = tmp_path_factory.mktemp("exp")
    path = write_experiment(d, short())
    t0 = time.perf_counter()
    code = main(["run", str(path), "--out", str(d / "runs"), "--run-id", "r1", "--plots", "--seed", "3"])
    return code, d / "runs" / "r1", time.perf_counter() - t0


def test_run_succeeds_and_writes_artifacts(finished):
    code, run_dir, _ = finished
    assert code == 0
    for name in ("report.json", "manifest.json", "journal.ndjson", "loadstats.csv", "effective-compose.yml"):
        assert (run_dir / name).is_file(), name
    report = load_report(run_dir)
    assert report["status"] == "ok" and report["failure"] is None
    jsonschema.validate(report, load_schema())


def test_report_contents(finished):
    _, run_dir, _ = finished
    report = load_report(run_dir)
    assert {f["response"] for f in report["frames"]} == {
        "recs", "frontend_spans", "frontend_spans.span_count", "frontend_spans.p95_duration_ms"}
    assert set(report["detection"]["summary"]) == {"loss"}
    names = [r["name"] for r in report["treatments"]]
    assert names == ["change_metric_interval", "loss"]
    loss = report["treatments"][1]
    assert loss["status"] == "reverted" and loss["end"] - loss["start"] == pytest.approx(30, abs=1e-6)
    steps = report["timings"]["steps"]
    assert set(steps) == {"parse", "build_sue", "start", "run", "collect", "store", "detect", "teardown"}
    assert sum(steps.values()) <= report["timings"]["total"] + 1e-6


def test_run_writes_plots(finished):
    _, run_dir, _ = finished
    svg = (run_dir / "plots" / "recs.csv").with_suffix(".svg")
    assert svg.is_file() and "fault-window" in svg.read_text()


def test_report_subcommand_prints_summary(finished, capsys):
    _, run_dir, _ = finished
    assert main(["report", str(run_dir)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("run r1  status=ok") and "loss:" in out and "frame recs:" in out


def test_plot_subcommand(finished, capsys):
    _, run_dir, _ = finished
    assert main(["plot", str(run_dir)]) == 0
    assert capsys.readouterr().out.strip().endswith("recs.svg")


def test_report_missing_run_dir(tmp_path, capsys):
    assert main(["report", str(tmp_path / "nope")]) == 4
    assert "cannot read report" in capsys.readouterr().err


def test_same_seed_same_report(finished, tmp_path):
    _, run_dir, _ = finished
    path = write_experiment(tmp_path, short())
    again = run_experiment(path, out=tmp_path / "runs", run_id="r2", seed=3)
    first = strip_volatile(load_report(run_dir))
    second = strip_volatile(again.report)
    first["experiment"].pop("file"), second["experiment"].pop("file")
    assert json.dumps(first, sort_keys=True, default=str) == json.dumps(second, sort_keys=True, default=str)


def test_two_faults_get_separate_frames(tmp_path):
    path = write_experiment(tmp_path, short(
        treatments=[LOSS, DELAY],
        loadgen={"run_time": "6m", "base_url": "http://frontend:8080",
                 "stages": [{"duration": 360, "users": 10, "spawn_rate": 10}],
                 "tasks": [{"endpoint": "/", "verb": "get", "params": {}}]}))
    result = run_experiment(path, out=tmp_path / "runs", run_id="multi")
    assert result.exit_code == 0, result.report["failure"]
    names = {f["response"] for f in result.report["frames"]}
    assert {"recs@loss", "recs@delay"} <= names
    by_name = {r["name"]: r for r in result.report["treatments"]}
    assert by_name["loss"]["end"] < by_name["delay"]["start"]
    for f in result.report["frames"]:
        if f["response"].startswith("recs@") and f["time_range"]:
            rec = by_name[f["response"].split("@")[1]]
            assert f["time_range"][0] >= rec["start"] - 60 - 1e-6
            assert f["time_range"][1] <= rec["end"] + 30 + 1e-6


def test_baseline_run_has_frames_but_no_detection(tmp_path):
    path = write_experiment(tmp_path, short(treatments=[INSTRUMENT], baseline=True))
    result = run_experiment(path, out=tmp_path / "runs", run_id="base")
    assert result.exit_code == 0, result.report["failure"]
    assert result.report["frames"] and result.report["detection"]["results"] == []


# -- validate ------------------------------------------------------------------------


def test_validate_ok(tmp_path, capsys):
    path = write_experiment(tmp_path, short())
    assert main(["validate", str(path)]) == 0
    assert capsys.readouterr().out.strip() == "OK"


def test_validate_reports_missing_section(tmp_path, capsys):
    doc = short()
    del doc["experiment"]["sue"]
    path = write_experiment(tmp_path, doc)
    assert main(["validate", str(path)]) == 1
    assert capsys.readouterr().out.strip() == "sue: Field required"


def test_validate_reports_overflow(tmp_path, capsys):
    path = write_experiment(tmp_path, short(loadgen={
        "run_time": "1m", "base_url": "http://frontend:8080",
        "stages": [{"duration": 60, "users": 1, "spawn_rate": 1}],
        "tasks": [{"endpoint": "/", "verb": "get", "params": {}}]}))
    assert main(["validate", str(path)]) == 1
    assert "schedule_overflow" in capsys.readouterr().out


def test_invalid_run_writes_partial_report(tmp_path):
    doc = short()
    del doc["experiment"]["sue"]
    result = run_experiment(write_experiment(tmp_path, doc), out=tmp_path / "runs", run_id="bad")
    assert result.exit_code == EXIT_VALIDATION
    report = load_report(result.run_dir)
    assert report["failure"]["step"] == "parse" and report["frames"] == []
    jsonschema.validate(report, load_schema())


def test_container_backend_without_daemon(tmp_path, monkeypatch):
    monkeypatch.setenv("DOCKER_HOST", f"unix://{tmp_path / 'no-such.sock'}")
    path = write_experiment(tmp_path, short())
    result = run_experiment(path, backend="container", out=tmp_path / "runs", run_id="c",
                            prometheus_url="http://127.0.0.1:9", jaeger_url="http://127.0.0.1:9")
    assert result.exit_code == EXIT_ORCHESTRATION
    report = load_report(result.run_dir)
    assert report["failure"]["step"] == "start"
    assert report["load"] is None and "failed at start" in format_summary(report)


def test_container_backend_needs_backend_urls(tmp_path):
    result = run_experiment(write_experiment(tmp_path, short()), backend="container",
                            out=tmp_path / "runs", run_id="c")
    assert result.exit_code == EXIT_ORCHESTRATION and result.report["failure"]["step"] == "build_sue"


# -- plots ---------------------------------------------------------------------------

T0 = 1_700_000_000.0


def _labeled(n, fault=(300, 420)):
    rng = np.random.default_rng(0)
    v = rng.normal(10, 1, n)
    v[fault[0]:fault[1]] += 20
    ts = T0 + np.arange(n, dtype=float)
    rec = TreatmentRecord("f", "loss", "svc", {}, "fault", start=T0 + fault[0], end=T0 + fault[1],
                          status="reverted")
    return label_frame(TimeSeriesFrame("r", "q", 1.0, ts, v), [rec]), [(rec.start, rec.end)]


def test_plot_shades_fault_and_is_fast(tmp_path):
    lf, windows = _labeled(600)
    t0 = time.perf_counter()
    plot_frame(lf, windows, tmp_path / "a.svg")
    assert time.perf_counter() - t0 < 1.0
    text = (tmp_path / "a.svg").read_text()
    assert text.count("fault-window") == 1 and "flagged" in text


def test_plot_empty_frame_says_no_data(tmp_path):
    empty = LabeledFrame(TimeSeriesFrame("r", "q", 1.0, [], [], empty_result=True), np.array([], dtype=object))
    plot_frame(empty, [], tmp_path / "e.svg")
    assert "no data" in (tmp_path / "e.svg").read_text()


def test_render_plots_skips_broken_frames(finished, tmp_path):
    import shutil

    _, run_dir, _ = finished
    copy = tmp_path / "copy"
    shutil.copytree(run_dir, copy)
    (copy / "frames" / "recs.csv").unlink()
    names = sorted(p.name for p in render_plots(copy))
    assert names == ["frontend_spans.p95_duration_ms.svg", "frontend_spans.span_count.svg"]
