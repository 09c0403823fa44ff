from __future__ import annotations

import copy

import jsonschema
import pytest
import yaml
from hypothesis import given
from hypothesis import strategies as st

from conftest import COMPOSE, SAMPLE, treatment, variant, write_experiment
from oxn.config import (
    ExperimentSyntaxError,
    SchemaError,
    ValidationFailed,
    experiment_schema,
    load_experiment,
    parse_experiment,
    serialize_experiment,
    validate,
)
from oxn.treatments import lookup, registered_actions
from oxn.treatments.schedule import ScheduleOverflow, plan_schedule, required_run_time
from oxn.units import FormatError, format_duration, parse_duration


# -- durations -------------------------------------------------------------------


@pytest.mark.parametrize("text,seconds", [
    ("240s", 240), ("10m", 600), (600, 600), ("600", 600), ("1h", 3600), ("1500ms", 1.5), ("0", 0),
])
def test_parse_duration(text, seconds):
    assert parse_duration(text) == seconds


@pytest.mark.parametrize("text", ["1h30m", "-5s", "5 s", "5sec", "1.5s", "", "05s", True, None, -3, "ten minutes"])
def test_parse_duration_rejects(text):
    with pytest.raises(FormatError):
        parse_duration(text)


@given(st.integers(min_value=0, max_value=10**7))
def test_duration_literal_roundtrip(ms):
    assert round(parse_duration(format_duration(ms / 1000)) * 1000) == ms


# -- parsing ---------------------------------------------------------------------


def test_sample_parses():
    spec = load_experiment(SAMPLE)
    r = spec.response("recommendations_per_min")
    assert (r.kind, r.left_window, r.right_window, r.step) == ("metric", 240, 240, 1)
    assert r.query == "increase(app_recommendations_counter_total[1m])"
    assert [t.name for t in spec.instrumentation_treatments] == ["change_metric_interval"]
    (fault,) = spec.fault_treatments
    assert fault.params == {"service_name": "recommendation-service", "duration": 120,
                            "loss_percentage": 50, "interface": "eth0"}
    assert spec.loadgen.run_time == 600
    assert (spec.loadgen.stages[0].users, spec.loadgen.stages[0].spawn_rate) == (50, 25)
    assert spec.sue.exclude == ["loadgenerator"]
    assert spec.detection.z == 3 and spec.detection.k == 3


def test_serialize_roundtrip():
    spec = load_experiment(SAMPLE)
    text = serialize_experiment(spec)
    again = parse_experiment(text)
    assert again == spec
    assert serialize_experiment(again) == text


def test_syntax_error_has_location():
    with pytest.raises(ExperimentSyntaxError) as exc:
        parse_experiment("experiment:\n  responses: [\n")
    assert "line" in exc.value.path


def test_schema_error_path_points_at_param():
    doc = variant(treatments=[treatment("x", "loss", service_name="frontend", duration="1m",
                                        loss_percentage=150, interface="eth0")])
    with pytest.raises(SchemaError) as exc:
        parse_experiment(yaml.safe_dump(doc))
    assert exc.value.path == "treatments[0].params.loss_percentage"


def test_unknown_action_rejected():
    doc = variant(treatments=[treatment("x", "meteor_strike", service_name="frontend")])
    with pytest.raises(SchemaError, match="unknown treatment action"):
        parse_experiment(yaml.safe_dump(doc))


def test_sampling_strategy_requires_rate_only_when_probabilistic():
    good = variant(treatments=[treatment("s", "otel_tracing_sampling_strategy", service_name="frontend",
                                         strategy="probabilistic", sampling_rate=0.1)], baseline=True)
    parse_experiment(yaml.safe_dump(good))
    bad = variant(treatments=[treatment("s", "otel_tracing_sampling_strategy", service_name="frontend",
                                        strategy="never", sampling_rate=0.1)], baseline=True)
    with pytest.raises(SchemaError):
        parse_experiment(yaml.safe_dump(bad))


def test_no_treatments_needs_baseline():
    with pytest.raises(SchemaError):
        parse_experiment(yaml.safe_dump(variant(treatments=[])))
    spec = parse_experiment(yaml.safe_dump(variant(treatments=[], baseline=True)))
    assert spec.baseline and not spec.treatments


def test_stages_must_fit_run_time():
    base = variant()["experiment"]["loadgen"]
    doc = variant(loadgen={**base, "stages": [{"duration": 700, "users": 5, "spawn_rate": 1}]})
    with pytest.raises(SchemaError, match="more than run_time"):
        parse_experiment(yaml.safe_dump(doc))


def test_relative_compose_resolved_against_file(tmp_path):
    path = write_experiment(tmp_path, variant())
    spec = load_experiment(path)
    assert spec.sue.compose_path == tmp_path / COMPOSE.name


# -- cross-field validation ------------------------------------------------------


def test_validate_sample_ok():
    assert str(validate(load_experiment(SAMPLE, check=False))) == "OK"


def test_overflow_message(tmp_path):
    base = variant()["experiment"]["loadgen"]
    doc = variant(loadgen={**base, "run_time": "5m", "stages": [{"duration": 300, "users": 1, "spawn_rate": 1}]})
    with pytest.raises(ValidationFailed) as exc:
        load_experiment(write_experiment(tmp_path, doc))
    assert exc.value.report.codes() == ["schedule_overflow"]
    assert "fault window exceeds run time" in str(exc.value.report)


def test_missing_compose_file(tmp_path):
    doc = variant(sue={"compose": "nope.yml"})
    path = tmp_path / "e.yml"
    path.write_text(yaml.safe_dump(doc))
    with pytest.raises(ValidationFailed) as exc:
        load_experiment(path)
    assert exc.value.report.codes() == ["compose_missing"]


# -- schedule arithmetic ----------------------------------------------------------


def test_sample_schedule():
    sched = plan_schedule(load_experiment(SAMPLE))
    assert sched.windows() == [(240.0, 360.0)]
    assert (sched.warmup, sched.gap, sched.tail) == (240, 240, 240)


def test_two_faults_need_960s():
    loss = variant()["experiment"]["treatments"][1]
    other = treatment("second", "delay", service_name="frontend", duration="120s", delay_ms=50, interface="eth0")
    spec = parse_experiment(yaml.safe_dump(variant(treatments=[loss, other])))
    assert required_run_time(spec) == 240 + 120 + 240 + 120 + 240 == 960
    with pytest.raises(ScheduleOverflow) as exc:
        plan_schedule(spec)
    assert exc.value.required == 960


@given(
    lefts=st.lists(st.integers(0, 300), min_size=1, max_size=3),
    rights=st.lists(st.integers(0, 300), min_size=1, max_size=3),
    durations=st.lists(st.integers(1, 200), min_size=1, max_size=4),
)
def test_schedule_windows_disjoint_and_observed(lefts, rights, durations):
    responses = [{f"r{i}": {"type": "metric", "metric_name": "m", "left_window": lefts[i % len(lefts)],
                            "right_window": rights[i % len(rights)]}} for i in range(max(len(lefts), len(rights)))]
    treatments = [treatment(f"f{i}", "pause", service_name="frontend", duration=d) for i, d in enumerate(durations)]
    doc = variant(responses=responses, treatments=treatments)
    doc["experiment"]["loadgen"]["run_time"] = 100_000
    spec = parse_experiment(yaml.safe_dump(doc))
    need = required_run_time(spec)
    doc["experiment"]["loadgen"]["run_time"] = int(need)
    doc["experiment"]["loadgen"]["stages"] = [{"duration": int(need), "users": 1, "spawn_rate": 1}]
    spec = parse_experiment(yaml.safe_dump(doc))
    windows = plan_schedule(spec).windows()
    left, right = max(lefts), max(rights)
    assert windows[0][0] == left
    assert windows[-1][1] + right == need
    for (s0, e0), (s1, e1) in zip(windows, windows[1:]):
        # each fault's right window ends before the next fault's left window begins
        assert e0 + right <= s1 and s1 - left >= e0


# -- published JSON Schema ------------------------------------------------------------



def _schema_ok(doc) -> bool:
    return jsonschema.Draft202012Validator(experiment_schema()).is_valid(doc)


def _parser_ok(doc) -> bool:
    try:
        parse_experiment(yaml.safe_dump(doc))
    except SchemaError:
        return False
    return True


def test_schema_is_well_formed_and_accepts_sample():
    jsonschema.Draft202012Validator.check_schema(experiment_schema())
    assert _schema_ok(yaml.safe_load(SAMPLE.read_text()))


def test_schema_covers_every_action():
    schema = experiment_schema()
    assert sorted(schema["$defs"]["treatment"]["properties"]["action"]["enum"]) == sorted(registered_actions())
    for action in registered_actions():
        model = lookup(action).params_model
        params = schema["$defs"]["params"][action]
        assert set(params["properties"]) == set(model.model_fields), action
        assert set(params["required"]) == {k for k, f in model.model_fields.items() if f.is_required()}, action


def _mutations():
    base = variant()["experiment"]
    resp = base["responses"][0]["recommendations_per_min"]
    loss = base["treatments"][1]["package_loss_treatment"]
    lg = base["loadgen"]
    trace = {"type": "trace", "service_name": "frontend", "left_window": "10s", "right_window": "10s"}
    return {
        "unchanged": {},
        "unknown top key": {"colour": "blue"},
        "unknown response key": {"responses": [{"r": {**resp, "aggregation": "sum"}}]},
        "metric without name": {"responses": [{"r": {k: v for k, v in resp.items() if k != "metric_name"}}]},
        "trace response": {"responses": [{"t": trace}]},
        "trace with operation": {"responses": [{"t": {**trace, "operation_name": "GET /"}}]},
        "trace with metric_name": {"responses": [{"t": {**trace, "metric_name": "x"}}]},
        "bad response type": {"responses": [{"r": {**resp, "type": "log"}}]},
        "no responses": {"responses": []},
        "two-key response item": {"responses": [{"a": resp, "b": resp}]},
        "bad name": {"responses": [{"1st": resp}]},
        "bad duration": {"loadgen": {**lg, "run_time": "ten minutes"}},
        "compound duration": {"loadgen": {**lg, "run_time": "1h30m"}},
        "integer duration": {"loadgen": {**lg, "run_time": 600}},
        "negative duration": {"loadgen": {**lg, "run_time": -1}},
        "missing base_url": {"loadgen": {k: v for k, v in lg.items() if k != "base_url"}},
        "ftp base_url": {"loadgen": {**lg, "base_url": "ftp://frontend"}},
        "empty stages": {"loadgen": {**lg, "stages": []}},
        "negative users": {"loadgen": {**lg, "stages": [{"duration": 600, "users": -1, "spawn_rate": 1}]}},
        "zero spawn rate": {"loadgen": {**lg, "stages": [{"duration": 600, "users": 1, "spawn_rate": 0}]}},
        "upper-case verb": {"loadgen": {**lg, "tasks": [{"endpoint": "/", "verb": "GET"}]}},
        "bad verb": {"loadgen": {**lg, "tasks": [{"endpoint": "/", "verb": "patch"}]}},
        "relative endpoint": {"loadgen": {**lg, "tasks": [{"endpoint": "cart", "verb": "get"}]}},
        "zero weight": {"loadgen": {**lg, "tasks": [{"endpoint": "/", "verb": "get", "weight": 0}]}},
        "unknown action": {"treatments": [treatment("x", "explode", service_name="a")]},
        "loss over 100": {"treatments": [{"x": {"action": "loss", "params": {**loss, "loss_percentage": 150}}}]},
        "loss missing interface": {"treatments": [{"x": {"action": "loss", "params": {
            k: v for k, v in loss.items() if k != "interface"}}}]},
        "unknown param": {"treatments": [{"x": {"action": "loss", "params": {**loss, "jitter": 3}}}]},
        "stress defaults": {"treatments": [treatment("s", "stress", service_name="a", duration="10s")]},
        "stress bad stressor": {"treatments": [treatment("s", "stress", service_name="a", duration="10s",
                                                         stressor="gpu")]},
        "probabilistic without rate": {"treatments": [treatment(
            "s", "otel_tracing_sampling_strategy", service_name="a", strategy="probabilistic")]},
        "always with rate": {"treatments": [treatment(
            "s", "otel_tracing_sampling_strategy", service_name="a", strategy="always", sampling_rate=0.5)]},
        "probabilistic with rate": {"treatments": [treatment(
            "s", "otel_tracing_sampling_strategy", service_name="a", strategy="probabilistic", sampling_rate=0.5)]},
        "rate above one": {"treatments": [treatment("s", "otel_tracing_sampling_rate", service_name="a",
                                                    sampling_rate=1.5)]},
        "no treatments": {"treatments": []},
        "baseline without treatments": {"treatments": [], "baseline": True},
        "missing sue": {"sue": None},
        "sue unknown key": {"sue": {**base["sue"], "network": "host"}},
        "detection z zero": {"detection": {"z": 0}},
        "detection k": {"detection": {"k": 2}},
    }


@pytest.mark.parametrize("name,change", list(_mutations().items()))
def test_schema_agrees_with_parser(name, change):
    doc = copy.deepcopy(variant())
    for key, value in change.items():
        if value is None:
            del doc["experiment"][key]
        else:
            doc["experiment"][key] = value
    assert _schema_ok(doc) == _parser_ok(doc)
