from __future__ import annotations

import math
import random
from types import SimpleNamespace

import numpy as np
import pytest

from conftest import sim_runtime
from oxn.sim.engine import UnsupportedExpr, handle_request, parse_expr, query_range
from oxn.sim.topology import SimService, SimTopology, TopologyError

TASK = SimpleNamespace(endpoint="/", verb="get")


NAMES = ["frontend", "recommendation-service", "product-catalog-service"]


def chain(n=2, latency=10.0, jitter=0.0, **kw):
    """Linear call chain over the first ``n`` compose services, without latency noise."""
    names = NAMES[:n]
    services = [SimService(name, base_latency_ms=latency, calls=names[i + 1:i + 2], **kw)
                for i, name in enumerate(names)]
    return SimTopology(services, entry=names[0], latency_jitter=jitter)


def test_neutral_chain_latency_is_sum_of_hops():
    rt, _ = sim_runtime(topology=chain(2, 10.0))
    resp = handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0))
    assert (resp.status, resp.latency_ms) == (200, pytest.approx(20.0))


def test_added_delay_is_per_hop():
    rt, _ = sim_runtime(topology=chain(3, 5.0))
    rt.sim.modifiers["recommendation-service"].added_delay_ms = 100
    resp = handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0))
    assert resp.latency_ms == pytest.approx(115.0)


def test_paused_hop_times_out_without_its_span():
    rt, _ = sim_runtime(topology=chain(2))
    rt.pause("recommendation-service")
    resp = handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0), timeout_ms=1000)
    assert (resp.status, resp.latency_ms) == (504, 1000)
    cols = rt.sim.spans.columns()
    assert cols["service"].tolist() == [0]


def test_loss_failures_are_binomial():
    rt, _ = sim_runtime(topology=chain(2))
    rt.sim.modifiers["recommendation-service"].loss_p = 0.5
    rng = random.Random(11)
    n = 1000
    failures = sum(not handle_request(rt.sim.topology, rt.sim, TASK, rng).ok for _ in range(n))
    assert abs(failures - n * 0.5) <= 3 * math.sqrt(n * 0.25)


def test_error_rate_gives_500():
    topo = SimTopology([SimService("frontend", error_rate=1.0)], entry="frontend")
    rt, _ = sim_runtime(topology=topo)
    assert handle_request(topo, rt.sim, TASK, random.Random(0)).status == 500


def test_topology_validation():
    with pytest.raises(TopologyError, match="cycle"):
        SimTopology([SimService("a", calls=["b"]), SimService("b", calls=["a"])], entry="a")
    with pytest.raises(TopologyError):
        SimTopology([SimService("a", error_rate=1.5)], entry="a")
    with pytest.raises(TopologyError):
        SimTopology([SimService("a"), SimService("a")], entry="a")


def test_topology_json_roundtrip(tmp_path):
    topo = SimTopology.default(seed=3)
    assert [s.name for s in topo.services] == ["gateway", "recommender", "datastore"]
    topo.save(tmp_path / "t.json")
    assert SimTopology.load(tmp_path / "t.json") == topo


def _drive(rt, seconds, users=5, seed=0):
    from oxn.loadgen import SimTransport, compile_load_profile, run_load

    stages = SimpleNamespace(stages=[SimpleNamespace(duration=seconds, users=users, spawn_rate=users)],
                             run_time=seconds)
    return run_load(compile_load_profile(stages), [SimpleNamespace(endpoint="/", verb="get", params={}, weight=1)],
                    "http://frontend", rt.clock, transport=SimTransport(rt), seed=seed)


def test_parse_expr():
    assert parse_expr("app_x_total") == ("raw", "app_x_total", 0.0)
    assert parse_expr("increase(app_x_total[1m])") == ("increase", "app_x_total", 60.0)
    assert parse_expr("rate( app_x_total[30s] )") == ("rate", "app_x_total", 30.0)
    for bad in ("sum(app_x_total)", "increase(app_x_total)", "app_x_total{job='a'}", "increase(a[1h30m])"):
        with pytest.raises(UnsupportedExpr):
            parse_expr(bad)


def test_increase_matches_request_rate_oracle():
    rt, _ = sim_runtime(env={("recommendation-service", "OTEL_METRIC_EXPORT_INTERVAL"): "1000"})
    stats = _drive(rt, 180)
    t0 = rt.sim.started_at
    out = query_range(rt.sim, "increase(app_recommendations_counter_total[1m])", t0 + 120, t0 + 179, 1)
    values = np.array([float(v) for _, v in out["data"]["result"][0]["values"]])
    # every successful request passes the recommendation service exactly once
    per_second = stats.requests_sent[60:].mean()
    assert values.mean() == pytest.approx(60 * per_second, rel=0.02)


def test_raw_counter_monotone_and_empty_window():
    rt, _ = sim_runtime(env={("frontend", "OTEL_METRIC_EXPORT_INTERVAL"): "2000"})
    _drive(rt, 60)
    t0 = rt.sim.started_at
    out = query_range(rt.sim, "app_frontend_requests_total", t0, t0 + 60, 1)
    values = [float(v) for _, v in out["data"]["result"][0]["values"]]
    assert len(values) == 30 and values == sorted(values)
    empty = query_range(rt.sim, "app_frontend_requests_total", t0 - 100, t0 - 50, 1)
    assert empty == {"status": "success", "data": {"resultType": "matrix", "result": []}}


def test_export_interval_controls_row_count():
    counts = {}
    for ms in (1000, 5000):
        rt, _ = sim_runtime(env={("frontend", "OTEL_METRIC_EXPORT_INTERVAL"): str(ms)})
        _drive(rt, 100)
        t0 = rt.sim.started_at
        out = query_range(rt.sim, "app_frontend_requests_total", t0, t0 + 100, 1)
        counts[ms] = len(out["data"]["result"][0]["values"])
    assert counts == {1000: 100, 5000: 20}


def test_paused_service_stops_exporting():
    rt, _ = sim_runtime(env={("frontend", "OTEL_METRIC_EXPORT_INTERVAL"): "1000"})
    rt.clock.call_at(rt.clock.now() + 10, lambda: rt.pause("frontend"))
    rt.clock.call_at(rt.clock.now() + 18, lambda: rt.unpause("frontend"))  # under the 10s unreachable limit
    _drive(rt, 30)
    ticks, _ = rt.sim.export_samples("frontend")
    offsets = (ticks - rt.sim.started_at).round().astype(int).tolist()
    assert 15 not in offsets and 5 in offsets and 25 in offsets


def test_determinism():
    digests = []
    for _ in range(2):
        rt, _ = sim_runtime(seed=9)
        rt.clock.call_at(rt.clock.now() + 5, lambda rt=rt: rt.exec(
            "recommendation-service", ["tc", "qdisc", "add", "dev", "eth0", "root", "netem", "loss", "30%"]))
        _drive(rt, 20, seed=9)
        inc = b"".join(np.frombuffer(rt.sim.increments[s], dtype="d").tobytes() for s in rt.sim.services)
        digests.append((rt.sim.spans.digest(), inc))
    assert digests[0] == digests[1]


def test_span_count_le_requests_and_sampling_binomial():
    rt, _ = sim_runtime(env={("frontend", "OTEL_TRACES_SAMPLER"): "traceidratio",
                             ("frontend", "OTEL_TRACES_SAMPLER_ARG"): "0.3"})
    stats = _drive(rt, 60)
    n = int(stats.requests_sent.sum())
    frontend = int((rt.sim.spans.columns()["service"] == rt.sim.index["frontend"]).sum())
    assert frontend <= n
    assert abs(frontend - 0.3 * n) <= 3 * math.sqrt(n * 0.3 * 0.7)


def test_stress_slows_service_until_killed():
    rt, _ = sim_runtime(topology=chain(1, 10.0))
    rt.exec("frontend", ["sh", "-c", "nohup stress-ng --cpu 2 --timeout 60s >/dev/null 2>&1 &"])
    slow = handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0)).latency_ms
    rt.exec("frontend", ["sh", "-c", "pkill stress-ng || true"])
    fast = handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0)).latency_ms
    assert slow == pytest.approx(10 * (1 + 0.5 * 2)) and fast == pytest.approx(10)


def test_corruption_adds_retransmit():
    rt, _ = sim_runtime(topology=chain(1, 10.0))
    rt.sim.modifiers["frontend"].corrupt_p = 1.0
    assert handle_request(rt.sim.topology, rt.sim, TASK, random.Random(0)).latency_ms == pytest.approx(210)
