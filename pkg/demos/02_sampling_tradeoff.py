"""
Trace sampling against detection
================================

Lower trace sampling keeps fewer spans. This script sweeps the sampling
rate of the frontend and watches two things: how many spans survive, and
whether a 200 ms delay on the recommendation service is still detected
from the per-second p95 span duration.

    python demos/02_sampling_tradeoff.py
"""

import copy
import shutil
import tempfile
from pathlib import Path

import yaml

from oxn.report import run_experiment

root = Path(__file__).resolve().parents[1]
base = yaml.safe_load((root / "experiments" / "recommendation-loss.yml").read_text())

work = Path(tempfile.mkdtemp(prefix="oxn-sampling-"))
shutil.copy(root / "experiments" / "docker-compose.yml", work)


def experiment(rate):
    doc = copy.deepcopy(base)
    exp = doc["experiment"]
    exp["responses"] = [{"frontend": {"type": "trace", "service_name": "frontend",
                                      "left_window": "120s", "right_window": "60s"}}]
    exp["treatments"] = [
        {"sampling": {"action": "otel_tracing_sampling_rate",
                      "params": {"service_name": "frontend", "sampling_rate": rate}}},
        {"delay": {"action": "delay",
                   "params": {"service_name": "recommendation-service", "duration": "60s",
                              "delay_ms": 200, "interface": "eth0"}}},
    ]
    exp["loadgen"]["run_time"] = "5m"
    exp["loadgen"]["stages"] = [{"duration": 300, "users": 20, "spawn_rate": 20}]
    path = work / f"rate-{rate}.yml"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


###############################################################################
# Sweep
# -----

print(f"{'rate':>6} {'spans':>8} {'p95 detected':>13} {'latency':>8}")
for rate in (1.0, 0.5, 0.1, 0.01, 0.0):
    report = run_experiment(experiment(rate), out=work / "runs", run_id=f"r{rate}").report
    spans = next(f["rows"] for f in report["frames"] if f["response"] == "frontend")
    result = next((r for r in report["detection"]["results"]
                   if r["response"] == "frontend.p95_duration_ms"), None)
    if result is None:
        print(f"{rate:>6} {spans:>8} {'skipped':>13}")
        continue
    lat = "-" if result["detection_latency"] is None else f"{result['detection_latency']:g}s"
    print(f"{rate:>6} {spans:>8} {str(result['detected']):>13} {lat:>8}")

###############################################################################
# At rate 0 there are no spans at all; the frame is stored but flagged as
# an empty result and detection is skipped rather than failing the run.

shutil.rmtree(work)
