"""
Threshold detector sensitivity
==============================

The built-in detector flags rows more than ``z`` baseline standard
deviations from the baseline mean and reports a detection after ``k``
consecutive flags. Here we measure, on synthetic frames, how the hit rate
and false alarms move with ``z`` and the size of the shift.

    python demos/03_detector_sensitivity.py
"""

import numpy as np

from oxn.config import DetectionConfig
from oxn.detection import detect
from oxn.observation import TimeSeriesFrame, label_frame
from oxn.treatments import TreatmentRecord

T0 = 1_700_000_000.0
rng = np.random.default_rng(42)


def trial(shift, z, k=3):
    # 60 baseline rows, 30 fault rows, 10 after; unit noise
    v = rng.normal(0, 1, 100)
    v[60:90] += shift
    ts = T0 + np.arange(100.0)
    rec = TreatmentRecord("f", "delay", "svc", {}, "fault", start=T0 + 60, end=T0 + 89, status="reverted")
    return detect(label_frame(TimeSeriesFrame("r", "q", 1.0, ts, v), [rec]), rec, DetectionConfig(z=z, k=k))


###############################################################################
# Hit rate over 200 trials per cell

shifts = [0.0, 1.0, 2.0, 3.0, 5.0]
zs = [2.0, 2.5, 3.0, 4.0]
print("shift " + "".join(f"  z={z:<4}" for z in zs))
for s in shifts:
    row = [np.mean([trial(s, z).detected for _ in range(200)]) for z in zs]
    print(f"{s:5.1f} " + "".join(f"  {r:6.2f}" for r in row))

###############################################################################
# Baseline false-alarm rate depends on z only (about 2 * (1 - Phi(z)))

for z in zs:
    far = np.mean([trial(0.0, z).false_alarm_rate for _ in range(200)])
    print(f"z={z}: mean false-alarm rate {far:.4f}")
