"""Static SVG plots of labeled metric frames."""

from __future__ import annotations

import logging
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from oxn.detection import ThresholdDetector  # noqa: E402
from oxn.observation import NO_TREATMENT, LabeledFrame, TimeSeriesFrame  # noqa: E402
from oxn.store import FrameEntry, read_frame, read_manifest  # noqa: E402

log = logging.getLogger(__name__)

PLOTS_DIR = "plots"


def _flags(frame: TimeSeriesFrame, labels: np.ndarray, windows, z: float) -> np.ndarray:
    if not windows:
        return np.zeros(len(frame), dtype=bool)
    first = min(s for s, _ in windows)
    base = (labels == NO_TREATMENT) & (frame.timestamp < first)
    if base.sum() < 2:
        return np.zeros(len(frame), dtype=bool)
    return ThresholdDetector(z=z).fit(frame.value[base]).score(frame.value)


def plot_frame(lf: LabeledFrame, windows: list[tuple[float, float]], path: str | Path, z: float = 3.0) -> Path:
    """Value over time with each fault window shaded and flagged rows marked."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(8, 3))
    try:
        frame = lf.frame
        ax.set_title(lf.response, fontsize=10)
        if not isinstance(frame, TimeSeriesFrame) or len(frame) == 0:
            ax.text(0.5, 0.5, "no data", ha="center", va="center", transform=ax.transAxes, fontsize=14)
            ax.set_xticks([])
            ax.set_yticks([])
        else:
            t0 = frame.timestamp[0]
            x = frame.timestamp - t0
            ax.plot(x, frame.value, lw=0.8, color="tab:blue")
            for s, e in windows:
                ax.axvspan(s - t0, e - t0, color="tab:red", alpha=0.15, gid="fault-window")
            flags = _flags(frame, lf.labels, windows, z)
            if flags.any():
                ax.plot(x[flags], frame.value[flags], "x", ms=3, color="tab:red", label="flagged")
                ax.legend(loc="upper right", fontsize=8)
            ax.set_xlabel("seconds since window start")
            ax.set_ylabel(frame.query, fontsize=8)
        fig.tight_layout()
        path.parent.mkdir(parents=True, exist_ok=True)
        fig.savefig(path, format="svg")
    finally:
        plt.close(fig)
    return path


def render_plots(run_dir: str | Path, z: float = 3.0) -> list[Path]:
    """One SVG per metric frame of a stored run; unreadable frames are skipped."""
    run_dir = Path(run_dir)
    manifest = read_manifest(run_dir)
    windows = sorted((r["start"], r["end"]) for r in manifest.records
                     if r["phase"] == "fault" and r["start"] is not None and r["end"] is not None)
    out = []
    for entry in manifest.frames:
        if entry.kind != "metric":
            continue
        try:
            lf = read_frame(run_dir, entry)
        except (OSError, ValueError, KeyError, IndexError) as exc:
            log.warning("skipping %s: %s", entry.path, exc)
            continue
        name = Path(entry.path).with_suffix(".svg").name
        out.append(plot_frame(lf, windows, run_dir / PLOTS_DIR / name, z=z))
    return out


__all__ = ["FrameEntry", "plot_frame", "render_plots"]
