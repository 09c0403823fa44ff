"""On-disk result store: one CSV per frame plus a JSON manifest.

Layout under a run directory::

    frames/<response>.csv
    manifest.json

Floats are written with 17 significant digits so read-back is exact.
Every file is written to a temporary name and renamed into place.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from oxn.observation import LabeledFrame, TimeSeriesFrame, TraceFrame
from oxn.treatments.base import TreatmentRecord

MANIFEST = "manifest.json"
FRAMES_DIR = "frames"
_SAFE = re.compile(r"[^A-Za-z0-9._-]+")


class StoreError(OSError):
    pass


class CorruptFrame(StoreError):
    pass


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | Path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def atomic_write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def frame_filename(response: str) -> str:
    return _SAFE.sub("_", response) + ".csv"


def frame_csv(frame: LabeledFrame | TimeSeriesFrame | TraceFrame) -> str:
    labeled = frame if isinstance(frame, LabeledFrame) else None
    inner = labeled.frame if labeled is not None else frame
    cols = inner.columns()
    header = list(cols)
    if labeled is not None:
        header.append("label")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    arrays = [cols[c] for c in cols]
    if labeled is not None:
        arrays.append(labeled.labels)
    for i in range(len(inner)):
        w.writerow([_fmt(a[i]) for a in arrays])
    return buf.getvalue()


@dataclass
class FrameEntry:
    response: str
    kind: str
    path: str
    rows: int
    columns: list[str]
    time_range: list[float] | None
    sha256: str
    query: str
    step: float | None = None
    empty_result: bool = False
    extra: dict = field(default_factory=dict)


@dataclass
class StoreManifest:
    run_id: str
    experiment_sha256: str
    engine_version: str
    frames: list[FrameEntry]
    records: list[dict]

    def to_dict(self) -> dict:
        return {
            "run_id": self.run_id,
            "experiment_sha256": self.experiment_sha256,
            "engine_version": self.engine_version,
            "records": self.records,
            "frames": [vars(f) for f in self.frames],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StoreManifest":
        return cls(data["run_id"], data["experiment_sha256"], data["engine_version"],
                   [FrameEntry(**f) for f in data["frames"]], data["records"])


def _time_range(frame) -> list[float] | None:
    inner = frame.frame if isinstance(frame, LabeledFrame) else frame
    if not len(inner):
        return None
    a = inner.anchors
    return [float(a.min()), float(a.max())]


def write_store(frames: Iterable[LabeledFrame], run_dir: str | Path, *, run_id: str,
                experiment_sha256: str = "", engine_version: str = "", records: Iterable = ()) -> StoreManifest:
    """Write each frame as CSV and the manifest describing them."""
    from oxn import __version__

    run_dir = Path(run_dir)
    entries = []
    seen = set()
    for lf in sorted(frames, key=lambda f: f.response):
        name = frame_filename(lf.response)
        if name in seen:
            raise StoreError(f"two frames map to {name}")
        seen.add(name)
        rel = f"{FRAMES_DIR}/{name}"
        text = frame_csv(lf).encode()
        try:
            atomic_write(run_dir / rel, text)
        except OSError as exc:
            raise StoreError(f"cannot write {run_dir / rel}: {exc}") from exc
        inner = lf.frame if isinstance(lf, LabeledFrame) else lf
        header = list(inner.columns()) + (["label"] if isinstance(lf, LabeledFrame) else [])
        entries.append(FrameEntry(
            response=lf.response, kind=inner.kind, path=rel, rows=len(inner), columns=header,
            time_range=_time_range(lf), sha256=sha256_bytes(text), query=inner.query,
            step=getattr(inner, "step", None), empty_result=bool(inner.empty_result),
        ))
    recs = [r.to_dict() if isinstance(r, TreatmentRecord) else dict(r) for r in records]
    manifest = StoreManifest(run_id, experiment_sha256, engine_version or __version__, entries, recs)
    atomic_write(run_dir / MANIFEST, json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(run_dir: str | Path) -> StoreManifest:
    return StoreManifest.from_dict(json.loads((Path(run_dir) / MANIFEST).read_text()))


def read_frame(run_dir: str | Path, entry: FrameEntry) -> LabeledFrame | TimeSeriesFrame | TraceFrame:
    path = Path(run_dir) / entry.path
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = {h: [r[i] for r in body] for i, h in enumerate(header)}
    if entry.kind == "metric":
        frame = TimeSeriesFrame(entry.response, entry.query, entry.step,
                                [float(x) for x in cols["timestamp"]], [float(x) for x in cols["value"]],
                                empty_result=entry.empty_result)
    else:
        frame = TraceFrame(entry.response, entry.query, cols["trace_id"], cols["span_id"], cols["service"],
                           cols["operation"], [int(x) for x in cols["start"]], [int(x) for x in cols["duration"]],
                           cols["status"], empty_result=entry.empty_result)
    if "label" in cols:
        return LabeledFrame(frame, np.asarray(cols["label"], dtype=object))
    return frame


def read_store(run_dir: str | Path) -> dict[str, LabeledFrame]:
    manifest = read_manifest(run_dir)
    records = [TreatmentRecord.from_dict(r) for r in manifest.records]
    out = {}
    for entry in manifest.frames:
        lf = read_frame(run_dir, entry)
        if isinstance(lf, LabeledFrame):
            lf.records = records
        out[entry.response] = lf
    return out


def verify_store(run_dir: str | Path) -> list[str]:
    """Names of frames whose file is missing or does not match its hash."""
    run_dir = Path(run_dir)
    bad = []
    for entry in read_manifest(run_dir).frames:
        path = run_dir / entry.path
        if not path.is_file() or sha256_file(path) != entry.sha256:
            bad.append(entry.response)
    return bad
