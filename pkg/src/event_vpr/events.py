"""Event data model, frame-to-event simulation, text I/O and stream splitting."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .errors import (
    DomainError,
    EventFormatError,
    EventValidationError,
    ParameterError,
    ShapeError,
)

HEADER_TAG = "# events"


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _as_int_array(values) -> np.ndarray:
    arr = np.asarray(values)
    if arr.size == 0:
        return np.zeros(0, dtype=np.int64)
    if not np.issubdtype(arr.dtype, np.integer):
        raise EventValidationError(f"event fields must be integers, got dtype {arr.dtype}")
    return arr.astype(np.int64, copy=False).reshape(-1)


@dataclass(frozen=True, eq=False)
class EventBin:
    """A time-ordered slice of an event stream.

    Events are stored column-wise as int64 arrays. Timestamps are integer
    microseconds, polarity is -1 or +1. The bin may be empty.
    """

    x: np.ndarray
    y: np.ndarray
    t: np.ndarray
    p: np.ndarray
    width: int
    height: int
    id: str = "bin"

    def __post_init__(self):
        cols = {name: _as_int_array(getattr(self, name)) for name in ("x", "y", "t", "p")}
        n = len(cols["t"])
        if any(len(c) != n for c in cols.values()):
            raise ShapeError("x, y, t, p must have equal length")
        if self.width <= 0 or self.height <= 0:
            raise ShapeError(f"invalid geometry {self.width}x{self.height}")
        for name, arr in cols.items():
            arr = arr.copy()
            arr.flags.writeable = False
            object.__setattr__(self, name, arr)
        if n:
            if not np.all(np.isin(self.p, (-1, 1))):
                raise EventValidationError("polarity must be -1 or +1")
            if self.x.min() < 0 or self.x.max() >= self.width:
                raise EventValidationError(f"x outside [0, {self.width})")
            if self.y.min() < 0 or self.y.max() >= self.height:
                raise EventValidationError(f"y outside [0, {self.height})")
            if self.t.min() < 0:
                raise EventValidationError("timestamps must be non-negative")
            bad = np.flatnonzero(np.diff(self.t) < 0)
            if bad.size:
                raise EventValidationError(
                    f"timestamps decrease at event {int(bad[0]) + 1}"
                )

    @classmethod
    def from_events(cls, events: Sequence[Event], width: int, height: int, id: str = "bin"):
        if len(events) == 0:
            return cls.empty(width, height, id)
        arr = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=np.int64)
        return cls(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height, id)

    @classmethod
    def empty(cls, width: int, height: int, id: str = "bin"):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, width, height, id)

    @property
    def geometry(self) -> tuple[int, int]:
        return (self.width, self.height)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in zip(self.x.tolist(), self.y.tolist(), self.t.tolist(), self.p.tolist()):
            yield Event(x, y, t, p)

    def __getitem__(self, i: int) -> Event:
        return Event(int(self.x[i]), int(self.y[i]), int(self.t[i]), int(self.p[i]))

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventBin):
            return NotImplemented
        return (
            self.id == other.id
            and self.geometry == other.geometry
            and all(np.array_equal(getattr(self, f), getattr(other, f)) for f in "xytp")
        )

    def __repr__(self) -> str:
        return f"EventBin(id={self.id!r}, n={len(self)}, geometry={self.width}x{self.height})"

    def slice(self, start: int, stop: int, id: str | None = None) -> EventBin:
        s = np.s_[start:stop]
        return EventBin(self.x[s], self.y[s], self.t[s], self.p[s],
                        self.width, self.height, self.id if id is None else id)

    def as_array(self) -> np.ndarray:
        """(N, 4) int64 array with columns x, y, t, p."""
        return np.stack([self.x, self.y, self.t, self.p], axis=1) if len(self) else np.zeros((0, 4), np.int64)


def concatenate(bins: Sequence[EventBin], id: str = "bin") -> EventBin:
    if not bins:
        raise ParameterError("nothing to concatenate")
    w, h = bins[0].geometry
    if any(b.geometry != (w, h) for b in bins):
        raise ShapeError("bins have different geometry")
    cols = [np.concatenate([getattr(b, f) for b in bins]) for f in "xytp"]
    return EventBin(*cols, w, h, id)


# ---------------------------------------------------------------------------
# simulator


@dataclass(frozen=True)
class CameraModel:
    """Idealised DVS pixel: fires whenever log intensity moves by ``contrast_threshold``.

    ``threshold_jitter`` is the relative standard deviation of a per-pixel
    threshold mismatch (fixed pattern noise); zero gives a noise-free sensor.
    """

    contrast_threshold: float = 0.2
    threshold_jitter: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not self.contrast_threshold > 0:
            raise ParameterError("contrast_threshold must be > 0")
        if self.threshold_jitter < 0:
            raise ParameterError("threshold_jitter must be >= 0")

    def pixel_thresholds(self, height: int, width: int) -> np.ndarray:
        theta = np.full((height, width), float(self.contrast_threshold))
        if self.threshold_jitter > 0:
            rng = np.random.default_rng(self.seed)
            theta = theta * (1.0 + self.threshold_jitter * rng.standard_normal((height, width)))
            # keep every pixel responsive
            theta = np.maximum(theta, 0.05 * self.contrast_threshold)
        return theta


def _interval_timestamps(t_a: int, t_b: int, n: np.ndarray, j: np.ndarray) -> np.ndarray:
    # t_a + round_half_up(j * (t_b - t_a) / n), exact in integers
    span = t_b - t_a
    return t_a + (2 * j * span + n) // (2 * n)


def simulate_events(frames, timestamps, model: CameraModel | None = None, id: str = "sim") -> EventBin:
    """Convert an intensity frame sequence into events.

    Each pixel keeps a reference log intensity, initialised from frame 0.
    At every later frame the change relative to the reference emits
    ``floor(|dL| / threshold)`` events of polarity ``sign(dL)``; the reference
    advances by the emitted amount so the remainder carries over. Events of
    one interval are spread uniformly over ``(t_prev, t_next]``.
    """
    model = model or CameraModel()
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    timestamps = [int(t) for t in timestamps]
    if len(frames) < 2:
        raise ParameterError("need at least two frames")
    if len(frames) != len(timestamps):
        raise ShapeError("one timestamp per frame required")
    shape = frames[0].shape
    if len(shape) != 2:
        raise ShapeError(f"frames must be 2-D, got shape {shape}")
    for f in frames:
        if f.shape != shape:
            raise ShapeError(f"frame shape {f.shape} differs from {shape}")
        if not np.all(f > 0):
            raise DomainError("intensities must be strictly positive")
    if np.any(np.diff(timestamps) <= 0):
        raise ParameterError("frame timestamps must be strictly increasing")
    if timestamps[0] < 0:
        raise ParameterError("frame timestamps must be non-negative")

    height, width = shape
    theta = model.pixel_thresholds(height, width).ravel()
    ref = np.log(frames[0]).ravel()
    xs, ys, ts, ps = [], [], [], []
    for k in range(1, len(frames)):
        dl = np.log(frames[k]).ravel() - ref
        n = np.floor(np.abs(dl) / theta).astype(np.int64)
        sign = np.sign(dl).astype(np.int64)
        ref = ref + sign * n * theta
        fired = np.flatnonzero(n)
        if fired.size == 0:
            continue
        counts = n[fired]
        pix = np.repeat(fired, counts)
        starts = np.cumsum(counts) - counts
        j = np.arange(counts.sum()) - np.repeat(starts, counts) + 1
        ts.append(_interval_timestamps(timestamps[k - 1], timestamps[k], np.repeat(counts, counts), j))
        xs.append(pix % width)
        ys.append(pix // width)
        ps.append(sign[pix])
    if not ts:
        return EventBin.empty(width, height, id)
    x, y, t, p = (np.concatenate(c) for c in (xs, ys, ts, ps))
    order = np.lexsort((x, y, t))
    return EventBin(x[order], y[order], t[order], p[order], width, height, id)


# ---------------------------------------------------------------------------
# text format: "# events W H" header, then "t x y p" lines


def write_events(bin: EventBin, path) -> None:
    path = Path(path)
    lines = [f"{HEADER_TAG} {bin.width} {bin.height}\n"]
    lines.extend(
        f"{t} {x} {y} {p}\n"
        for t, x, y, p in zip(bin.t.tolist(), bin.x.tolist(), bin.y.tolist(), bin.p.tolist())
    )
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.writelines(lines)
    os.replace(tmp, path)


def read_events(path, id: str | None = None) -> EventBin:
    """Parse an event file. The bin id defaults to the file stem."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline()
        parts = header.split()
        if len(parts) != 4 or " ".join(parts[:2]) != HEADER_TAG:
            raise EventFormatError(f"expected header '{HEADER_TAG} W H', got {header.strip()!r}", path, 1)
        try:
            width, height = int(parts[2]), int(parts[3])
        except ValueError:
            raise EventFormatError("non-integer geometry in header", path, 1) from None
        rows = []
        for lineno, line in enumerate(fh, start=2):
            fields = line.split(" ")
            if len(fields) != 4:
                raise EventFormatError(f"expected 4 fields 't x y p', got {line.rstrip()!r}", path, lineno)
            try:
                t, x, y, p = (int(v) for v in fields)
            except ValueError:
                raise EventFormatError(f"non-integer field in {line.rstrip()!r}", path, lineno) from None
            if p not in (-1, 1):
                raise EventFormatError(f"polarity must be -1 or 1, got {p}", path, lineno)
            if rows and t < rows[-1][2]:
                raise EventValidationError(f"{path}:{lineno}: timestamp {t} precedes {rows[-1][2]}")
            rows.append((x, y, t, p))
    if not rows:
        return EventBin.empty(width, height, path.stem if id is None else id)
    arr = np.array(rows, dtype=np.int64)
    return EventBin(arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], width, height,
                    path.stem if id is None else id)


# ---------------------------------------------------------------------------
# stream splitting


@dataclass(frozen=True)
class FixedCount:
    n: int


@dataclass(frozen=True)
class FixedDuration:
    duration_us: int


def split_stream(stream: EventBin, policy: FixedCount | FixedDuration) -> list[EventBin]:
    """Partition a stream into consecutive bins.

    Fixed-count bins hold ``n`` events each, the last one possibly fewer.
    Fixed-duration bins cover contiguous windows ``[t0 + kT, t0 + (k+1)T)``
    starting at the first timestamp; windows without events yield empty bins.
    """
    n_ev = len(stream)
    if isinstance(policy, FixedCount):
        if policy.n <= 0:
            raise ParameterError("event count per bin must be positive")
        bounds = list(range(0, n_ev, policy.n)) + [n_ev]
    elif isinstance(policy, FixedDuration):
        if policy.duration_us <= 0:
            raise ParameterError("bin duration must be positive")
        if n_ev == 0:
            return []
        t0 = int(stream.t[0])
        n_windows = (int(stream.t[-1]) - t0) // policy.duration_us + 1
        edges = t0 + policy.duration_us * np.arange(n_windows + 1)
        bounds = np.searchsorted(stream.t, edges, side="left").tolist()
        bounds[-1] = n_ev
    else:
        raise ParameterError(f"unknown split policy {policy!r}")
    return [
        stream.slice(a, b, id=f"{stream.id}_{k:05d}")
        for k, (a, b) in enumerate(zip(bounds[:-1], bounds[1:]))
    ]


# ---------------------------------------------------------------------------
# database manifest: CSV with columns path, place_id, x_m, y_m


MANIFEST_FIELDS = ("path", "place_id", "x_m", "y_m")


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    place_id: str
    x_m: float
    y_m: float

    @property
    def coords(self) -> tuple[float, float]:
        return (self.x_m, self.y_m)


def write_manifest(records: Sequence[ManifestRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS)
        for r in records:
            w.writerow([r.path, r.place_id, repr(float(r.x_m)), repr(float(r.y_m))])


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != MANIFEST_FIELDS:
            raise EventFormatError(f"manifest header must be {','.join(MANIFEST_FIELDS)}", path, 1)
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise EventFormatError(f"expected 4 columns, got {len(row)}", path, lineno)
            try:
                x_m, y_m = float(row[2]), float(row[3])
            except ValueError:
                raise EventFormatError("coordinates must be floats", path, lineno) from None
            if not (np.isfinite(x_m) and np.isfinite(y_m)):
                raise EventFormatError("coordinates must be finite", path, lineno)
            records.append(ManifestRecord(row[0], row[1], x_m, y_m))
    return records


def resolve_record_path(record: ManifestRecord, manifest_path) -> Path:
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p
