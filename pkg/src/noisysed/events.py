"""Event vocabulary, annotations and DESED-style metadata I/O."""

from __future__ import annotations

import io
import logging
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .errors import BadParameter, FormatError, RowError, UnknownClass

log = logging.getLogger(__name__)

STRONG_HEADER = ("filename", "onset", "offset", "event_label")
WEAK_HEADER = ("filename", "event_labels")


@dataclass(frozen=True)
class ClassOntology:
    target_classes: tuple[str, ...]
    noise_classes: tuple[str, ...]
    tags: dict[str, frozenset[str]]
    similarity_group: dict[str, str]

    def __post_init__(self):
        object.__setattr__(self, "target_classes", tuple(self.target_classes))
        object.__setattr__(self, "noise_classes", tuple(self.noise_classes))
        object.__setattr__(self, "tags", {k: frozenset(v) for k, v in self.tags.items()})
        names = self.target_classes + self.noise_classes
        if len(set(names)) != len(names):
            raise ValueError("class names must be unique across targets and noise")
        if not self.target_classes or not self.noise_classes:
            raise ValueError("need at least one target class and one noise class")
        for name in names:
            if not self.tags.get(name):
                raise ValueError(f"class {name!r} has no environment tag")
            if name not in self.similarity_group:
                raise ValueError(f"class {name!r} has no similarity group")

    @property
    def n_targets(self) -> int:
        return len(self.target_classes)

    @property
    def all_tags(self) -> frozenset[str]:
        return frozenset().union(*self.tags.values())

    def index(self, name: str) -> int:
        try:
            return self.target_classes.index(name)
        except ValueError:
            raise UnknownClass(name) from None

    def to_dict(self) -> dict:
        return {
            "target_classes": list(self.target_classes),
            "noise_classes": list(self.noise_classes),
            "tags": {k: sorted(v) for k, v in self.tags.items()},
            "similarity_group": dict(self.similarity_group),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassOntology":
        return cls(d["target_classes"], d["noise_classes"], d["tags"], d["similarity_group"])


@dataclass(frozen=True)
class EventInstance:
    class_name: str
    onset: float
    offset: float

    def __post_init__(self):
        if not (0.0 <= self.onset < self.offset):
            raise ValueError(f"bad event bounds [{self.onset}, {self.offset}]")

    @property
    def duration(self) -> float:
        return self.offset - self.onset

    def sort_key(self):
        return (self.onset, self.offset, self.class_name)


@dataclass(frozen=True)
class Timeline:
    clip_id: str
    clip_duration: float
    events: tuple[EventInstance, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(sorted(self.events, key=EventInstance.sort_key)))
        for ev in self.events:
            if ev.offset > self.clip_duration + 1e-9:
                raise ValueError(f"{self.clip_id}: event {ev} exceeds clip duration")

    def by_class(self) -> dict[str, list[EventInstance]]:
        out: dict[str, list[EventInstance]] = {}
        for ev in self.events:
            out.setdefault(ev.class_name, []).append(ev)
        return out

    def merged(self) -> "Timeline":
        """Merge overlapping events of the same class."""
        merged: list[EventInstance] = []
        for name, evs in sorted(self.by_class().items()):
            cur = None
            for ev in sorted(evs, key=EventInstance.sort_key):
                if cur is not None and ev.onset <= cur.offset:
                    cur = EventInstance(name, cur.onset, max(cur.offset, ev.offset))
                else:
                    if cur is not None:
                        merged.append(cur)
                    cur = ev
            merged.append(cur)
        return Timeline(self.clip_id, self.clip_duration, tuple(merged))


@dataclass(frozen=True)
class WeakLabel:
    clip_id: str
    present: tuple[str, ...] = ()

    def __post_init__(self):
        # keep annotation order, drop duplicates
        object.__setattr__(self, "present", tuple(OrderedDict.fromkeys(self.present)))

    def as_set(self) -> frozenset[str]:
        return frozenset(self.present)


@dataclass(frozen=True, eq=False)
class ClipPrediction:
    clip_id: str
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or np.any(p < 0) or np.any(p > 1):
            raise ValueError("clip probabilities must be a vector in [0, 1]")
        object.__setattr__(self, "probs", p)


@dataclass(frozen=True, eq=False)
class FrameGrid:
    clip_id: str
    probs: np.ndarray  # (T, N)
    frame_hop_seconds: float

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2 or np.any(p < 0) or np.any(p > 1):
            raise ValueError("frame probabilities must be a (T, N) matrix in [0, 1]")
        object.__setattr__(self, "probs", p)


def weak_from_strong(t: Timeline) -> WeakLabel:
    return WeakLabel(t.clip_id, tuple(ev.class_name for ev in t.events))


def timeline_to_grid(
    t: Timeline, class_names, frame_hop_seconds: float, n_frames: int | None = None
) -> FrameGrid:
    """Render events as a {0, 1} frame grid; frame ``i`` covers ``[i*hop, (i+1)*hop)``."""
    if n_frames is None:
        n_frames = int(np.ceil(t.clip_duration / frame_hop_seconds - 1e-9))
    grid = np.zeros((n_frames, len(class_names)))
    col = {c: i for i, c in enumerate(class_names)}
    for ev in t.events:
        if ev.class_name not in col:
            raise UnknownClass(ev.class_name)
        a = int(np.floor(ev.onset / frame_hop_seconds + 1e-9))
        b = int(np.ceil(ev.offset / frame_hop_seconds - 1e-9))
        grid[max(a, 0) : min(b, n_frames), col[ev.class_name]] = 1.0
    return FrameGrid(t.clip_id, grid, frame_hop_seconds)


def binarize(probs: np.ndarray, threshold: float, median_frames: int) -> np.ndarray:
    if not 0.0 < threshold < 1.0:
        raise BadParameter(f"threshold must be in (0, 1), got {threshold}")
    if median_frames < 1 or median_frames % 2 == 0:
        raise BadParameter(f"median filter length must be odd and >= 1, got {median_frames}")
    active = (np.asarray(probs) >= threshold).astype(np.int8)
    if median_frames > 1 and active.size:
        active = median_filter(active, size=(median_frames, 1), mode="nearest")
    return active


def runs(column: np.ndarray) -> list[tuple[int, int]]:
    """Maximal runs of ones as inclusive ``(start, end)`` frame indices."""
    padded = np.concatenate(([0], column.astype(np.int8), [0]))
    diff = np.diff(padded)
    starts = np.flatnonzero(diff == 1)
    ends = np.flatnonzero(diff == -1) - 1
    return list(zip(starts.tolist(), ends.tolist()))


def frames_to_events(
    g: FrameGrid,
    class_names,
    threshold: float = 0.5,
    median_frames: int = 7,
    clip_duration: float | None = None,
) -> Timeline:
    """Threshold, median-filter and merge frame runs into events.

    The median filter replicates edge frames at the clip boundaries.
    """
    active = binarize(g.probs, threshold, median_frames)
    hop = g.frame_hop_seconds
    n_frames = g.probs.shape[0]
    duration = n_frames * hop if clip_duration is None else max(clip_duration, n_frames * hop)
    events = []
    for j, name in enumerate(class_names):
        for start, end in runs(active[:, j]):
            events.append(EventInstance(name, start * hop, (end + 1) * hop))
    return Timeline(g.clip_id, duration, tuple(events))


# --- TSV I/O --------------------------------------------------------------


def _decode(text) -> str:
    if isinstance(text, (bytes, bytearray)):
        return text.decode("utf-8")
    if hasattr(text, "read"):
        data = text.read()
        return data.decode("utf-8") if isinstance(data, bytes) else data
    return text


def parse_strong_tsv(
    text, durations: dict[str, float] | None = None, default_duration: float = 10.0
) -> list[Timeline]:
    """Parse ``filename\\tonset\\toffset\\tevent_label`` rows into timelines.

    Rows are grouped by filename in order of first appearance. Overlapping
    same-class events are merged with a warning. Rows with an empty label are
    treated as clips without events.
    """
    lines = _decode(text).splitlines()
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != STRONG_HEADER:
        raise FormatError("missing header 'filename\\tonset\\toffset\\tevent_label'")
    grouped: dict[str, list[EventInstance]] = OrderedDict()
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise RowError(lineno, f"expected 4 fields, got {len(parts)}")
        fname, onset_s, offset_s, label = parts
        events = grouped.setdefault(fname, [])
        if not label and not onset_s and not offset_s:
            continue
        try:
            onset, offset = float(onset_s), float(offset_s)
        except ValueError:
            raise RowError(lineno, f"non-numeric time in {line!r}") from None
        if not onset < offset:
            raise RowError(lineno, f"onset {onset} >= offset {offset}")
        if onset < 0:
            raise RowError(lineno, f"negative onset {onset}")
        events.append(EventInstance(label, onset, offset))
    out = []
    for fname, events in grouped.items():
        duration = (durations or {}).get(fname, default_duration)
        duration = max([duration] + [e.offset for e in events])
        t = Timeline(fname, duration, tuple(events))
        m = t.merged()
        if len(m.events) != len(t.events):
            log.warning("%s: merged overlapping same-class reference events", fname)
        out.append(m)
    return out


def format_time(t: float) -> str:
    return f"{round(t, 3):.3f}"


def serialize_strong_tsv(timelines) -> str:
    buf = io.StringIO()
    buf.write("\t".join(STRONG_HEADER) + "\n")
    for t in timelines:
        if not t.events:
            buf.write(f"{t.clip_id}\t\t\t\n")
        for ev in t.events:
            buf.write(f"{t.clip_id}\t{format_time(ev.onset)}\t{format_time(ev.offset)}\t{ev.class_name}\n")
    return buf.getvalue()


def parse_weak_tsv(text) -> list[WeakLabel]:
    lines = _decode(text).splitlines()
    if not lines or tuple(lines[0].rstrip("\r").split("\t")) != WEAK_HEADER:
        raise FormatError("missing header 'filename\\tevent_labels'")
    out = []
    for lineno, raw in enumerate(lines[1:], start=2):
        line = raw.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) not in (1, 2):
            raise RowError(lineno, f"expected 2 fields, got {len(parts)}")
        labels = parts[1].split(",") if len(parts) == 2 and parts[1] else []
        out.append(WeakLabel(parts[0], tuple(x.strip() for x in labels if x.strip())))
    return out


def serialize_weak_tsv(labels) -> str:
    rows = ["\t".join(WEAK_HEADER)]
    rows += [f"{w.clip_id}\t{','.join(w.present)}" for w in labels]
    return "\n".join(rows) + "\n"
