"""Polyphonic sound detection score (PSDS) and clip-level recall.

Each operating point (one detection threshold) is reduced to a single
effective false-positive rate and an effective true-positive rate

    eFPR = mean_c FP_c / h + alpha_ct * mean_c mean_{c' != c} CT(c, c') / h
    mu   = max(0, mean_c TPR_c - alpha_st * std_c TPR_c)

and the score is the area under the non-decreasing staircase through the
``(eFPR, mu)`` points, anchored at ``(0, 0)``, held flat up to ``e_max`` and
normalized by ``e_max``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadParameter, BadReference, Undefined
from .events import FrameGrid, frames_to_events


@dataclass(frozen=True)
class PsdsParams:
    rho_dtc: float
    rho_gtc: float
    rho_cttc: float
    alpha_ct: float
    alpha_st: float
    e_max: float

    def __post_init__(self):
        for name in ("rho_dtc", "rho_gtc", "rho_cttc"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise BadParameter(f"{name} must lie in [0, 1]")
        if self.alpha_ct < 0 or self.alpha_st < 0:
            raise BadParameter("alpha_ct and alpha_st must be >= 0")
        if not self.e_max > 0:
            raise BadParameter("e_max must be > 0")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


SCENARIO_1 = PsdsParams(rho_dtc=0.7, rho_gtc=0.7, rho_cttc=0.3, alpha_ct=0.0, alpha_st=1.0, e_max=100.0)
SCENARIO_2 = PsdsParams(rho_dtc=0.1, rho_gtc=0.1, rho_cttc=0.3, alpha_ct=0.5, alpha_st=1.0, e_max=100.0)
SCENARIOS = {1: SCENARIO_1, 2: SCENARIO_2}

DEFAULT_THRESHOLDS = tuple(np.linspace(0.01, 0.99, 50).round(6).tolist())


@dataclass(frozen=True, eq=False)
class OperatingPointStats:
    classes: tuple[str, ...]
    tp: np.ndarray  # (N,)
    fp: np.ndarray  # (N,)
    ct: np.ndarray  # (N, N), detection class x reference class
    n_refs: np.ndarray  # (N,)
    duration_hours: float


def _intervals(events) -> np.ndarray:
    if not events:
        return np.zeros((0, 2))
    return np.array([[e.onset, e.offset] for e in events], dtype=np.float64)


def _overlap(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise intersection lengths, shape ``(len(a), len(b))``."""
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    start = np.maximum(a[:, None, 0], b[None, :, 0])
    end = np.minimum(a[:, None, 1], b[None, :, 1])
    return np.maximum(0.0, end - start)


def _check_refs(refs) -> None:
    for t in refs:
        for name, evs in t.by_class().items():
            iv = _intervals(sorted(evs, key=lambda e: e.onset))
            if np.any(iv[1:, 0] < iv[:-1, 1]):
                raise BadReference(f"{t.clip_id}: overlapping reference events of class {name!r}")


def _classes_of(refs, dets=()) -> tuple[str, ...]:
    names = {e.class_name for t in list(refs) + list(dets) for e in t.events}
    return tuple(sorted(names))


def match_operating_point(
    dets, refs, params: PsdsParams, classes=None, duration_hours: float | None = None
) -> OperatingPointStats:
    """Count TPs, FPs and cross-triggers for one set of detections."""
    refs = list(refs)
    _check_refs(refs)
    classes = tuple(classes) if classes is not None else _classes_of(refs, dets)
    col = {c: i for i, c in enumerate(classes)}
    n = len(classes)
    ref_by_clip = {t.clip_id: t for t in refs}
    det_by_clip = {}
    for t in dets:
        if t.clip_id not in ref_by_clip:
            raise BadReference(f"detections for unknown clip {t.clip_id!r}")
        det_by_clip[t.clip_id] = t
    tp = np.zeros(n, dtype=np.int64)
    fp = np.zeros(n, dtype=np.int64)
    ct = np.zeros((n, n), dtype=np.int64)
    n_refs = np.zeros(n, dtype=np.int64)
    for clip_id, ref in ref_by_clip.items():
        r_iv = {c: _intervals(evs) for c, evs in ref.by_class().items()}
        for c, iv in r_iv.items():
            n_refs[col[c]] += iv.shape[0]
        det = det_by_clip.get(clip_id)
        if det is None:
            continue
        for c, evs in det.by_class().items():
            j = col[c]
            d_iv = _intervals(evs)
            d_dur = d_iv[:, 1] - d_iv[:, 0]
            own = r_iv.get(c, np.zeros((0, 2)))
            inter = _overlap(d_iv, own)
            candidate = inter.sum(axis=1) / d_dur >= params.rho_dtc
            if own.shape[0]:
                r_dur = own[:, 1] - own[:, 0]
                gtc = inter[candidate].sum(axis=0) / r_dur
                tp[j] += int(np.count_nonzero(gtc >= params.rho_gtc))
            rest = ~candidate
            if not rest.any():
                continue
            is_ct = np.zeros(d_iv.shape[0], dtype=bool)
            for other, o_iv in r_iv.items():
                if other == c:
                    continue
                hit = rest & (_overlap(d_iv, o_iv).sum(axis=1) / d_dur >= params.rho_cttc)
                ct[j, col[other]] += int(np.count_nonzero(hit))
                is_ct |= hit
            if params.alpha_ct > 0:
                fp[j] += int(np.count_nonzero(rest & ~is_ct))
            else:
                fp[j] += int(np.count_nonzero(rest))
    if duration_hours is None:
        duration_hours = sum(t.clip_duration for t in refs) / 3600.0
    return OperatingPointStats(classes, tp, fp, ct, n_refs, float(duration_hours))


def operating_point(stats: OperatingPointStats, params: PsdsParams) -> tuple[float, float]:
    """``(eFPR, mu)`` of one operating point."""
    h = stats.duration_hours
    n = len(stats.classes)
    fp_rate = stats.fp / h
    if n > 1:
        ct_rate = (stats.ct.sum(axis=1) - np.diag(stats.ct)) / h / (n - 1)
    else:
        ct_rate = np.zeros(n)
    efpr = float(np.mean(fp_rate) + params.alpha_ct * np.mean(ct_rate))
    has_ref = stats.n_refs > 0
    tpr = stats.tp[has_ref] / stats.n_refs[has_ref]
    mu = float(np.mean(tpr) - params.alpha_st * np.std(tpr))
    return efpr, max(0.0, mu)


def staircase_area(points, e_max: float) -> float:
    """Normalized area under the upper staircase through ``points``."""
    area = 0.0
    cur = 0.0
    prev = 0.0
    for e, mu in sorted(points):
        if e > e_max:
            break
        area += cur * (e - prev)
        prev = e
        cur = max(cur, mu)
    area += cur * (e_max - prev)
    return area / e_max


def psds(
    per_threshold_dets: dict,
    refs,
    params: PsdsParams,
    duration_hours: float | None = None,
    classes=None,
    return_points: bool = False,
):
    """PSDS from a mapping ``threshold -> list of detection Timelines``."""
    refs = list(refs)
    if not any(t.events for t in refs):
        raise BadReference("no reference events")
    if len(per_threshold_dets) < 2:
        raise BadParameter("PSDS needs at least two operating points")
    if duration_hours is not None and not duration_hours > 0:
        raise BadParameter("duration_hours must be > 0")
    if classes is None:
        classes = _classes_of(refs, [t for ds in per_threshold_dets.values() for t in ds])
    points = []
    for thr in sorted(per_threshold_dets):
        stats = match_operating_point(per_threshold_dets[thr], refs, params, classes, duration_hours)
        points.append(operating_point(stats, params))
    score = staircase_area(points, params.e_max)
    return (score, points) if return_points else score


def detections_from_grids(
    grids, class_names, thresholds=DEFAULT_THRESHOLDS, median_frames: int = 7, durations=None
) -> dict:
    out = {}
    for thr in thresholds:
        out[thr] = [
            frames_to_events(g, class_names, thr, median_frames, (durations or {}).get(g.clip_id))
            for g in grids
        ]
    return out


def psds_from_grids(
    grids: list[FrameGrid],
    refs,
    params: PsdsParams,
    class_names,
    thresholds=DEFAULT_THRESHOLDS,
    median_frames: int = 7,
    return_points: bool = False,
):
    refs = list(refs)
    durations = {t.clip_id: t.clip_duration for t in refs}
    dets = detections_from_grids(grids, class_names, thresholds, median_frames, durations)
    hours = sum(durations.values()) / 3600.0
    return psds(dets, refs, params, hours, class_names, return_points)


def macro_recall(preds, labels, threshold: float = 0.5, classes=None) -> float:
    """Mean over classes with at least one positive of clip-level recall."""
    if not 0.0 < threshold < 1.0:
        raise BadParameter("threshold must be in (0, 1)")
    by_id = {p.clip_id: p for p in preds}
    labels = list(labels)
    if classes is None:
        raise BadParameter("class order is required to index clip probabilities")
    classes = tuple(classes)
    tp = np.zeros(len(classes))
    pos = np.zeros(len(classes))
    for lab in labels:
        if lab.clip_id not in by_id:
            raise BadParameter(f"no prediction for clip {lab.clip_id!r}")
        probs = by_id[lab.clip_id].probs
        for name in lab.present:
            j = classes.index(name)
            pos[j] += 1
            tp[j] += probs[j] >= threshold
    if not pos.any():
        raise Undefined("no positive labels; macro recall is undefined")
    keep = pos > 0
    return float(np.mean(tp[keep] / pos[keep]))
