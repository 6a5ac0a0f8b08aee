"""Test-time chain: clip-wise prediction -> text queries -> separation -> remix -> SED."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .audio import AnalysisConfig, Waveform, mel_spectrogram, rms_power
from .errors import ConfigError, EmptyRemix, NoisySedError, RateMismatch, ShapeMismatch
from .events import ClipPrediction, FrameGrid, WeakLabel
from .models import LassModelHandle, SedModelHandle, lass_separate, sed_infer

log = logging.getLogger(__name__)

QUERY_THRESHOLD = 0.5

VARIANTS = {
    "#1": "no separation",
    "#2": "Ground Truth",
    "#3": "All Event Texts",
    "#4": "Ours w/o F.T.",
    "#5": "Ours w/o LLM",
    "#6": "Ours w/o CL",
    "#7": "Ours",
}

# which calibrated model generates the queries for each variant
QUERY_MODEL = {"#4": "theta", "#5": "alpha_random_selection", "#6": "alpha_random_snr", "#7": "alpha"}


@dataclass(frozen=True)
class QuerySet:
    clip_id: str
    queries: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "queries", tuple(self.queries))
        if len(set(self.queries)) != len(self.queries):
            raise ValueError("duplicate queries")

    def __len__(self):
        return len(self.queries)


def queries_from_clipwise(p: ClipPrediction, class_names, threshold: float = QUERY_THRESHOLD) -> QuerySet:
    """Classes with probability >= threshold, most probable first, ties in class order."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must be in (0, 1)")
    keep = [j for j, v in enumerate(p.probs) if v >= threshold]
    keep.sort(key=lambda j: (-p.probs[j], j))
    return QuerySet(p.clip_id, tuple(class_names[j] for j in keep))


def remix(tracks) -> Waveform:
    """Sample-wise mean of the separated tracks."""
    tracks = list(tracks)
    if not tracks:
        raise EmptyRemix("nothing to remix")
    first = tracks[0]
    for t in tracks[1:]:
        if t.sample_rate != first.sample_rate:
            raise RateMismatch("tracks have different sample rates")
        if len(t) != len(first):
            raise ShapeMismatch("tracks have different lengths")
    if len(tracks) == 1:
        return first
    return first.with_samples(np.mean(np.stack([t.samples for t in tracks]), axis=0))


@dataclass
class PipelineConfig:
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    threshold: float = QUERY_THRESHOLD
    query_override: tuple[str, ...] | None = None
    separate: bool = True


@dataclass
class DetectionResult:
    frames: FrameGrid
    queries: QuerySet
    query_prediction: ClipPrediction | None
    provenance: dict


def detect_with_separation(
    noisy: Waveform,
    query_model: SedModelHandle | None,
    lass: LassModelHandle | None,
    final_model: SedModelHandle,
    cfg: PipelineConfig,
    clip_id: str = "",
    variant: str = "",
) -> DetectionResult:
    t0 = time.perf_counter()
    mel = mel_spectrogram(noisy, cfg.analysis)
    prov = {"clip_id": clip_id, "variant": variant}
    if not cfg.separate:
        frames, _ = sed_infer(final_model, mel, clip_id)
        prov.update(separation=False, queries=[], fallback=False, track_energy=[])
        prov["timings"] = {"total_s": time.perf_counter() - t0}
        return DetectionResult(frames, QuerySet(clip_id), None, prov)

    pred = None
    if cfg.query_override is not None:
        queries = QuerySet(clip_id, tuple(cfg.query_override))
    else:
        if query_model is None:
            raise ConfigError("a query model is required unless queries are overridden")
        _, pred = sed_infer(query_model, mel, clip_id)
        queries = queries_from_clipwise(pred, query_model.class_names, cfg.threshold)
    t1 = time.perf_counter()

    tracks, energies = [], []
    for q in queries.queries:
        try:
            s = lass_separate(lass, noisy, q)
        except NoisySedError as exc:
            log.warning("clip %s: separation for %r failed, dropping track: %s", clip_id, q, exc)
            energies.append(None)
            continue
        tracks.append(s)
        energies.append(rms_power(s) if len(s) else 0.0)
    t2 = time.perf_counter()

    fallback = not tracks
    source = noisy if fallback else remix(tracks)
    frames, _ = sed_infer(final_model, mel if fallback else mel_spectrogram(source, cfg.analysis), clip_id)
    prov.update(
        separation=True,
        queries=list(queries.queries),
        query_probs=None if pred is None else [round(float(v), 6) for v in pred.probs],
        fallback=fallback,
        track_energy=energies,
        timings={
            "query_s": t1 - t0,
            "separate_s": t2 - t1,
            "total_s": time.perf_counter() - t0,
        },
    )
    return DetectionResult(frames, queries, pred, prov)


def system_variant(
    kind: str,
    models: dict[str, SedModelHandle],
    lass: LassModelHandle | None,
    cfg: PipelineConfig | None = None,
    final: str = "theta",
):
    """Pipeline closure ``(noisy, clip_id, weak_label) -> DetectionResult`` for one results-table row.

    ``models`` maps ``theta``, ``alpha``, ``alpha_random_selection`` and
    ``alpha_random_snr`` to calibrated SED models; ``final`` chooses the
    model that scores the remixed audio.
    """
    if kind not in VARIANTS:
        raise ConfigError(f"unknown system variant {kind!r}")
    cfg = cfg or PipelineConfig()
    if final not in models:
        raise ConfigError(f"variant {kind}: final model {final!r} missing")
    final_model = models[final]
    if kind != "#1" and lass is None:
        raise ConfigError(f"variant {kind} needs a separation model")
    query_model = None
    if kind in QUERY_MODEL:
        key = QUERY_MODEL[kind]
        if key not in models:
            raise ConfigError(f"variant {kind} needs model {key!r}")
        query_model = models[key]

    def run(noisy: Waveform, clip_id: str = "", weak: WeakLabel | None = None) -> DetectionResult:
        c = PipelineConfig(cfg.analysis, cfg.threshold, None, True)
        if kind == "#1":
            c.separate = False
        elif kind == "#2":
            if weak is None:
                raise ConfigError("variant #2 needs ground-truth weak labels")
            order = {n: i for i, n in enumerate(final_model.class_names)}
            c.query_override = tuple(sorted(weak.present, key=order.__getitem__))
        elif kind == "#3":
            c.query_override = tuple(final_model.class_names)
        return detect_with_separation(noisy, query_model, lass, final_model, c, clip_id, kind)

    run.kind = kind
    return run
