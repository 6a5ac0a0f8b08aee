"""SED and separation model contracts, reference implementations and training math.

The reference SED model scores each mel frame by its cosine similarity to a
per-class spectral template and maps that through a per-class logistic
curve. Clip-wise outputs pool frame outputs (max by default). The reference
separator applies a class-specific frequency-band soft mask.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import uniform_filter1d

from .audio import AnalysisConfig, Spectrogram, Waveform, apply_mask_resynth
from .backend import get_pool
from .errors import BackendError, CalibrationError, ShapeMismatch, UnknownQuery
from .events import ClipPrediction, FrameGrid, Timeline

MODEL_FORMAT = "noisysed-model"
MODEL_VERSION = 1

BCE_EPS = 1e-7
LN9 = float(np.log(9.0))
MAX_SLOPE = 200.0
# a missed clip-level detection costs this many false alarms during calibration
MISS_COST = 2.0
# smoothed mel-power frames below this norm count as silence; a full-scale sine
# scores about 6.5e4, so the floor sits roughly 110 dB down and only rejects
# numerical residue, whose cosine to a template is meaningless
ENERGY_FLOOR = 1e-6


@dataclass(eq=False)
class SedModelHandle:
    kind: str  # "reference-template" | "external-backend"
    class_names: tuple[str, ...]
    templates: np.ndarray | None = None  # (N, F), rows L2-normalized
    slope: np.ndarray | None = None  # (N,)
    bias: np.ndarray | None = None  # (N,)
    pooling: str = "max"
    address: str | None = None
    pool_size: int = 1
    meta: dict = field(default_factory=dict)
    context_frames: int = 1

    def __post_init__(self):
        self.class_names = tuple(self.class_names)
        if self.context_frames < 1 or self.context_frames % 2 == 0:
            raise ValueError("context_frames must be odd and >= 1")
        if self.kind == "reference-template":
            t = np.asarray(self.templates, dtype=np.float64)
            if t.ndim != 2 or t.shape[0] != len(self.class_names):
                raise ShapeMismatch("one template row per class is required")
            if not np.allclose(np.linalg.norm(t, axis=1), 1.0):
                raise ValueError("templates must be L2-normalized")
            self.templates = t
            self.slope = np.asarray(self.slope, dtype=np.float64)
            self.bias = np.asarray(self.bias, dtype=np.float64)
        elif self.kind == "external-backend":
            if not self.address:
                raise ValueError("external backend needs an address")
        else:
            raise ValueError(f"unknown SED model kind {self.kind!r}")
        if self.pooling not in ("max", "linear-softmax"):
            raise ValueError(f"unknown pooling {self.pooling!r}")

    def to_dict(self) -> dict:
        d = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "model": "sed",
            "kind": self.kind,
            "class_names": list(self.class_names),
            "pooling": self.pooling,
            "context_frames": self.context_frames,
            "meta": self.meta,
        }
        if self.kind == "reference-template":
            d.update(
                templates=self.templates.tolist(),
                slope=self.slope.tolist(),
                bias=self.bias.tolist(),
            )
        else:
            d.update(address=self.address, pool_size=self.pool_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SedModelHandle":
        _check_header(d, "sed")
        return cls(
            d["kind"],
            d["class_names"],
            d.get("templates"),
            d.get("slope"),
            d.get("bias"),
            d.get("pooling", "max"),
            d.get("address"),
            d.get("pool_size", 1),
            d.get("meta", {}),
            d.get("context_frames", 1),
        )


@dataclass(eq=False)
class LassModelHandle:
    kind: str  # "reference-mask" | "external-backend"
    mask_table: dict[str, np.ndarray] = field(default_factory=dict)
    cfg: AnalysisConfig = field(default_factory=AnalysisConfig)
    address: str | None = None
    pool_size: int = 1

    def __post_init__(self):
        if self.kind == "reference-mask":
            table = {}
            for k, v in self.mask_table.items():
                m = np.asarray(v, dtype=np.float64)
                if np.any(m < 0) or np.any(m > 1):
                    raise ValueError(f"mask for {k!r} leaves [0, 1]")
                if m.shape != (self.cfg.n_freqs,):
                    raise ShapeMismatch(f"mask for {k!r} must have {self.cfg.n_freqs} bins")
                table[k] = m
            self.mask_table = table
        elif self.kind == "external-backend":
            if not self.address:
                raise ValueError("external backend needs an address")
        else:
            raise ValueError(f"unknown separation model kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "model": "lass",
            "kind": self.kind,
            "analysis": self.cfg.to_dict(),
        }
        if self.kind == "reference-mask":
            d["mask_table"] = {k: v.tolist() for k, v in sorted(self.mask_table.items())}
        else:
            d.update(address=self.address, pool_size=self.pool_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LassModelHandle":
        _check_header(d, "lass")
        return cls(
            d["kind"],
            d.get("mask_table", {}),
            AnalysisConfig.from_dict(d["analysis"]),
            d.get("address"),
            d.get("pool_size", 1),
        )


def _check_header(d: dict, model: str) -> None:
    if d.get("format") != MODEL_FORMAT or d.get("model") != model:
        raise ValueError(f"not a {model} model file")
    if d.get("version") != MODEL_VERSION:
        raise ValueError(f"unsupported model file version {d.get('version')}")


def save_model(handle, path: str | Path) -> None:
    Path(path).write_text(json.dumps(handle.to_dict()))


def load_model(path: str | Path):
    d = json.loads(Path(path).read_text())
    return SedModelHandle.from_dict(d) if d.get("model") == "sed" else LassModelHandle.from_dict(d)


# --- SED ------------------------------------------------------------------


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def smooth_frames(mel: np.ndarray, context_frames: int) -> np.ndarray:
    """Centred moving average over ``context_frames`` frames (edges replicated)."""
    if context_frames <= 1 or mel.shape[0] == 0:
        return mel
    return uniform_filter1d(mel, context_frames, axis=0, mode="nearest")


def frame_cosine(mel: np.ndarray, templates: np.ndarray) -> np.ndarray:
    """Cosine similarity of every frame to every template; silent frames score 0."""
    norms = np.linalg.norm(mel, axis=1)
    dots = mel @ templates.T
    out = np.zeros_like(dots)
    live = norms > ENERGY_FLOOR
    out[live] = dots[live] / norms[live, None]
    return np.clip(out, 0.0, 1.0)


def pool_frames(frame_probs: np.ndarray, pooling: str = "max") -> np.ndarray:
    if frame_probs.shape[0] == 0:
        return np.zeros(frame_probs.shape[1])
    if pooling == "max":
        return frame_probs.max(axis=0)
    num = (frame_probs**2).sum(axis=0)
    den = frame_probs.sum(axis=0)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def sed_infer(
    m: SedModelHandle, x: Spectrogram, clip_id: str = ""
) -> tuple[FrameGrid, ClipPrediction]:
    """Frame-wise and clip-wise class probabilities for one mel spectrogram."""
    if x.kind != "mel":
        raise ValueError("SED models expect a mel spectrogram")
    if m.kind == "external-backend":
        try:
            with get_pool(m.address, m.pool_size).connection() as conn:
                frames, clip = conn.sed(x.values, x.frame_hop_seconds)
        except BackendError as exc:
            raise BackendError(f"clip {clip_id!r}: {exc}") from exc
        frames = np.clip(frames, 0.0, 1.0)
        clip = np.clip(clip, 0.0, 1.0)
    else:
        if x.values.shape[1] != m.templates.shape[1]:
            raise ShapeMismatch(
                f"spectrogram has {x.values.shape[1]} bins, templates have {m.templates.shape[1]}"
            )
        cos = frame_cosine(smooth_frames(x.values, m.context_frames), m.templates)
        frames = sigmoid(m.slope * cos + m.bias)
        clip = pool_frames(frames, m.pooling)
    return FrameGrid(clip_id, frames, x.frame_hop_seconds), ClipPrediction(clip_id, clip)


def active_frame_mask(t: Timeline, class_names, n_frames: int, hop_seconds: float, win_seconds: float):
    """(T, N) boolean mask of frames whose centre lies inside an event."""
    centres = np.arange(n_frames) * hop_seconds + win_seconds / 2
    mask = np.zeros((n_frames, len(class_names)), dtype=bool)
    col = {c: i for i, c in enumerate(class_names)}
    for ev in t.events:
        if ev.class_name in col:
            mask[:, col[ev.class_name]] |= (centres >= ev.onset) & (centres < ev.offset)
    return mask


def _fit_logistic(pos: np.ndarray, neg: np.ndarray, miss_cost: float = MISS_COST) -> tuple[float, float, float]:
    """Pick a decision point between positive and negative clip scores.

    Separable scores get the midpoint with the slope set so the closest
    positive maps to >= 0.9 and the closest negative to <= 0.1. Otherwise
    the threshold minimizes ``miss_cost * misses + false alarms``. The slope
    always keeps a zero score at or below 0.1.
    """
    lo = pos.min()
    hi = neg.max() if neg.size else 0.0
    if lo > hi:
        t = 0.5 * (lo + hi)
        slope = LN9 / (0.5 * (lo - hi) * 0.98)
    else:
        cands = np.unique(np.concatenate([pos, neg]))
        cuts = 0.5 * (cands[1:] + cands[:-1]) if cands.size > 1 else cands
        misses = np.searchsorted(np.sort(pos), cuts, side="left")
        alarms = neg.size - np.searchsorted(np.sort(neg), cuts, side="left")
        t = float(cuts[np.argmin(miss_cost * misses + alarms)])
        spread = np.std(np.concatenate([pos, neg])) or 1.0
        slope = LN9 / spread
    if t <= 0:
        raise CalibrationError("degenerate calibration threshold")
    slope = float(np.clip(max(slope, LN9 / t), 0.0, MAX_SLOPE))
    return slope, -slope * t, t


def _fit_constants(feats, masks, templates, miss_cost, class_names=None):
    """Per-class logistic constants from the clip scores of ``feats`` under ``templates``."""
    n_cls = templates.shape[0]
    clip_scores = np.array([frame_cosine(f, templates).max(axis=0) for f in feats])
    present = np.array([[m[:, j].any() for j in range(n_cls)] for m in masks])
    slope, bias, thr = np.zeros(n_cls), np.zeros(n_cls), np.zeros(n_cls)
    for j in range(n_cls):
        if not present[:, j].any():
            name = class_names[j] if class_names else j
            raise CalibrationError(f"class {name!r} has no positive clip to calibrate on")
        slope[j], bias[j], thr[j] = _fit_logistic(
            clip_scores[present[:, j], j], clip_scores[~present[:, j], j], miss_cost
        )
    return slope, bias, thr


def calibrate_reference_sed(
    examples,
    class_names,
    cfg: AnalysisConfig,
    pooling: str = "max",
    meta: dict | None = None,
    context_frames: int = 1,
    miss_cost: float = MISS_COST,
) -> SedModelHandle:
    """Fit templates and logistic constants from ``(mel Spectrogram, Timeline)`` pairs.

    ``examples`` may be any iterable; it is consumed once.
    """
    class_names = tuple(class_names)
    n_cls = len(class_names)
    sums = None
    counts = np.zeros(n_cls)
    feats, masks = [], []
    for mel, tl in examples:
        feat = smooth_frames(mel.values, context_frames)
        mask = active_frame_mask(
            tl, class_names, mel.n_frames, mel.frame_hop_seconds, cfg.win_length / cfg.sample_rate
        )
        if sums is None:
            sums = np.zeros((n_cls, feat.shape[1]))
        feats.append(feat)
        masks.append(mask)
        sums += mask.T.astype(np.float64) @ feat
        counts += mask.sum(axis=0)
    if sums is None:
        raise CalibrationError("empty calibration set")
    for j, name in enumerate(class_names):
        if counts[j] == 0:
            raise CalibrationError(f"class {name!r} has no active frames in the calibration set")
    means = sums / counts[:, None]
    norms = np.linalg.norm(means, axis=1)
    for j, name in enumerate(class_names):
        if norms[j] <= 0:
            raise CalibrationError(f"class {name!r} has a zero-energy template")
    templates = means / norms[:, None]
    slope, bias, _ = _fit_constants(feats, masks, templates, miss_cost, class_names)
    return SedModelHandle(
        "reference-template",
        class_names,
        templates,
        slope,
        bias,
        pooling,
        meta=dict(meta or {}),
        context_frames=context_frames,
    )


def finetune_reference_sed(
    base: SedModelHandle,
    base_examples,
    epochs,
    cfg: AnalysisConfig,
    meta: dict | None = None,
    miss_cost: float = MISS_COST,
) -> SedModelHandle:
    """Self-paced recalibration of ``base`` on augmented epochs, in order.

    Templates start from the active frames of ``base_examples`` (the data
    ``base`` was calibrated on). After every epoch the model is refit, and an
    active frame of the next epoch joins a class template only if the current
    model already detects that class in it. Easy epochs therefore widen what
    the model accepts before hard ones arrive. The logistic constants are
    finally fit on every fine-tuning clip, accepted frames or not.
    """
    class_names = base.class_names
    n_cls = len(class_names)
    ctx = base.context_frames
    win = cfg.win_length / cfg.sample_rate
    sums = np.zeros_like(base.templates)
    counts = np.zeros(n_cls)
    for mel, tl in base_examples:
        feat = smooth_frames(mel.values, ctx)
        mask = active_frame_mask(tl, class_names, mel.n_frames, mel.frame_hop_seconds, win)
        sums += mask.T.astype(np.float64) @ feat
        counts += mask.sum(axis=0)
    if not counts.all():
        raise CalibrationError("base examples leave a class without active frames")
    templates = base.templates
    thr = -base.bias / base.slope
    feats, masks = [], []
    for epoch in epochs:
        for mel, tl in epoch:
            feat = smooth_frames(mel.values, ctx)
            mask = active_frame_mask(tl, class_names, mel.n_frames, mel.frame_hop_seconds, win)
            feats.append(feat)
            masks.append(mask)
            accepted = mask & (frame_cosine(feat, templates) >= thr)
            sums += accepted.T.astype(np.float64) @ feat
            counts += accepted.sum(axis=0)
        means = sums / counts[:, None]
        templates = means / np.linalg.norm(means, axis=1)[:, None]
        _, _, thr = _fit_constants(feats, masks, templates, miss_cost, class_names)
    if not feats:
        raise CalibrationError("empty fine-tuning set")
    slope, bias, _ = _fit_constants(feats, masks, templates, miss_cost, class_names)
    return SedModelHandle(
        "reference-template",
        class_names,
        templates,
        slope,
        bias,
        base.pooling,
        meta=dict(meta or {}),
        context_frames=ctx,
    )


# --- training math --------------------------------------------------------


def _bce(p: np.ndarray, y: np.ndarray) -> float:
    p = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)))


def bce_loss(pred_s, pred_w, label_s, label_w) -> float:
    """Frame-level plus clip-level binary cross entropy, each mean-reduced."""
    ps = np.asarray(getattr(pred_s, "probs", pred_s), dtype=np.float64)
    pw = np.asarray(getattr(pred_w, "probs", pred_w), dtype=np.float64)
    ys = np.asarray(label_s, dtype=np.float64)
    yw = np.asarray(label_w, dtype=np.float64)
    if ps.shape != ys.shape or pw.shape != yw.shape:
        raise ShapeMismatch(f"prediction/label shapes differ: {ps.shape}/{ys.shape}, {pw.shape}/{yw.shape}")
    return _bce(ps, ys) + _bce(pw, yw)


def ema_update(teacher, student, decay: float = 0.999) -> np.ndarray:
    t = np.asarray(teacher, dtype=np.float64)
    s = np.asarray(student, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeMismatch(f"teacher {t.shape} and student {s.shape} differ")
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    return decay * t + (1.0 - decay) * s


# --- separation -----------------------------------------------------------


def band_mask(band: tuple[float, float], cfg: AnalysisConfig, pad_hz: float | None = None,
              taper_hz: float | None = None) -> np.ndarray:
    """Soft mask: 1 over ``band`` widened by ``pad_hz``, raised-cosine roll-off beyond."""
    bin_hz = cfg.sample_rate / cfg.win_length
    lo, hi = band
    pad = 2 * bin_hz if pad_hz is None else pad_hz
    taper = 2 * bin_hz if taper_hz is None else taper_hz
    f = np.arange(cfg.n_freqs) * bin_hz
    lo_p, hi_p = lo - pad, hi + pad
    dist = np.maximum(lo_p - f, f - hi_p)
    m = np.where(dist <= 0, 1.0, 0.0)
    ramp = (dist > 0) & (dist < taper)
    m[ramp] = 0.5 + 0.5 * np.cos(np.pi * dist[ramp] / taper)
    return m


def reference_lass(protos, class_names, cfg: AnalysisConfig) -> LassModelHandle:
    return LassModelHandle(
        "reference-mask", {c: band_mask(protos[c].band, cfg) for c in class_names}, cfg
    )


def lass_separate(m: LassModelHandle, audio: Waveform, query: str) -> Waveform:
    """Extract the component of ``audio`` matching ``query``."""
    if m.kind == "external-backend":
        with get_pool(m.address, m.pool_size).connection() as conn:
            out = conn.separate(audio.samples, audio.sample_rate, query)
        if out.shape[0] != len(audio):
            raise BackendError(f"separator returned {out.shape[0]} samples, expected {len(audio)}")
        return audio.with_samples(out)
    if query not in m.mask_table:
        raise UnknownQuery(query)
    return apply_mask_resynth(audio, m.mask_table[query], m.cfg)
