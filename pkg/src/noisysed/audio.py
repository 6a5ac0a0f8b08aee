"""Deterministic audio primitives.

Waveforms are float64 mono buffers. SNR is measured on the mean-square
power of the whole clip. STFT analysis uses a periodic Hann window; the
mel spectrogram is computed on unpadded frames so that the frame count is
``1 + (len - win) // hop``, while mask resynthesis pads the signal so that
every input sample is covered by a full set of overlapping frames.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import (
    AudioTooShort,
    DegeneratePower,
    EmptyAudio,
    RateMismatch,
    ShapeMismatch,
)

log = logging.getLogger(__name__)

DEFAULT_SAMPLE_RATE = 16000


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ShapeMismatch(f"waveform must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform contains non-finite samples")
        if int(self.sample_rate) <= 0:
            raise ValueError("sample_rate must be positive")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate

    def with_samples(self, samples) -> "Waveform":
        return Waveform(samples, self.sample_rate)

    @classmethod
    def silence(cls, n_samples: int, sample_rate: int = DEFAULT_SAMPLE_RATE) -> "Waveform":
        return cls(np.zeros(int(n_samples)), sample_rate)


@dataclass(frozen=True)
class AnalysisConfig:
    """Frame analysis settings shared by the SED front end and the separator."""

    sample_rate: int = DEFAULT_SAMPLE_RATE
    win_length: int = 1024
    hop_length: int = 256
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float | None = None

    def __post_init__(self):
        if self.win_length <= 0 or self.hop_length <= 0 or self.hop_length > self.win_length:
            raise ValueError("need 0 < hop_length <= win_length")
        if self.n_mels < 1:
            raise ValueError("n_mels must be >= 1")

    @property
    def hop_seconds(self) -> float:
        return self.hop_length / self.sample_rate

    @property
    def n_freqs(self) -> int:
        return self.win_length // 2 + 1

    @property
    def upper_frequency(self) -> float:
        return self.sample_rate / 2 if self.fmax is None else float(self.fmax)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "win_length": self.win_length,
            "hop_length": self.hop_length,
            "n_mels": self.n_mels,
            "fmin": self.fmin,
            "fmax": self.fmax,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AnalysisConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Spectrogram:
    values: np.ndarray  # (T, F)
    frame_hop_seconds: float
    kind: str  # "linear-magnitude" | "mel"
    sample_rate: int

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ShapeMismatch("spectrogram must be 2-D (frames x bins)")
        if np.any(v < 0) or not np.all(np.isfinite(v)):
            raise ValueError("spectrogram values must be finite and non-negative")
        if self.kind not in ("linear-magnitude", "mel"):
            raise ValueError(f"unknown spectrogram kind {self.kind!r}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


def _check_rate(a: Waveform, b: Waveform) -> None:
    if a.sample_rate != b.sample_rate:
        raise RateMismatch(f"sample rates differ: {a.sample_rate} vs {b.sample_rate}")


def rms_power(w: Waveform) -> float:
    """Mean-square power ``sum(x**2) / len(x)``."""
    if len(w) == 0:
        raise EmptyAudio("cannot measure power of an empty waveform")
    x = w.samples
    return float(np.dot(x, x) / x.shape[0])


def snr_db(signal: Waveform, noise: Waveform) -> float:
    return 10.0 * np.log10(rms_power(signal) / rms_power(noise))


def tile_to_length(w: Waveform, n_samples: int) -> Waveform:
    """Repeat ``w`` end to end and cut it to exactly ``n_samples``."""
    if len(w) == 0:
        raise EmptyAudio("cannot tile an empty waveform")
    reps = -(-n_samples // len(w))
    return w.with_samples(np.tile(w.samples, reps)[:n_samples])


def crop_noise(noise: Waveform, n_samples: int, seed: int | None = 0) -> Waveform:
    """Cut a random-offset segment of ``n_samples`` from ``noise``."""
    if len(noise) < n_samples:
        raise ShapeMismatch(
            f"noise has {len(noise)} samples but {n_samples} are needed; tile it first"
        )
    slack = len(noise) - n_samples
    offset = 0 if slack == 0 else int(np.random.default_rng(seed).integers(0, slack + 1))
    return noise.with_samples(noise.samples[offset : offset + n_samples])


def noise_gain(signal: Waveform, noise: Waveform, snr: float) -> float:
    p_sig = rms_power(signal)
    p_noise = rms_power(noise)
    if p_sig <= 0.0 or p_noise <= 0.0:
        raise DegeneratePower("signal and noise must both have non-zero power")
    return float(np.sqrt(p_sig / (p_noise * 10.0 ** (snr / 10.0))))


def mix_at_snr(signal: Waveform, noise: Waveform, snr: float, seed: int | None = 0) -> Waveform:
    """Return ``signal + g * noise`` with ``g`` chosen so the SNR is ``snr`` dB.

    Noise longer than the signal is cropped at a seeded random offset; shorter
    noise is rejected (use :func:`tile_to_length`).
    """
    _check_rate(signal, noise)
    cropped = crop_noise(noise, len(signal), seed)
    g = noise_gain(signal, cropped, snr)
    return signal.with_samples(signal.samples + g * cropped.samples)


# --- STFT / mel -----------------------------------------------------------


@lru_cache(maxsize=8)
def hann_window(n: int) -> np.ndarray:
    w = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)
    w.setflags(write=False)
    return w


def frame_count(n_samples: int, cfg: AnalysisConfig) -> int:
    if n_samples < cfg.win_length:
        return 0
    return 1 + (n_samples - cfg.win_length) // cfg.hop_length


def _frames(x: np.ndarray, cfg: AnalysisConfig) -> np.ndarray:
    n = frame_count(x.shape[0], cfg)
    view = np.lib.stride_tricks.sliding_window_view(x, cfg.win_length)[:: cfg.hop_length]
    return view[:n]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_edges(cfg: AnalysisConfig) -> np.ndarray:
    """The ``n_mels + 2`` corner frequencies (Hz) of the triangular filters."""
    return mel_to_hz(
        np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(cfg.upper_frequency), cfg.n_mels + 2)
    )


def mel_band_centers(cfg: AnalysisConfig) -> np.ndarray:
    return mel_band_edges(cfg)[1:-1]


@lru_cache(maxsize=8)
def mel_filterbank(cfg: AnalysisConfig) -> np.ndarray:
    """Triangular HTK-style filterbank with unit peaks, shape ``(n_mels, n_freqs)``."""
    edges = mel_band_edges(cfg)
    freqs = np.arange(cfg.n_freqs) * cfg.sample_rate / cfg.win_length
    fb = np.zeros((cfg.n_mels, cfg.n_freqs))
    for b in range(cfg.n_mels):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[b] = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def magnitude_spectrogram(w: Waveform, cfg: AnalysisConfig) -> Spectrogram:
    if len(w) < cfg.win_length:
        raise AudioTooShort(f"need at least {cfg.win_length} samples, got {len(w)}")
    frames = _frames(w.samples, cfg) * hann_window(cfg.win_length)
    mag = np.abs(np.fft.rfft(frames, axis=1))
    return Spectrogram(mag, cfg.hop_seconds, "linear-magnitude", w.sample_rate)


def mel_spectrogram(w: Waveform, cfg: AnalysisConfig) -> Spectrogram:
    """Mel power spectrogram, shape ``(frames, n_mels)``."""
    if w.sample_rate != cfg.sample_rate:
        raise RateMismatch(f"waveform at {w.sample_rate} Hz, config expects {cfg.sample_rate} Hz")
    power = magnitude_spectrogram(w, cfg).values ** 2
    return Spectrogram(power @ mel_filterbank(cfg).T, cfg.hop_seconds, "mel", w.sample_rate)


# --- mask resynthesis -----------------------------------------------------


def _padding(n_samples: int, cfg: AnalysisConfig) -> tuple[int, int]:
    left = cfg.win_length - cfg.hop_length
    total = n_samples + 2 * left
    extra = (-(total - cfg.win_length)) % cfg.hop_length
    return left, left + extra


def stft_shape(n_samples: int, cfg: AnalysisConfig) -> tuple[int, int]:
    """Shape of the padded STFT used by :func:`stft` and :func:`apply_mask_resynth`."""
    left, right = _padding(n_samples, cfg)
    return frame_count(n_samples + left + right, cfg), cfg.n_freqs


def stft(w: Waveform, cfg: AnalysisConfig) -> np.ndarray:
    """Complex STFT of the zero-padded signal, shape :func:`stft_shape`."""
    left, right = _padding(len(w), cfg)
    x = np.pad(w.samples, (left, right))
    return np.fft.rfft(_frames(x, cfg) * hann_window(cfg.win_length), axis=1)


def istft(spec: np.ndarray, n_samples: int, cfg: AnalysisConfig) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`, trimmed to ``n_samples``."""
    win = hann_window(cfg.win_length)
    left, right = _padding(n_samples, cfg)
    total = n_samples + left + right
    frames = np.fft.irfft(spec, n=cfg.win_length, axis=1) * win
    out = np.zeros(total)
    norm = np.zeros(total)
    hop = cfg.hop_length
    for t in range(frames.shape[0]):
        out[t * hop : t * hop + cfg.win_length] += frames[t]
        norm[t * hop : t * hop + cfg.win_length] += win * win
    nz = norm > 1e-12
    out[nz] /= norm[nz]
    return out[left : left + n_samples]


def apply_mask_resynth(w: Waveform, mask, cfg: AnalysisConfig) -> Waveform:
    """Multiply the STFT of ``w`` by ``mask`` and resynthesize.

    ``mask`` may be a full ``(frames, bins)`` matrix or a single ``(bins,)``
    vector applied to every frame.
    """
    m = np.asarray(mask, dtype=np.float64)
    shape = stft_shape(len(w), cfg)
    if m.ndim == 1:
        if m.shape[0] != shape[1]:
            raise ShapeMismatch(f"mask has {m.shape[0]} bins, STFT has {shape[1]}")
    elif m.shape != shape:
        raise ShapeMismatch(f"mask shape {m.shape} != STFT shape {shape}")
    if np.any(m < 0) or np.any(m > 1):
        raise ValueError("mask values must lie in [0, 1]")
    if len(w) == 0:
        return w
    return w.with_samples(istft(stft(w, cfg) * m, len(w), cfg))


# --- WAV I/O --------------------------------------------------------------


def resample_linear(w: Waveform, rate: int) -> Waveform:
    if rate == w.sample_rate or len(w) == 0:
        return Waveform(w.samples, rate)
    n_out = int(round(len(w) * rate / w.sample_rate))
    t_out = np.arange(n_out) / rate
    t_in = np.arange(len(w)) / w.sample_rate
    return Waveform(np.interp(t_out, t_in, w.samples), rate)


def read_wav(path: str | Path) -> Waveform:
    rate, data = wavfile.read(str(path))
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        warnings.warn(f"{path}: downmixing {x.shape[1]} channels to mono", stacklevel=2)
        x = x.mean(axis=1)
    return Waveform(x, rate)


def write_wav(path: str | Path, w: Waveform, subtype: str = "PCM_16") -> float:
    """Write ``w`` to disk, scaling down if it would clip. Returns the applied gain."""
    peak = float(np.max(np.abs(w.samples))) if len(w) else 0.0
    gain = 1.0 if peak <= 1.0 else 1.0 / peak
    x = w.samples * gain
    if subtype == "PCM_16":
        data = np.clip(np.round(x * 32767.0), -32768, 32767).astype(np.int16)
    elif subtype == "FLOAT":
        data = x.astype(np.float32)
    else:
        raise ValueError(f"unsupported subtype {subtype!r}")
    wavfile.write(str(path), w.sample_rate, data)
    if gain != 1.0:
        log.info("%s: normalized with gain %.6f", path, gain)
    return gain
