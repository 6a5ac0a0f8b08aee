"""Synthetic stand-ins for DESED clips, a noise-event pool and noisy test sets.

Every event class is rendered from a band-limited prototype, so class
identity is carried by where the energy sits on the mel axis. Noise classes
that belong to a target class's similarity group occupy a band that
overlaps the target's band; the other noise groups sit in the gaps.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, Waveform, hz_to_mel, mel_to_hz, mix_at_snr
from .errors import UnknownClass
from .events import ClassOntology, EventInstance, Timeline, serialize_strong_tsv

SYNTH_KINDS = ("tone", "chirp", "band_noise", "tone_cluster")
FADE_SECONDS = 0.010


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from a mix of ints and strings."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.append(zlib.crc32(p.encode("utf-8")))
        else:
            words.append(int(p) & 0xFFFFFFFF)
    return int(np.random.SeedSequence(words).generate_state(2, np.uint32).view(np.uint64)[0] >> 1)


@dataclass(frozen=True)
class EventPrototype:
    class_name: str
    synth_kind: str
    band: tuple[float, float]
    base_amplitude: float = 0.5

    def __post_init__(self):
        if self.synth_kind not in SYNTH_KINDS:
            raise ValueError(f"unknown synth kind {self.synth_kind!r}")
        lo, hi = self.band
        if not 0 < lo < hi:
            raise ValueError(f"bad band {self.band}")

    @property
    def center(self) -> float:
        lo, hi = self.band
        return float(mel_to_hz((hz_to_mel(lo) + hz_to_mel(hi)) / 2))

    def to_dict(self) -> dict:
        return {
            "class_name": self.class_name,
            "synth_kind": self.synth_kind,
            "band": list(self.band),
            "base_amplitude": self.base_amplitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EventPrototype":
        return cls(d["class_name"], d["synth_kind"], tuple(d["band"]), d["base_amplitude"])


@dataclass(frozen=True)
class SceneSpec:
    clip_id: str
    clip_duration: float
    events: tuple[tuple[str, float, float, float], ...] = ()  # (class, onset, duration, gain)
    seed: int = 0

    def __post_init__(self):
        evs = tuple((str(c), float(o), float(d), float(g)) for c, o, d, g in self.events)
        object.__setattr__(self, "events", evs)
        for c, onset, dur, gain in evs:
            if onset < 0 or dur <= 0 or onset + dur > self.clip_duration + 1e-9:
                raise ValueError(f"{self.clip_id}: event {c} outside clip bounds")
            if gain <= 0:
                raise ValueError(f"{self.clip_id}: event gain must be positive")

    def timeline(self) -> Timeline:
        evs = [EventInstance(c, round(o, 3), round(o + d, 3)) for c, o, d, _ in self.events]
        return Timeline(self.clip_id, self.clip_duration, tuple(evs))

    def to_dict(self) -> dict:
        return {
            "clip_id": self.clip_id,
            "clip_duration": self.clip_duration,
            "events": [list(e) for e in self.events],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(d["clip_id"], d["clip_duration"], tuple(tuple(e) for e in d["events"]), d["seed"])


def _fade(x: np.ndarray, sr: int) -> np.ndarray:
    n = x.shape[0]
    k = int(round(FADE_SECONDS * sr))
    env = np.ones(n)
    k = min(k, n // 2)
    if k > 0:
        ramp = 0.5 - 0.5 * np.cos(np.pi * (np.arange(k) + 0.5) / k)
        env[:k] = ramp
        env[n - k :] = np.minimum(env[n - k :], ramp[::-1])
    return x * env


def _band_noise(n: int, band, sr: int, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    return np.fft.irfft(spec, n=n)


def render_event(
    p: EventPrototype, duration: float, seed: int = 0, sample_rate: int = DEFAULT_SAMPLE_RATE
) -> Waveform:
    """Render one event of ``duration`` seconds, RMS-matched to a sine of ``base_amplitude``."""
    if duration <= 0:
        raise ValueError("duration must be positive")
    if p.band[1] >= sample_rate / 2:
        raise ValueError(f"{p.class_name}: band exceeds Nyquist")
    n = max(1, int(round(duration * sample_rate)))
    t = np.arange(n) / sample_rate
    rng = np.random.default_rng(seed)
    lo, hi = p.band
    if p.synth_kind == "tone":
        x = np.sin(2 * np.pi * round(p.center) * t + rng.uniform(0, 2 * np.pi))
    elif p.synth_kind == "chirp":
        # sweep up and down through the inner 80% of the band, period 1 s
        a, b = lo + 0.1 * (hi - lo), hi - 0.1 * (hi - lo)
        phase0 = rng.uniform(0, 2 * np.pi)
        tri = np.abs(((t + rng.uniform(0, 1)) % 1.0) * 2 - 1)
        inst = a + (b - a) * tri
        x = np.sin(phase0 + 2 * np.pi * np.cumsum(inst) / sample_rate)
    elif p.synth_kind == "band_noise":
        x = _band_noise(n, p.band, sample_rate, rng)
    else:  # tone_cluster
        fs = mel_to_hz(np.linspace(hz_to_mel(lo), hz_to_mel(hi), 5)[1:-1])
        x = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) for f in fs)
    rms = np.sqrt(np.mean(x * x))
    if rms > 0:
        x = x * (p.base_amplitude / np.sqrt(2) / rms)
    return Waveform(_fade(x, sample_rate), sample_rate)


def compose_scene(
    spec: SceneSpec, protos: dict[str, EventPrototype], sample_rate: int = DEFAULT_SAMPLE_RATE
) -> tuple[Waveform, Timeline]:
    n = int(round(spec.clip_duration * sample_rate))
    bed = np.zeros(n)
    for i, (name, onset, dur, gain) in enumerate(spec.events):
        if name not in protos:
            raise UnknownClass(name)
        ev = render_event(protos[name], dur, derive_seed(spec.seed, i, name), sample_rate)
        start = int(round(onset * sample_rate))
        seg = ev.samples[: max(0, n - start)]
        bed[start : start + seg.shape[0]] += gain * seg
    return Waveform(bed, sample_rate), spec.timeline()


def render_noise_bed(
    n_samples: int,
    noise_events,
    protos: dict[str, EventPrototype],
    sample_rate: int = DEFAULT_SAMPLE_RATE,
) -> Waveform:
    """Sum of stationary noise events, each rendered over the whole clip."""
    bed = np.zeros(n_samples)
    for name, gain, seed in noise_events:
        if name not in protos:
            raise UnknownClass(name)
        bed += gain * render_event(protos[name], n_samples / sample_rate, seed, sample_rate).samples[:n_samples]
    return Waveform(bed, sample_rate)


def make_noisy_clip(
    clean: Waveform, noise_events, snr_db: float, protos: dict[str, EventPrototype]
) -> Waveform:
    """Add a bed of noise events to ``clean`` at ``snr_db`` (per-mixture SNR)."""
    noise_events = list(noise_events)
    if not noise_events:
        raise ValueError("need at least one noise event")
    if not np.isfinite(snr_db):
        raise ValueError("snr_db must be finite")
    bed = render_noise_bed(len(clean), noise_events, protos, clean.sample_rate)
    return mix_at_snr(clean, bed, snr_db)


# --- fixture world --------------------------------------------------------

TARGET_CLASSES = (
    "alarm_bell_ringing",
    "blender",
    "cat",
    "dishes",
    "dog",
    "electric_shaver_toothbrush",
    "frying",
    "running_water",
    "speech",
    "vacuum_cleaner",
)

# group -> (member noise classes, the target class it resembles or None)
NOISE_GROUPS: dict[str, tuple[tuple[str, ...], str | None]] = {
    "voice": (("conversation", "laughter", "singing"), "speech"),
    "canine": (("howl", "growl", "yip"), "dog"),
    "feline": (("purr", "baby_cry", "bird_chirp"), "cat"),
    "motor": (("hair_dryer", "drill", "leaf_blower"), "blender"),
    "water": (("toilet_flush", "shower", "waterfall"), "running_water"),
    "clatter": (("cutlery", "glass_clink", "footsteps_gravel"), "dishes"),
    "ringing": (("telephone", "doorbell", "siren"), "alarm_bell_ringing"),
    "weather": (("rain", "wind", "thunder"), None),
    "music": (("piano", "guitar", "television"), None),
    "traffic": (("car_passing", "engine_idle", "train"), None),
}

OUTDOOR_ONLY = {
    "howl",
    "yip",
    "leaf_blower",
    "waterfall",
    "footsteps_gravel",
    "siren",
    "thunder",
    "wind",
    "car_passing",
    "engine_idle",
    "train",
    "bird_chirp",
}

TARGET_KINDS = {
    "alarm_bell_ringing": "tone",
    "blender": "band_noise",
    "cat": "chirp",
    "dishes": "tone_cluster",
    "dog": "tone_cluster",
    "electric_shaver_toothbrush": "tone_cluster",
    "frying": "band_noise",
    "running_water": "band_noise",
    "speech": "chirp",
    "vacuum_cleaner": "band_noise",
}

# low-to-high order of the 13 mel slots; None entries are noise-only gaps
SLOT_ORDER = (
    "vacuum_cleaner",
    "speech",
    "traffic",
    "dog",
    "blender",
    "music",
    "cat",
    "alarm_bell_ringing",
    "weather",
    "dishes",
    "electric_shaver_toothbrush",
    "running_water",
    "frying",
)
SLOT_RANGE_HZ = (120.0, 7600.0)


def fixture_ontology() -> ClassOntology:
    """10 DESED-like target classes and 30 noise classes in 10 similarity groups."""
    tags: dict[str, set[str]] = {}
    group: dict[str, str] = {}
    noise: list[str] = []
    target_group = {t: f"target:{t}" for t in TARGET_CLASSES}
    for gname, (members, similar_to) in NOISE_GROUPS.items():
        if similar_to is not None:
            target_group[similar_to] = gname
        for m in members:
            noise.append(m)
            group[m] = gname
            tags[m] = {"outdoor"} if m in OUTDOOR_ONLY else {"household"}
    for t in TARGET_CLASSES:
        group[t] = target_group[t]
        tags[t] = {"household"}
    return ClassOntology(TARGET_CLASSES, tuple(noise), tags, group)


def _slots() -> dict[str, tuple[float, float]]:
    m_lo, m_hi = hz_to_mel(SLOT_RANGE_HZ[0]), hz_to_mel(SLOT_RANGE_HZ[1])
    edges = np.linspace(m_lo, m_hi, len(SLOT_ORDER) + 1)
    return {name: (float(edges[i]), float(edges[i + 1])) for i, name in enumerate(SLOT_ORDER)}


def _band(mel_lo: float, mel_hi: float) -> tuple[float, float]:
    return (float(np.round(mel_to_hz(mel_lo), 1)), float(np.round(mel_to_hz(mel_hi), 1)))


def fixture_prototypes() -> dict[str, EventPrototype]:
    """Prototypes for every class of :func:`fixture_ontology`."""
    slots = _slots()
    protos: dict[str, EventPrototype] = {}
    for t in TARGET_CLASSES:
        a, b = slots[t]
        w = b - a
        protos[t] = EventPrototype(t, TARGET_KINDS[t], _band(a + 0.2 * w, b - 0.2 * w), 0.5)
    # noise beds are stationary, so no sweeping prototypes
    kinds = ("band_noise", "tone_cluster", "band_noise")
    for gname, (members, similar_to) in NOISE_GROUPS.items():
        a, b = slots[similar_to if similar_to is not None else gname]
        w = b - a
        if similar_to is not None:
            # similar noise sits on the lower half of the target band, so it resembles
            # the target without being identical to it, even when members are mixed
            spans = ((0.0, 0.4), (0.05, 0.45), (0.1, 0.5))
        else:
            spans = ((0.0, 0.8), (0.1, 0.9), (0.2, 1.0))
        for i, m in enumerate(members):
            lo, hi = spans[i]
            protos[m] = EventPrototype(m, kinds[i], _band(a + lo * w, a + hi * w), 0.5)
    return protos


def random_scene_spec(
    clip_id: str,
    seed: int,
    classes,
    clip_duration: float = 10.0,
    max_events: int = 3,
    min_dur: float = 0.5,
    max_dur: float = 3.0,
    force_class: str | None = None,
) -> SceneSpec:
    """Draw 1..max_events target events; same-class events never overlap."""
    rng = np.random.default_rng(seed)
    classes = list(classes)
    n_events = int(rng.integers(1, max_events + 1))
    events: list[tuple[str, float, float, float]] = []
    for k in range(n_events):
        name = force_class if (k == 0 and force_class) else classes[int(rng.integers(len(classes)))]
        for _ in range(20):
            dur = float(np.round(rng.uniform(min_dur, max_dur), 3))
            onset = float(np.round(rng.uniform(0, clip_duration - dur), 3))
            clash = any(
                c == name and onset < o + d and o < onset + dur for c, o, d, _ in events
            )
            if not clash:
                gain = float(np.round(rng.uniform(0.5, 1.0), 3))
                events.append((name, onset, dur, gain))
                break
    return SceneSpec(clip_id, clip_duration, tuple(events), seed)


@dataclass
class SceneSet:
    """A manifest of scenes plus optional per-scene noise recipes."""

    seed: int
    scenes: list[SceneSpec]
    sample_rate: int = DEFAULT_SAMPLE_RATE
    noise: dict[str, dict] = field(default_factory=dict)  # clip_id -> {"events", "snr_db"}

    def to_json(self) -> str:
        d = {
            "seed": self.seed,
            "sample_rate": self.sample_rate,
            "scenes": [s.to_dict() for s in self.scenes],
            "noise": self.noise,
        }
        return json.dumps(d, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSet":
        d = json.loads(text)
        noise = {
            k: {"events": [tuple(e) for e in v["events"]], "snr_db": v["snr_db"]}
            for k, v in d.get("noise", {}).items()
        }
        return cls(
            d["seed"],
            [SceneSpec.from_dict(s) for s in d["scenes"]],
            d.get("sample_rate", DEFAULT_SAMPLE_RATE),
            noise,
        )

    def render(self, protos: dict[str, EventPrototype], sc) -> tuple[Waveform, Timeline]:
        wav, tl = compose_scene(sc, protos, self.sample_rate)
        recipe = self.noise.get(sc.clip_id)
        if recipe:
            wav = make_noisy_clip(wav, recipe["events"], recipe["snr_db"], protos)
        return wav, tl

    def write(self, out_dir: str | Path, protos: dict[str, EventPrototype]) -> Path:
        """Emit ``audio/<clip>.wav`` and ``metadata.tsv`` in a DESED-like layout."""
        from .audio import write_wav

        out = Path(out_dir)
        (out / "audio").mkdir(parents=True, exist_ok=True)
        timelines = []
        for sc in self.scenes:
            wav, tl = self.render(protos, sc)
            write_wav(out / "audio" / f"{sc.clip_id}.wav", wav)
            timelines.append(Timeline(f"{sc.clip_id}.wav", tl.clip_duration, tl.events))
        (out / "metadata.tsv").write_text(serialize_strong_tsv(timelines))
        return out
