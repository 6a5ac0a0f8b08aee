"""Noise-class selection, curriculum SNR schedule and clip augmentation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .audio import Waveform
from .errors import BadEpoch, UnknownTag
from .events import ClassOntology, WeakLabel
from .llm import LlmClient, TransportError
from .scenes import EventPrototype, derive_seed, make_noisy_clip

log = logging.getLogger(__name__)

PROMPT_TEMPLATE = (
    "This is an audio clip recorded in a {environment} environment. "
    "The following events present this clip: {events}.\n"
    "Please help me select the event classes in {candidates} that may occur in the audio clip.\n"
    "Further, apply filtering to ensure that the selected classes do not have any classes "
    "similar to those already present in the audio clip."
)


def build_prompt(
    present: WeakLabel,
    ontology: ClassOntology,
    environment: str = "household",
    candidates=None,
) -> str:
    """Render the noise-selection prompt for one clip.

    ``candidates`` defaults to the target-class list, rendered in brackets.
    """
    events = ", ".join(present.present) if present.present else "none"
    cands = ontology.target_classes if candidates is None else tuple(candidates)
    return PROMPT_TEMPLATE.format(
        environment=environment, events=events, candidates="[" + ", ".join(cands) + "]"
    )


def select_noise_rulebased(
    present: WeakLabel, ontology: ClassOntology, env_tag: str = "household"
) -> frozenset[str]:
    """Noise classes tagged ``env_tag`` whose group differs from every present class's group."""
    if env_tag not in ontology.all_tags:
        raise UnknownTag(env_tag)
    blocked = {ontology.similarity_group[a] for a in present.present}
    return frozenset(
        c
        for c in ontology.noise_classes
        if env_tag in ontology.tags[c] and ontology.similarity_group[c] not in blocked
    )


@dataclass(frozen=True)
class Selection:
    classes: frozenset[str]
    source: str  # "llm" | "fallback" | "rule" | "random"


def select_noise_llm(
    prompt: str,
    client: LlmClient,
    ontology: ClassOntology,
    fallback=None,
) -> Selection:
    """Ask the LLM for noise classes; fall back to ``fallback()`` if it cannot answer.

    Names outside ``ontology.noise_classes`` are dropped with a warning.
    """
    hit = client.cached(prompt)
    if hit is not None:
        return Selection(frozenset(hit["classes"]), hit["source"])
    try:
        names = client.query(prompt)
    except TransportError as exc:
        if fallback is None:
            raise
        log.warning("LLM selection failed, using rule-based fallback: %s", exc)
        chosen = frozenset(fallback())
        client.remember(prompt, chosen, "fallback")
        return Selection(chosen, "fallback")
    vocab = set(ontology.noise_classes)
    unknown = [n for n in names if n not in vocab]
    if unknown:
        log.warning("dropping out-of-vocabulary classes from LLM reply: %s", unknown)
    chosen = frozenset(n for n in names if n in vocab)
    client.remember(prompt, chosen, "llm")
    return Selection(chosen, "llm")


class RuleSelector:
    source = "rule"

    def __init__(self, ontology: ClassOntology, env_tag: str = "household"):
        self.ontology = ontology
        self.env_tag = env_tag

    def __call__(self, present: WeakLabel) -> Selection:
        return Selection(select_noise_rulebased(present, self.ontology, self.env_tag), "rule")


class RandomSelector:
    """Every noise class is a candidate, regardless of environment or similarity."""

    def __init__(self, ontology: ClassOntology):
        self.ontology = ontology

    def __call__(self, present: WeakLabel) -> Selection:
        return Selection(frozenset(self.ontology.noise_classes), "random")


class LlmSelector:
    def __init__(self, ontology: ClassOntology, client: LlmClient, env_tag: str = "household"):
        self.ontology = ontology
        self.client = client
        self.env_tag = env_tag

    def __call__(self, present: WeakLabel) -> Selection:
        prompt = build_prompt(present, self.ontology, self.env_tag)
        return select_noise_llm(
            prompt,
            self.client,
            self.ontology,
            fallback=lambda: select_noise_rulebased(present, self.ontology, self.env_tag),
        )


# --- curriculum -----------------------------------------------------------


@dataclass(frozen=True)
class CurriculumSchedule:
    total_epochs: int = 200
    clean_epochs: int = 20
    snr_start_db: float = 10.0
    snr_end_db: float = -10.0

    def __post_init__(self):
        if not 0 <= self.clean_epochs < self.total_epochs:
            raise ValueError("need 0 <= clean_epochs < total_epochs")
        if not self.snr_start_db > self.snr_end_db:
            raise ValueError("curriculum must go from high SNR to low SNR")

    @classmethod
    def with_clean_fraction(cls, total_epochs: int, fraction: float = 0.1, **kw):
        return cls(total_epochs, int(round(fraction * total_epochs)), **kw)


def curriculum_snr(epoch: int, sched: CurriculumSchedule) -> float | None:
    """SNR for ``epoch``, or None during the initial clean phase."""
    if not 0 <= epoch < sched.total_epochs:
        raise BadEpoch(f"epoch {epoch} outside [0, {sched.total_epochs})")
    if epoch < sched.clean_epochs:
        return None
    span = sched.total_epochs - 1 - sched.clean_epochs
    if span == 0:
        return sched.snr_end_db
    frac = (epoch - sched.clean_epochs) / span
    return sched.snr_start_db + (sched.snr_end_db - sched.snr_start_db) * frac


# --- augmentation ---------------------------------------------------------


@dataclass(frozen=True)
class NoiseClipRef:
    class_name: str
    seed: int
    gain: float = 1.0


@dataclass
class NoisePool:
    ontology: ClassOntology
    clips: dict[str, list[NoiseClipRef]] = field(default_factory=dict)

    def __post_init__(self):
        for c in self.ontology.noise_classes:
            if not self.clips.get(c):
                raise ValueError(f"noise class {c!r} has no clip in the pool")

    @classmethod
    def synthetic(cls, ontology: ClassOntology, seed: int, clips_per_class: int = 4) -> "NoisePool":
        rng = np.random.default_rng(derive_seed(seed, "noise-pool"))
        clips = {
            c: [
                NoiseClipRef(c, derive_seed(seed, c, k), float(np.round(rng.uniform(0.5, 1.0), 3)))
                for k in range(clips_per_class)
            ]
            for c in ontology.noise_classes
        }
        return cls(ontology, clips)


def draw_noise_events(selected, pool: NoisePool, seed: int, max_classes: int = 3):
    """Pick 1..max_classes of ``selected`` and one pool clip for each."""
    rng = np.random.default_rng(seed)
    names = sorted(selected)
    k = int(rng.integers(1, min(max_classes, len(names)) + 1))
    picks = sorted(rng.choice(len(names), size=k, replace=False).tolist())
    events = []
    for i in picks:
        refs = pool.clips[names[i]]
        ref = refs[int(rng.integers(len(refs)))]
        events.append((ref.class_name, ref.gain, ref.seed))
    return events


def augment_clip(
    clean: Waveform,
    present: WeakLabel,
    pool: NoisePool,
    selector,
    snr_db: float | None,
    seed: int,
    protos: dict[str, EventPrototype],
) -> tuple[Waveform, dict]:
    """Add selected noise to ``clean`` at ``snr_db``; returns the clip and its provenance.

    ``snr_db=None`` (curriculum clean phase) or an empty selection passes the
    clip through unchanged. The provenance record replays the mix exactly via
    :func:`replay_augmentation`.
    """
    record = {"clip_id": present.clip_id, "seed": seed, "snr_db": snr_db}
    if snr_db is None:
        return clean, {**record, "skipped": "clean-phase", "noise_events": []}
    sel = selector(present)
    record["selector_source"] = sel.source
    if not sel.classes:
        return clean, {**record, "skipped": "empty-selection", "noise_events": []}
    events = draw_noise_events(sel.classes, pool, seed)
    noisy = make_noisy_clip(clean, events, snr_db, protos)
    return noisy, {**record, "skipped": None, "noise_events": [list(e) for e in events]}


def replay_augmentation(clean: Waveform, record: dict, protos) -> Waveform:
    if not record["noise_events"]:
        return clean
    events = [tuple(e) for e in record["noise_events"]]
    return make_noisy_clip(clean, events, record["snr_db"], protos)
