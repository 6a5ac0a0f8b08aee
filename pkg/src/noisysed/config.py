"""Experiment configuration: JSON document, schema and validation."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass
from pathlib import Path

import jsonschema

from .audio import AnalysisConfig
from .augment import CurriculumSchedule
from .errors import ConfigError
from .psds import SCENARIO_1, SCENARIO_2, PsdsParams
from .separation import VARIANTS

SNR_CONDITIONS = (10, 5, 0, -5)
CONDITIONS = ("clean",) + tuple(f"snr{s}" for s in SNR_CONDITIONS)


def condition_name(snr_db) -> str:
    return "clean" if snr_db is None else f"snr{int(snr_db)}"


_PSDS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "rho_dtc": {"type": "number", "minimum": 0, "maximum": 1},
        "rho_gtc": {"type": "number", "minimum": 0, "maximum": 1},
        "rho_cttc": {"type": "number", "minimum": 0, "maximum": 1},
        "alpha_ct": {"type": "number", "minimum": 0},
        "alpha_st": {"type": "number", "minimum": 0},
        "e_max": {"type": "number", "exclusiveMinimum": 0},
    },
}

_SCENE_SOURCE = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "count": {"type": "integer", "minimum": 1},
        "manifest": {"type": "string"},
    },
    "oneOf": [{"required": ["count"]}, {"required": ["manifest"]}],
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "noisysed experiment",
    "type": "object",
    "additionalProperties": False,
    "required": ["seed", "snr_conditions", "variants"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "ontology": {"type": ["string", "null"]},
        "scenes": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "calibrate": _SCENE_SOURCE,
                "test": _SCENE_SOURCE,
                "noisy_manifests": {
                    "type": "object",
                    "additionalProperties": {"type": "string"},
                },
                "clip_duration": {"type": "number", "exclusiveMinimum": 0},
                "max_events": {"type": "integer", "minimum": 1},
            },
        },
        "snr_conditions": {
            "type": "array",
            "items": {"type": "number"},
            "uniqueItems": True,
        },
        "conditions": {
            "type": "array",
            "items": {"enum": list(CONDITIONS)},
            "uniqueItems": True,
            "minItems": 1,
        },
        "curriculum": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "total_epochs": {"type": "integer", "minimum": 1},
                "clean_epochs": {"type": "integer", "minimum": 0},
                "snr_start_db": {"type": "number"},
                "snr_end_db": {"type": "number"},
            },
        },
        "variants": {
            "type": "array",
            "items": {"enum": list(VARIANTS)},
            "uniqueItems": True,
            "minItems": 1,
        },
        "analysis": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "sample_rate": {"type": "integer", "minimum": 1},
                "win_length": {"type": "integer", "minimum": 2},
                "hop_length": {"type": "integer", "minimum": 1},
                "n_mels": {"type": "integer", "minimum": 1},
                "fmin": {"type": "number", "minimum": 0},
                "fmax": {"type": ["number", "null"]},
            },
        },
        "sed": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "context_frames": {"type": "integer", "minimum": 1},
                "pooling": {"enum": ["max", "linear-softmax"]},
                "miss_cost": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "query_threshold": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "final_model": {"enum": ["theta", "alpha"]},
        "psds": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "scenario1": _PSDS_SCHEMA,
                "scenario2": _PSDS_SCHEMA,
                "n_thresholds": {"type": "integer", "minimum": 1},
                "median_frames": {"type": "integer", "minimum": 1},
            },
        },
        "noise_clips_per_class": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 0},
        "llm": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "attempts": {"type": "integer", "minimum": 1},
                "backoff_seconds": {"type": "number", "minimum": 0},
                "timeout_seconds": {"type": "number", "exclusiveMinimum": 0},
                "cache": {"type": ["string", "null"]},
            },
        },
        "output_dir": {"type": "string"},
    },
}

DEFAULTS = {
    "seed": 0,
    "ontology": None,
    "scenes": {"calibrate": {"count": 60}, "test": {"count": 40}, "clip_duration": 10.0, "max_events": 3},
    "snr_conditions": list(SNR_CONDITIONS),
    "conditions": list(CONDITIONS),
    "curriculum": {"total_epochs": 10, "clean_epochs": 1, "snr_start_db": 10.0, "snr_end_db": -10.0},
    "variants": list(VARIANTS),
    "analysis": AnalysisConfig().to_dict(),
    "sed": {"context_frames": 15, "pooling": "max", "miss_cost": 2.0},
    "query_threshold": 0.5,
    "final_model": "theta",
    "psds": {
        "scenario1": SCENARIO_1.to_dict(),
        "scenario2": SCENARIO_2.to_dict(),
        "n_thresholds": 50,
        "median_frames": 7,
    },
    "noise_clips_per_class": 4,
    "workers": 0,
    "llm": {"attempts": 3, "backoff_seconds": 0.5, "timeout_seconds": 30.0, "cache": None},
    "output_dir": "runs/default",
}


def _path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


def _semantic_checks(doc: dict, base: Path | None) -> list[str]:
    diags = []
    snrs = doc.get("snr_conditions")
    if isinstance(snrs, list) and all(isinstance(s, (int, float)) for s in snrs):
        missing = [s for s in SNR_CONDITIONS if s not in snrs]
        extra = [s for s in snrs if s not in SNR_CONDITIONS]
        if missing:
            diags.append(f"$.snr_conditions: missing SNR condition(s) {missing}; expected {list(SNR_CONDITIONS)}")
        if extra:
            diags.append(f"$.snr_conditions: unsupported SNR condition(s) {extra}; expected {list(SNR_CONDITIONS)}")
    cur = doc.get("curriculum")
    if isinstance(cur, dict):
        merged = {**DEFAULTS["curriculum"], **cur}
        try:
            CurriculumSchedule(**merged)
        except (TypeError, ValueError) as exc:
            diags.append(f"$.curriculum: {exc}")
    if base is not None:
        refs = []
        if isinstance(doc.get("ontology"), str):
            refs.append(("$.ontology", doc["ontology"]))
        scenes = doc.get("scenes") if isinstance(doc.get("scenes"), dict) else {}
        for key in ("calibrate", "test"):
            src = scenes.get(key)
            if isinstance(src, dict) and isinstance(src.get("manifest"), str):
                refs.append((f"$.scenes.{key}.manifest", src["manifest"]))
        noisy = scenes.get("noisy_manifests")
        if isinstance(noisy, dict):
            for k, v in noisy.items():
                if k not in CONDITIONS[1:]:
                    diags.append(f"$.scenes.noisy_manifests.{k}: unknown condition; expected one of {list(CONDITIONS[1:])}")
                if isinstance(v, str):
                    refs.append((f"$.scenes.noisy_manifests.{k}", v))
        for where, rel in refs:
            if not (base / rel).is_file():
                diags.append(f"{where}: referenced file {rel!r} does not exist")
    return diags


def validate_document(doc, base: Path | None = None) -> list[str]:
    """Every schema violation and semantic problem in ``doc``, each prefixed by its field path."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    diags = [f"{_path(e.absolute_path)}: {e.message}" for e in errors]
    if isinstance(doc, dict):
        diags += _semantic_checks(doc, base)
    return diags


def validate_config(path) -> list[str]:
    """Diagnostics for the config file at ``path``; an empty list means valid.

    Raises OSError if the file cannot be read.
    """
    path = Path(path)
    text = path.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        return [f"$: not valid JSON ({exc})"]
    return validate_document(doc, path.parent)


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k not in ("calibrate", "test"):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    """A validated config document with defaults filled in."""

    doc: dict
    base_dir: Path

    @classmethod
    def from_document(cls, doc: dict, base_dir=".") -> "ExperimentConfig":
        diags = validate_document(doc, Path(base_dir))
        if diags:
            raise ConfigError("invalid config:\n  " + "\n  ".join(diags))
        return cls(_merge(DEFAULTS, doc), Path(base_dir))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        diags = validate_config(path)
        if diags:
            raise ConfigError(f"invalid config {path}:\n  " + "\n  ".join(diags))
        return cls(_merge(DEFAULTS, json.loads(path.read_text())), path.parent)

    @classmethod
    def default(cls, **overrides) -> "ExperimentConfig":
        return cls.from_document({**DEFAULTS, **overrides})

    def resolve(self, rel: str) -> Path:
        return self.base_dir / rel

    @property
    def seed(self) -> int:
        return self.doc["seed"]

    @property
    def variants(self) -> tuple[str, ...]:
        order = list(VARIANTS)
        return tuple(sorted(self.doc["variants"], key=order.index))

    @property
    def conditions(self) -> tuple[str, ...]:
        return tuple(c for c in CONDITIONS if c in self.doc["conditions"])

    @property
    def analysis(self) -> AnalysisConfig:
        return AnalysisConfig.from_dict(self.doc["analysis"])

    @property
    def curriculum(self) -> CurriculumSchedule:
        return CurriculumSchedule(**self.doc["curriculum"])

    def psds_params(self, scenario: int) -> PsdsParams:
        base = SCENARIO_1 if scenario == 1 else SCENARIO_2
        return PsdsParams(**{**base.to_dict(), **self.doc["psds"][f"scenario{scenario}"]})

    def with_overrides(self, **kw) -> "ExperimentConfig":
        """Copy with top-level fields replaced, re-validated."""
        doc = {**self.doc, **{k: v for k, v in kw.items() if v is not None}}
        return ExperimentConfig.from_document(doc, self.base_dir)

    def to_json(self) -> str:
        return json.dumps(self.doc, indent=2, sort_keys=True)
