import json
from pathlib import Path

import pytest

from noisysed.config import CONDITIONS, DEFAULTS, SCHEMA, ExperimentConfig, validate_config, validate_document
from noisysed.errors import ConfigError


def write(tmp_path, doc, name="exp.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def test_defaults_are_valid():
    assert validate_document(DEFAULTS) == []
    cfg = ExperimentConfig.default()
    assert cfg.conditions == CONDITIONS
    assert cfg.curriculum.total_epochs == 10
    assert cfg.psds_params(2).alpha_ct == 0.5


def test_minimal_document_gets_defaults():
    cfg = ExperimentConfig.from_document({"seed": 3, "snr_conditions": [10, 5, 0, -5], "variants": ["#1"]})
    assert cfg.seed == 3 and cfg.variants == ("#1",)
    assert cfg.doc["sed"]["context_frames"] == 15


def test_missing_condition_is_one_diagnostic():
    doc = {**DEFAULTS, "snr_conditions": [10, 5, 0]}
    diags = validate_document(doc)
    assert len(diags) == 1
    assert diags[0].startswith("$.snr_conditions") and "-5" in diags[0]


def test_bad_e_max():
    doc = json.loads(json.dumps(DEFAULTS))
    doc["psds"]["scenario1"]["e_max"] = -1
    diags = validate_document(doc)
    assert len(diags) == 1 and diags[0].startswith("$.psds.scenario1.e_max")


def test_every_problem_reported():
    doc = {**DEFAULTS, "seed": -1, "variants": ["#9"], "final_model": "gamma", "bogus": 1}
    diags = validate_document(doc)
    paths = sorted(d.split(":")[0] for d in diags)
    assert paths == ["$", "$.final_model", "$.seed", "$.variants[0]"]


def test_bad_curriculum():
    doc = {**DEFAULTS, "curriculum": {"total_epochs": 2, "clean_epochs": 5}}
    assert any(d.startswith("$.curriculum") for d in validate_document(doc))


def test_file_references(tmp_path):
    doc = {**DEFAULTS, "ontology": "onto.json", "scenes": {"test": {"manifest": "t.json"}}}
    p = write(tmp_path, doc)
    diags = validate_config(p)
    assert sorted(d.split(":")[0] for d in diags) == ["$.ontology", "$.scenes.test.manifest"]
    (tmp_path / "onto.json").write_text("{}")
    (tmp_path / "t.json").write_text("{}")
    assert validate_config(p) == []


def test_scene_source_needs_exactly_one_of_count_or_manifest():
    doc = {**DEFAULTS, "scenes": {"test": {"count": 3, "manifest": "x.json"}}}
    assert validate_document(doc)


def test_validate_config_io(tmp_path):
    with pytest.raises(OSError):
        validate_config(tmp_path / "absent.json")
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert validate_config(bad)[0].startswith("$: not valid JSON")


def test_load_rejects_invalid(tmp_path):
    p = write(tmp_path, {"seed": 0})
    with pytest.raises(ConfigError, match="snr_conditions"):
        ExperimentConfig.load(p)


def test_load_and_overrides(tmp_path):
    p = write(tmp_path, {"seed": 1, "snr_conditions": [10, 5, 0, -5], "variants": ["#7", "#1"], "final_model": "alpha"})
    cfg = ExperimentConfig.load(p)
    assert cfg.variants == ("#1", "#7")
    assert cfg.doc["final_model"] == "alpha"
    assert cfg.base_dir == tmp_path
    assert cfg.with_overrides(seed=5, variants=None).seed == 5
    with pytest.raises(ConfigError):
        cfg.with_overrides(seed=-2)


def test_round_trip_json():
    cfg = ExperimentConfig.default(seed=4)
    again = ExperimentConfig.from_document(json.loads(cfg.to_json()))
    assert again.doc == cfg.doc


def test_schema_is_closed():
    assert SCHEMA["additionalProperties"] is False


def test_shipped_schema_and_defaults_are_current():
    docs = Path(__file__).parent.parent / "docs"
    assert json.loads((docs / "config.schema.json").read_text()) == SCHEMA
    assert json.loads((docs / "default_config.json").read_text()) == DEFAULTS
    assert validate_config(docs / "default_config.json") == []
