"""End-to-end experiment: fixture world, model calibration, systems #1-#7, reports."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import mel_spectrogram
from .augment import (
    LlmSelector,
    NoisePool,
    RandomSelector,
    RuleSelector,
    augment_clip,
    curriculum_snr,
    draw_noise_events,
    select_noise_rulebased,
)
from .config import CONDITIONS, ExperimentConfig
from .events import ClassOntology, weak_from_strong
from .llm import ENDPOINT_ENV, LlmClient, LlmClientConfig
from .models import (
    LassModelHandle,
    SedModelHandle,
    calibrate_reference_sed,
    finetune_reference_sed,
    reference_lass,
    save_model,
)
from .psds import detections_from_grids, macro_recall, psds
from .report import aggregate_report, render_tsv, row_to_dict
from .scenes import (
    SceneSet,
    compose_scene,
    derive_seed,
    fixture_ontology,
    fixture_prototypes,
    random_scene_spec,
)
from .separation import QUERY_MODEL, VARIANTS, PipelineConfig, system_variant

log = logging.getLogger(__name__)

SED_BACKEND_ENV = "SED_BACKEND"
LASS_BACKEND_ENV = "LASS_BACKEND"
REPORT_FILES = ("report.tsv", "report.json", "table1.svg", "recall.svg")
PARTIAL_MARKER = "PARTIAL"

# which selector and SNR policy each fine-tuned query model is calibrated with
FINETUNE_RECIPES = {
    "alpha": ("rule", "curriculum"),
    "alpha_random_selection": ("random", "curriculum"),
    "alpha_random_snr": ("rule", "uniform"),
}


@dataclass
class World:
    ontology: ClassOntology
    protos: dict
    pool: NoisePool


def build_world(cfg: ExperimentConfig) -> World:
    ontology = fixture_ontology()
    if cfg.doc.get("ontology"):
        ontology = ClassOntology.from_dict(json.loads(cfg.resolve(cfg.doc["ontology"]).read_text()))
    protos = fixture_prototypes()
    missing = [c for c in ontology.target_classes + ontology.noise_classes if c not in protos]
    if missing:
        raise ValueError(f"no synthesis prototype for classes {missing}")
    pool = NoisePool.synthetic(ontology, cfg.seed, cfg.doc["noise_clips_per_class"])
    return World(ontology, protos, pool)


def scene_set(cfg: ExperimentConfig, world: World, role: str) -> SceneSet:
    """Calibration or test scenes, from a manifest or synthesized from the seed."""
    src = cfg.doc["scenes"][role]
    if "manifest" in src:
        return SceneSet.from_json(cfg.resolve(src["manifest"]).read_text())
    targets = world.ontology.target_classes
    scenes = []
    for i in range(src["count"]):
        # calibration cycles through the classes so every template gets examples
        force = targets[i % len(targets)] if role == "calibrate" else None
        scenes.append(
            random_scene_spec(
                f"{role}{i:04d}",
                derive_seed(cfg.seed, role, i),
                targets,
                cfg.doc["scenes"]["clip_duration"],
                cfg.doc["scenes"]["max_events"],
                force_class=force,
            )
        )
    return SceneSet(cfg.seed, scenes, cfg.analysis.sample_rate)


def noisy_scene_set(cfg: ExperimentConfig, world: World, test: SceneSet, condition: str) -> SceneSet:
    """The clean test set plus household noise at the condition's SNR.

    Noise classes follow the rule selector and are drawn per clip from a seed
    that does not depend on the SNR, so the four conditions differ only in level.
    """
    manifests = cfg.doc["scenes"].get("noisy_manifests", {})
    if condition in manifests:
        return SceneSet.from_json(cfg.resolve(manifests[condition]).read_text())
    snr = float(condition[3:])
    noise = {}
    for i, sc in enumerate(test.scenes):
        sel = select_noise_rulebased(weak_from_strong(sc.timeline()), world.ontology, "household")
        if not sel:
            continue
        events = draw_noise_events(sel, world.pool, derive_seed(cfg.seed, "testnoise", i))
        noise[sc.clip_id] = {"events": events, "snr_db": snr}
    return SceneSet(test.seed, test.scenes, test.sample_rate, noise)


# --- calibration ----------------------------------------------------------


def _selector(kind: str, world: World, client: LlmClient | None):
    if kind == "random":
        return RandomSelector(world.ontology)
    if client is not None:
        return LlmSelector(world.ontology, client)
    return RuleSelector(world.ontology)


def _finetune_epochs(cfg, world, rendered, recipe, client, records):
    """One generator of ``(mel, timeline)`` augmented examples per epoch, in schedule order."""
    selector_kind, snr_policy = recipe
    selector = _selector(selector_kind, world, client)
    sched = cfg.curriculum
    analysis = cfg.analysis
    lo, hi = sched.snr_end_db, sched.snr_start_db

    def epoch_examples(epoch):
        for i, (wav, tl) in enumerate(rendered):
            seed = derive_seed(cfg.seed, "finetune", epoch, i)
            if snr_policy == "curriculum":
                snr = curriculum_snr(epoch, sched)
            else:
                snr = float(np.random.default_rng(seed).uniform(lo, hi))
            noisy, rec = augment_clip(wav, weak_from_strong(tl), world.pool, selector, snr, seed, world.protos)
            records.append({"epoch": epoch, **rec})
            yield mel_spectrogram(noisy, analysis), tl

    for epoch in range(sched.total_epochs):
        yield epoch_examples(epoch)


def calibrate_models(cfg: ExperimentConfig, world: World, needed, client=None):
    """Calibrate ``theta`` on clean scenes and every fine-tuned model in ``needed``.

    Returns ``(models, augmentation records per model)``.
    """
    sed = cfg.doc["sed"]
    analysis = cfg.analysis
    calib = scene_set(cfg, world, "calibrate")
    rendered = [compose_scene(sc, world.protos, calib.sample_rate) for sc in calib.scenes]
    targets = world.ontology.target_classes
    kw = dict(pooling=sed["pooling"], context_frames=sed["context_frames"], miss_cost=sed["miss_cost"])
    models = {
        "theta": calibrate_reference_sed(
            ((mel_spectrogram(w, analysis), tl) for w, tl in rendered),
            targets,
            analysis,
            meta={"role": "theta", "data": "clean"},
            **kw,
        )
    }
    records = {}
    for name in FINETUNE_RECIPES:
        if name not in needed:
            continue
        recs = []
        epochs = _finetune_epochs(cfg, world, rendered, FINETUNE_RECIPES[name], client, recs)
        selector_kind, snr_policy = FINETUNE_RECIPES[name]
        models[name] = finetune_reference_sed(
            models["theta"],
            ((mel_spectrogram(w, analysis), tl) for w, tl in rendered),
            epochs,
            analysis,
            meta={"role": name, "selector": selector_kind, "snr_policy": snr_policy},
            miss_cost=sed["miss_cost"],
        )
        records[name] = recs
    return models, records


def needed_models(variants, final: str = "theta") -> set[str]:
    return {"theta", final} | {QUERY_MODEL[v] for v in variants if v in QUERY_MODEL}


def apply_backends(models: dict, lass: LassModelHandle, env=os.environ):
    """Swap in external SED / separation backends named by environment variables."""
    sed_addr = env.get(SED_BACKEND_ENV)
    if sed_addr:
        th = models["theta"]
        models = {
            **models,
            "theta": SedModelHandle("external-backend", th.class_names, address=sed_addr, meta={"role": "theta"}),
        }
    lass_addr = env.get(LASS_BACKEND_ENV)
    if lass_addr:
        lass = LassModelHandle("external-backend", cfg=lass.cfg, address=lass_addr)
    return models, lass


# --- evaluation -----------------------------------------------------------


def _thresholds(cfg: ExperimentConfig) -> tuple[float, ...]:
    return tuple(np.linspace(0.01, 0.99, cfg.doc["psds"]["n_thresholds"]).round(6).tolist())


def evaluate_condition(cfg_doc: dict, base_dir: str, condition: str, models, lass, scenes: SceneSet):
    """PSDS, macro recall and per-clip provenance of every variant on one condition."""
    cfg = ExperimentConfig(cfg_doc, Path(base_dir))
    protos = fixture_prototypes()
    pcfg = PipelineConfig(cfg.analysis, cfg.doc["query_threshold"])
    clips = [scenes.render(protos, sc) for sc in scenes.scenes]
    refs = [tl for _, tl in clips]
    weak = [weak_from_strong(tl) for tl in refs]
    targets = models["theta"].class_names
    thresholds = _thresholds(cfg)
    out = {}
    for v in cfg.variants:
        run = system_variant(v, models, lass, pcfg, final=cfg.doc["final_model"])
        results = [run(wav, tl.clip_id, w) for (wav, tl), w in zip(clips, weak)]
        dets = detections_from_grids(
            [r.frames for r in results], targets, thresholds, cfg.doc["psds"]["median_frames"]
        )
        p1 = psds(dets, refs, cfg.psds_params(1), classes=targets)
        p2 = psds(dets, refs, cfg.psds_params(2), classes=targets)
        recall = None
        if results[0].query_prediction is not None:
            recall = macro_recall([r.query_prediction for r in results], weak, cfg.doc["query_threshold"], targets)
        prov = []
        for r in results:
            rec = {k: v2 for k, v2 in r.provenance.items() if k != "timings"}
            recipe = scenes.noise.get(r.frames.clip_id)
            rec["noise"] = None if recipe is None else {"events": [list(e) for e in recipe["events"]], "snr_db": recipe["snr_db"]}
            rec["condition"] = condition
            prov.append(rec)
        out[v] = {"p1": p1, "p2": p2, "macro_recall": recall, "provenance": prov}
    return condition, out


# --- outputs --------------------------------------------------------------

VARIANT_LABELS = {
    "#1": ("no", "none"),
    "#2": ("yes", "ground truth"),
    "#3": ("yes", "all event texts"),
    "#4": ("yes", "query model w/o fine-tuning"),
    "#5": ("yes", "fine-tuned, random noise selection"),
    "#6": ("yes", "fine-tuned, no curriculum"),
    "#7": ("yes", "fine-tuned, full method"),
}


def _plot(path: Path, rows, recall, conditions):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    matplotlib.rcParams["svg.hashsalt"] = "noisysed"
    matplotlib.rcParams["svg.fonttype"] = "none"

    fig, ax = plt.subplots(figsize=(6, 4))
    x = np.arange(len(conditions))
    for r in rows:
        ax.plot(x, [r.cells[c].p1_plus_p2 for c in conditions], marker="o", label=r.variant)
    ax.set_xticks(x, conditions)
    ax.set_ylabel("P1+P2")
    ax.set_title("PSDS per condition")
    ax.legend(fontsize=8, ncol=2)
    fig.tight_layout()
    fig.savefig(path / "table1.svg", metadata={"Date": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    series = {"ground truth": [1.0] * len(conditions)}
    for v, per in recall.items():
        series[v] = [per[c] for c in conditions]
    width = 0.8 / max(len(series), 1)
    for k, (name, vals) in enumerate(series.items()):
        ax.bar(x + (k - (len(series) - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(x, conditions)
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("macro recall")
    ax.set_title("Clip-wise macro recall")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path / "recall.svg", metadata={"Date": None})
    plt.close(fig)


def _source_counts(records) -> dict:
    counts = {}
    for name, recs in sorted(records.items()):
        c = {}
        for r in recs:
            key = r.get("selector_source") or r.get("skipped") or "none"
            c[key] = c.get(key, 0) + 1
        counts[name] = dict(sorted(c.items()))
    return counts


def _workers(cfg: ExperimentConfig) -> int:
    n = cfg.doc["workers"]
    return n if n > 0 else (os.cpu_count() or 1)


def run(cfg: ExperimentConfig, out_dir=None, env=os.environ) -> dict:
    """Run the whole experiment and write its report files into ``out_dir``.

    Returns the report document. On failure a ``PARTIAL`` marker holding the
    error is left next to whatever was written, and the exception propagates.
    """
    out = Path(out_dir or cfg.resolve(cfg.doc["output_dir"]))
    out.mkdir(parents=True, exist_ok=True)
    marker = out / PARTIAL_MARKER
    marker.write_text("run in progress\n")
    try:
        report = _run(cfg, out, env)
    except BaseException as exc:
        marker.write_text(f"run failed: {type(exc).__name__}: {exc}\n")
        raise
    marker.unlink()
    return report


def _run(cfg: ExperimentConfig, out: Path, env) -> dict:
    timings = {}
    t0 = time.perf_counter()
    world = build_world(cfg)
    (out / "config.json").write_text(cfg.to_json() + "\n")

    client = None
    llm = cfg.doc["llm"]
    llm_cfg = LlmClientConfig(
        endpoint=env.get(ENDPOINT_ENV) or None,
        attempts=llm["attempts"],
        backoff_seconds=llm["backoff_seconds"],
        timeout_seconds=llm["timeout_seconds"],
        cache_path=None if llm["cache"] is None else str(cfg.resolve(llm["cache"])),
    )
    if llm_cfg.configured:
        client = LlmClient(llm_cfg)
    try:
        models, aug_records = calibrate_models(cfg, world, needed_models(cfg.variants, cfg.doc["final_model"]), client)
    finally:
        if client is not None:
            client.close()
    timings["calibrate_s"] = time.perf_counter() - t0

    lass = reference_lass(world.protos, world.ontology.target_classes, cfg.analysis)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for name, m in sorted(models.items()):
        save_model(m, models_dir / f"{name}.json")
    save_model(lass, models_dir / "lass.json")
    models, lass = apply_backends(models, lass, env)

    with (out / "calibration.jsonl").open("w") as fh:
        for name, recs in sorted(aug_records.items()):
            for r in recs:
                fh.write(json.dumps({"model": name, **r}, sort_keys=True) + "\n")

    test = scene_set(cfg, world, "test")
    manifests = out / "manifests"
    manifests.mkdir(exist_ok=True)
    sets = {}
    for cond in cfg.conditions:
        sets[cond] = test if cond == "clean" else noisy_scene_set(cfg, world, test, cond)
        (manifests / f"test_{cond}.json").write_text(sets[cond].to_json() + "\n")

    t1 = time.perf_counter()
    jobs = [(cfg.doc, str(cfg.base_dir), cond, models, lass, sets[cond]) for cond in cfg.conditions]
    workers = min(_workers(cfg), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = dict(ex.map(evaluate_condition, *zip(*jobs)))
    else:
        results = dict(evaluate_condition(*j) for j in jobs)
    timings["evaluate_s"] = time.perf_counter() - t1

    order = {c: i for i, c in enumerate(CONDITIONS)}
    rows, recall = [], {}
    for v in cfg.variants:
        cells = {c: (results[c][v]["p1"], results[c][v]["p2"]) for c in cfg.conditions}
        rows.append(aggregate_report(cells, v, cfg.conditions))
        if results[cfg.conditions[0]][v]["macro_recall"] is not None:
            recall[v] = {c: results[c][v]["macro_recall"] for c in cfg.conditions}

    prov = []
    for c in cfg.conditions:
        for v in cfg.variants:
            prov.extend(results[c][v]["provenance"])
    prov.sort(key=lambda r: (list(VARIANTS).index(r["variant"]), order[r["condition"]], r["clip_id"]))
    with (out / "provenance.jsonl").open("w") as fh:
        for r in prov:
            fh.write(json.dumps(r, sort_keys=True) + "\n")

    (out / "report.tsv").write_text(render_tsv(rows, VARIANT_LABELS))
    report = {
        "seed": cfg.seed,
        "config_sha256": hashlib.sha256(cfg.to_json().encode()).hexdigest(),
        "conditions": list(cfg.conditions),
        "final_model": cfg.doc["final_model"],
        "rows": [row_to_dict(r) for r in rows],
        "macro_recall": recall,
        "selector_sources": _source_counts(aug_records),
        "backends": {
            "sed": env.get(SED_BACKEND_ENV) or "reference",
            "lass": env.get(LASS_BACKEND_ENV) or "reference",
        },
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    _plot(out, rows, recall, list(cfg.conditions))
    timings["total_s"] = time.perf_counter() - t0
    (out / "timings.json").write_text(json.dumps(timings, indent=2) + "\n")
    return report
