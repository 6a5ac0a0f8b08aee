"""Command-line entry point: ``run``, ``validate``, ``score`` and ``synth``."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path

from .config import ExperimentConfig, validate_config
from .errors import NoisySedError
from .events import parse_strong_tsv, weak_from_strong
from .psds import SCENARIOS, psds

log = logging.getLogger("noisysed")

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2


def _variants(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


def cmd_run(args) -> int:
    from .experiment import run

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig.default()
    cfg = cfg.with_overrides(
        variants=_variants(args.variants) if args.variants else None,
        seed=args.seed,
        workers=args.workers,
    )
    out = Path(args.out) if args.out else None
    report = run(cfg, out)
    out = out or cfg.resolve(cfg.doc["output_dir"])
    sys.stdout.write((out / "report.tsv").read_text())
    log.info("wrote %s (selector sources: %s)", out, json.dumps(report["selector_sources"]))
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        diags = validate_config(args.config)
    except OSError as exc:
        print(f"cannot read {args.config}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for d in diags:
        print(d)
    if not diags:
        print(f"{args.config}: valid")
    return EXIT_FAIL if diags else EXIT_OK


_NUMBER = re.compile(r"(\d+(?:\.\d+)?)(?!.*\d)")


def _threshold_of(path: Path) -> float:
    m = _NUMBER.search(path.stem)
    if m is None:
        raise NoisySedError(f"{path.name}: file name carries no threshold (e.g. dets_0.50.tsv)")
    return float(m.group(1))


def load_operating_points(paths, durations) -> dict:
    """Detection TSVs keyed by the threshold written in each file name."""
    files = []
    for p in map(Path, paths):
        files.extend(sorted(p.glob("*.tsv")) if p.is_dir() else [p])
    dets = {}
    for f in files:
        thr = _threshold_of(f)
        if thr in dets:
            raise NoisySedError(f"two detection files for threshold {thr}")
        dets[thr] = parse_strong_tsv(f.read_bytes(), durations)
    return dets


def cmd_score(args) -> int:
    refs = parse_strong_tsv(Path(args.refs).read_bytes(), default_duration=args.clip_duration)
    durations = {t.clip_id: t.clip_duration for t in refs}
    dets = load_operating_points(args.dets, durations)
    classes = sorted({e.class_name for t in refs for e in t.events})
    score = psds(dets, refs, SCENARIOS[args.scenario], classes=classes)
    if args.json:
        print(json.dumps({"scenario": args.scenario, "psds": score, "operating_points": len(dets)}))
    else:
        print(f"{score:.6f}")
    return EXIT_OK


def cmd_synth(args) -> int:
    from .augment import NoisePool, draw_noise_events, select_noise_rulebased
    from .scenes import SceneSet, derive_seed, fixture_ontology, fixture_prototypes, random_scene_spec

    manifest = Path(args.manifest)
    onto = fixture_ontology()
    if args.create is not None:
        scenes = [
            random_scene_spec(f"scene{i:04d}", derive_seed(args.seed, "synth", i), onto.target_classes)
            for i in range(args.create)
        ]
        noise = {}
        if args.snr is not None:
            pool = NoisePool.synthetic(onto, args.seed)
            for i, sc in enumerate(scenes):
                sel = select_noise_rulebased(weak_from_strong(sc.timeline()), onto, "household")
                if sel:
                    events = draw_noise_events(sel, pool, derive_seed(args.seed, "synthnoise", i))
                    noise[sc.clip_id] = {"events": events, "snr_db": args.snr}
        manifest.parent.mkdir(parents=True, exist_ok=True)
        manifest.write_text(SceneSet(args.seed, scenes, noise=noise).to_json() + "\n")
    sset = SceneSet.from_json(manifest.read_text())
    out = Path(args.out) if args.out else manifest.with_suffix("")
    sset.write(out, fixture_prototypes())
    print(out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="noisysed", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the fixture experiment and write reports")
    r.add_argument("--config", help="experiment JSON (defaults to the built-in fixture config)")
    r.add_argument("--variants", help="comma-separated subset of #1..#7")
    r.add_argument("--seed", type=int)
    r.add_argument("--out", help="output directory (overrides output_dir)")
    r.add_argument("--workers", type=int, help="worker processes; 0 means one per core")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("validate", help="check an experiment config")
    v.add_argument("--config", required=True)
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("score", help="PSDS of detection TSVs against reference TSV")
    s.add_argument(
        "--dets",
        required=True,
        nargs="+",
        help="detection TSVs (one per threshold, threshold in the file name) or a directory of them",
    )
    s.add_argument("--refs", required=True)
    s.add_argument("--scenario", type=int, choices=(1, 2), required=True)
    s.add_argument("--clip-duration", type=float, default=10.0, help="duration of every reference clip")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_score)

    y = sub.add_parser("synth", help="render a scene manifest to WAV files and metadata.tsv")
    y.add_argument("--manifest", required=True)
    y.add_argument("--out", help="output directory (default: manifest path without suffix)")
    y.add_argument("--create", type=int, metavar="N", help="first write a manifest of N random scenes")
    y.add_argument("--seed", type=int, default=0)
    y.add_argument("--snr", type=float, help="with --create, add household noise at this SNR")
    y.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except NoisySedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
