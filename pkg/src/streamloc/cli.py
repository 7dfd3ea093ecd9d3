"""Command-line entry point: ``streamloc <subcommand> ...``.

Exit codes: 0 on success, 1 when a module raises (message on stderr),
2 on a usage error.  Logging goes to stderr; its level comes from the
STREAMLOC_LOG environment variable (error, info or debug).
"""
from __future__ import annotations

import argparse
import glob
import logging
import os
import sys
from pathlib import Path

import yaml

from .config import PipelineConfig
from .media import load_sequence, load_track, read_groundtruth, read_manifest
from .predictor import load_bank, save_bank

log = logging.getLogger("streamloc")

LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
MODEL_FILE = "model.json"


def _setup_logging():
    name = os.environ.get("STREAMLOC_LOG", "error").lower()
    level = LOG_LEVELS.get(name, logging.ERROR)
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    if name not in LOG_LEVELS:
        log.error("unknown STREAMLOC_LOG value %r, using 'error'", name)


def _config(path) -> PipelineConfig:
    return PipelineConfig.load(path) if path else PipelineConfig()


def sequence_dirs(root) -> list:
    """A sequence directory, or every sequence directory directly below root."""
    root = Path(root)
    if (root / "manifest.yaml").exists():
        return [root]
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.yaml").exists()) if root.is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"no sequences under {root}")
    return dirs


# -- subcommands ---------------------------------------------------------------------

def cmd_synthesize(args) -> int:
    from .synthetic import SceneSpec, write_scene
    d = (yaml.safe_load(Path(args.spec).read_text()) or {}) if args.spec else {}
    if "scenes" in d:
        specs = [SceneSpec(**s) for s in d["scenes"]]
    else:
        d = dict(d)
        count = int(d.pop("count", 1))
        classes = d.pop("classes", None)
        if classes:
            specs = [SceneSpec.for_class(classes[i % len(classes)], **{"video_id": f"scene{i:03d}", **d})
                     for i in range(count)]
        else:
            specs = [SceneSpec(**{"video_id": f"scene{i:03d}", **d}) for i in range(count)]
    ids = [s.video_id for s in specs]
    if len(set(ids)) != len(ids):
        raise ValueError("scene video ids must be distinct")
    out = Path(args.out)
    for i, spec in enumerate(specs):
        write_scene(out / spec.video_id, spec, seed=args.seed + i)
        log.info("wrote %s", out / spec.video_id)
    (out / "labels.yaml").write_text(yaml.safe_dump({s.video_id: s.class_label for s in specs}))
    return 0


def cmd_train(args) -> int:
    from .pipeline import load_labels, run_train
    config = _config(args.config)
    seqs = [load_sequence(p) for p in sequence_dirs(args.data)]
    labels = load_labels(args.labels) if args.labels else None
    bank = run_train(seqs, labels, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_bank(bank, out / MODEL_FILE)
    config.save(out / "config.yaml")
    log.info("trained %s on %d videos, classes %s", bank.mode, len(seqs), bank.classes)
    return 0


def cmd_localize(args) -> int:
    from .pipeline import run_online
    config = _config(args.config)
    bank = load_bank(Path(args.models) / MODEL_FILE) if args.models else None
    recs = run_online(args.data, config, bank, out=args.out, max_frames=args.max_frames)
    log.info("wrote %d records to %s", len(recs), args.out)
    return 0


def _groundtruths(root) -> dict:
    gts = {}
    for d in sequence_dirs(root):
        m, base = read_manifest(d)
        if not m.get("groundtruth"):
            continue
        gt = read_groundtruth(base / m["groundtruth"], m["height"], m["width"])
        gts[gt.video_id] = gt
    return gts


def cmd_evaluate(args) -> int:
    from .evaluation import evaluate
    paths = sorted(glob.glob(args.tracks))
    if not paths:
        raise FileNotFoundError(f"no track files match {args.tracks}")
    tracks = {}
    for p in paths:
        tr = load_track(p)
        tracks[tr.video_id or Path(p).stem] = tr
    gts = _groundtruths(args.gt)
    missing = sorted(set(tracks) - set(gts))
    if missing:
        log.warning("no ground truth for %s", missing)
    summary = evaluate(tracks, gts, args.theta, args.out)
    log.info("AUC@%g %.4f, AP %.4f over %d videos", args.theta, summary["auc"], summary["ap"], len(gts))
    return 0


def cmd_demo_accept(args) -> int:
    from .acceptance import format_table, run_all
    numbers = [int(k) for k in args.criteria.split(",")] if args.criteria else None
    results = run_all(numbers)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


# -- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamloc", description="Online action localization and prediction.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthesize", help="write synthetic scenes with ground truth")
    s.add_argument("--spec", help="YAML scene spec (fields of SceneSpec, plus count/classes or a scenes list)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synthesize)

    s = sub.add_parser("train", help="train the codebook and classifier bank")
    s.add_argument("--data", required=True, help="sequence directory or a directory of them")
    s.add_argument("--labels", help="YAML map video id -> class (defaults to the ground-truth labels)")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("localize", help="localize one sequence, streaming records to a track file")
    s.add_argument("--data", required=True)
    s.add_argument("--models", help="directory written by train; omit for localization only")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--max-frames", type=int, help="stop after this many frames")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("evaluate", help="ROC, AUC, PR and accuracy curves for a set of tracks")
    s.add_argument("--tracks", required=True, help="glob of track files")
    s.add_argument("--gt", required=True, help="sequence directory or a directory of them")
    s.add_argument("--theta", type=float, default=0.2)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("demo-accept", help="run the acceptance checks and print a pass/fail table")
    s.add_argument("--criteria", help="comma-separated criterion numbers (default: all)")
    s.set_defaults(func=cmd_demo_accept)
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code else 0
    try:
        return args.func(args)
    except Exception as e:  # noqa: BLE001 - reported as a module error
        log.debug("traceback", exc_info=True)
        print(f"streamloc {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
