"""``lowa`` command line: synth | train | eval | infer.

Exit status is 0 on success, 1 for usage or configuration errors and 2 for
runtime or data errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_run_config, parse_override, with_steps
from .dataset import (
    WITHHELD,
    AnnotationError,
    SyntheticSpec,
    attribute_category,
    attribute_counts,
    combos,
    frequency_split,
    generate_synthetic,
    label_sets,
    load_annotations,
    load_split_override,
    read_ppm,
    resize_nearest,
    save_annotations,
)
from .evaluation import evaluate, export_logits_matrix
from .inference import (
    Predictor,
    classify_attributes_boxfree,
    detect_closed_vocab,
    detect_open_vocab,
    localize_by_attribute,
    write_predictions,
)
from .querygen import TemplateError, load_antonyms, load_templates, normalize
from .trainer import (
    CheckpointError,
    TrainingData,
    TrainingError,
    config_hash,
    load_checkpoint,
    model_from_checkpoint,
    read_loss_csv,
    run_schedule,
    save_checkpoint,
    write_loss_csv,
)
from .model import LOWAModel

log = logging.getLogger("lowa")

MODES = ("closed", "attr-classify", "attr-localize", "open")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable)")
    p.add_argument("--seed", type=int, help=f"random seed (falls back to the config file, then $LOWA_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lowa", description="Attribute-aware open-vocabulary detection at desk scale.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="{synth,train,eval,infer}", parser_class=_Parser)

    p = sub.add_parser("synth", help="render the synthetic shapes dataset")
    _common(p)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="run the three-phase schedule")
    _common(p)
    p.add_argument("--data", required=True, help="training annotations JSON (or a synth output directory)")
    p.add_argument("--out", required=True, help="run directory for checkpoint.lwa and loss.csv")
    p.add_argument("--steps-o", type=int, help="object-phase steps (0 disables the phase)")
    p.add_argument("--steps-a", type=int, help="attribute-phase steps (0 disables the phase)")
    p.add_argument("--steps-f", type=int, help="free-text-phase steps (0 disables the phase)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--stop-at", type=int, help="stop after this global step (checkpoint is still written)")
    p.add_argument("--force", action="store_true", help="resume even if the config hash differs")

    p = sub.add_parser("eval", help="score a checkpoint on annotated data")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="evaluation annotations JSON (or a synth output directory)")
    p.add_argument("--out", required=True, help="directory for report.json and report.txt")
    p.add_argument("--k", type=int, help="K for mR@K and F1@K (8 or 10 are customary)")
    p.add_argument("--logits", action="store_true", help="also export the normalised logits matrix")

    p = sub.add_parser("infer", help="run one inference mode on one image")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True, help="PPM (P6) or .npy image")
    p.add_argument("--mode", required=True, help="one of: " + ", ".join(MODES))
    p.add_argument("--query", action="append", default=[], help="query text (repeatable)")
    p.add_argument("--query-file", help="one query per line")
    p.add_argument("--threshold", type=float, help="score threshold for --mode open (default 0.5)")
    p.add_argument("--top-k", type=int, help="boxes per attribute for --mode attr-localize (default 10)")
    p.add_argument("--box", help="x0,y0,x1,y1 normalised target box for --mode attr-classify")
    p.add_argument("--out", required=True, help="prediction JSON path")
    return parser


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    overrides: dict = {}
    for item in args.set:
        section, key, value = parse_override(item)
        overrides.setdefault(section, {})[key] = value
    return load_run_config(args.config, overrides, args.seed)


def _annotation_path(path: str, split: str) -> Path:
    p = Path(path)
    return p / f"{split}.json" if p.is_dir() else p


def _resources(cfg: RunConfig):
    templates = load_templates(cfg.data.templates or None)
    antonyms = load_antonyms(cfg.data.antonyms or None)
    return templates, antonyms


def read_queries(path) -> list[str]:
    """One query per line; blank lines and ``#`` comments are skipped."""
    out = []
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except UnicodeDecodeError as exc:
        raise AnnotationError(f"{path}: not UTF-8 text ({exc.reason})") from None
    for lineno, line in enumerate(lines, 1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        if "\t" in text or not normalize(text):
            raise AnnotationError(f"{path}:{lineno}: malformed query {line!r}")
        out.append(text)
    if not out:
        raise AnnotationError(f"{path}: no queries")
    return out


def read_image(path, size: int) -> np.ndarray:
    p = Path(path)
    if p.suffix.lower() == ".npy":
        pixels = np.load(p, allow_pickle=False).astype(np.float64)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise AnnotationError(f"{path}: expected an H x W x 3 array")
    else:
        pixels = read_ppm(p)
    return resize_nearest(pixels, size) if pixels.shape[0] != size or pixels.shape[1] != size else pixels


def _summary(name: str, records) -> dict:
    counts = attribute_counts(records)
    table = frequency_split(counts)
    return {
        "split": name,
        "images": len(records),
        "instances": sum(len(r.instances) for r in records),
        "classes": {c: n for c, n in sorted(_class_counts(records).items())},
        "attributes": {a: {"count": counts[a], "stratum": table.split[a]} for a in sorted(counts)},
    }


def _class_counts(records) -> dict:
    out: dict = {}
    for r in records:
        for i in r.instances:
            out[i.class_label] = out.get(i.class_label, 0) + 1
    return out


def _print_summary(summary: dict):
    print(f"{summary['split']}: {summary['images']} images, {summary['instances']} instances")
    for a, info in summary["attributes"].items():
        print(f"  {a:<14}{info['count']:>7}  {info['stratum']}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    d, size = cfg.data, cfg.model.image_size
    summaries = []
    for split, n in (("train", d.train_images), ("heldout", d.heldout_images)):
        spec = SyntheticSpec(image_size=size, num_images=n, min_objects=d.min_objects, max_objects=d.max_objects,
                             split=split, withheld=WITHHELD, novel_fraction=d.novel_fraction)
        records = generate_synthetic(spec, cfg.seed)
        save_annotations(records, out / f"{split}.json", "images" if d.write_images else None)
        summary = _summary(split, records)
        summaries.append(summary)
        _print_summary(summary)
    (out / "summary.json").write_text(json.dumps(summaries, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_train(args) -> int:
    cfg = with_steps(_run_config(args), args.steps_o, args.steps_a, args.steps_f)
    records = load_annotations(_annotation_path(args.data, "train"), cfg.model.image_size)
    templates, antonyms = _resources(cfg)
    data = TrainingData.build(records, templates, antonyms)
    if len(data.vocab) > cfg.model.text_vocab_size:
        raise ConfigError(f"vocabulary has {len(data.vocab)} words but model.text_vocab_size="
                          f"{cfg.model.text_vocab_size}")
    model = LOWAModel(cfg.model, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    previous = []
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expect_hash=config_hash(cfg.model, cfg.train), force=args.force)
        csv_path = Path(args.resume).parent / "loss.csv"
        if csv_path.exists():
            previous = [r for r in read_loss_csv(csv_path) if r.step < resume.global_step]
    ckpt, losses = run_schedule(model, data, cfg.train, resume=resume, stop_at=args.stop_at)
    classes, attributes = label_sets(records)
    ckpt.extra = {
        "attribute_counts": {a: n for a, n in sorted(attribute_counts(records).items())},
        "classes": classes,
        "attributes": attributes,
        "train_combos": sorted([c, a] for c, a in combos(records)),
        "templates": list(templates),
    }
    save_checkpoint(ckpt, out / "checkpoint.lwa")
    write_loss_csv(previous + losses, out / "loss.csv")
    print(f"trained to step {ckpt.global_step} of {cfg.train.total_steps}; wrote {out / 'checkpoint.lwa'}")
    return 0


def _load_predictor(path, cfg: RunConfig):
    ckpt = load_checkpoint(path)
    model, vocab = model_from_checkpoint(ckpt)
    templates = ckpt.extra.get("templates") or load_templates(cfg.data.templates or None)
    return ckpt, model, Predictor(model, vocab, templates)


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    if args.k is not None:
        if args.k < 1:
            raise UsageError("--k must be >= 1")
        cfg = replace(cfg, eval=replace(cfg.eval, k=args.k))
    ckpt, model, predictor = _load_predictor(args.checkpoint, cfg)
    records = load_annotations(_annotation_path(args.data, "heldout"), model.config.image_size)
    extra = ckpt.extra
    if "attributes" in extra:
        classes, attributes = extra["classes"], extra["attributes"]
    else:
        classes, attributes = label_sets(records)
    override = load_split_override(cfg.data.split_override) if cfg.data.split_override else None
    counts = extra.get("attribute_counts") or attribute_counts(records)
    table = frequency_split(counts, cfg.eval.head_pct, cfg.eval.tail_pct, override)
    seen = {tuple(c) for c in extra.get("train_combos", [])}
    novel = sorted(c for c in combos(records) if seen and c not in seen)
    report = evaluate(predictor, records, classes, attributes, cfg.eval.k, table, novel,
                      {a: attribute_category(a) for a in attributes}, cfg.eval.ar_k)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    (out / "report.txt").write_text(report.table(), encoding="utf-8")
    if args.logits:
        queries = [f"a photo of {a} {c}" for c, a in sorted(combos(records))]
        export_logits_matrix(predictor, records, queries, out / "logits.csv")
    sys.stdout.write(report.table())
    return 0


def cmd_infer(args) -> int:
    if args.mode not in MODES:
        raise UsageError(f"unknown --mode {args.mode!r}; choose from {', '.join(MODES)}")
    cfg = _run_config(args)
    queries = list(args.query)
    if args.query_file:
        queries += read_queries(args.query_file)
    if not queries:
        raise UsageError("give at least one --query or a --query-file")
    bad = [q for q in queries if not normalize(q)]
    if bad:
        raise UsageError(f"query {bad[0]!r} has no words")
    threshold = cfg.eval.threshold if args.threshold is None else args.threshold
    top_k = cfg.eval.top_k if args.top_k is None else args.top_k
    if not 0.0 < threshold < 1.0:
        raise UsageError("--threshold must lie in (0, 1)")
    if top_k < 1:
        raise UsageError("--top-k must be >= 1")
    _, model, predictor = _load_predictor(args.checkpoint, cfg)
    pixels = read_image(args.image, model.config.image_size)
    payload = {"image": Path(args.image).name, "mode": args.mode, "queries": queries}
    if args.mode == "closed":
        dets = detect_closed_vocab(predictor, pixels, queries)
        payload["detections"] = [d.to_json(queries) for d in dets]
    elif args.mode == "open":
        dets = detect_open_vocab(predictor, pixels, queries, threshold)
        payload["threshold"] = threshold
        payload["detections"] = [d.to_json(queries) for d in dets]
    elif args.mode == "attr-localize":
        per = localize_by_attribute(predictor, pixels, queries, top_k)
        payload["top_k"] = top_k
        payload["detections"] = [d.to_json(queries) for dets in per for d in dets]
    else:
        if not args.box:
            raise UsageError("--mode attr-classify needs --box x0,y0,x1,y1")
        try:
            box = [float(v) for v in args.box.split(",")]
        except ValueError:
            raise UsageError(f"--box {args.box!r} is not four numbers") from None
        if len(box) != 4 or not (box[2] > box[0] and box[3] > box[1]):
            raise UsageError(f"--box {args.box!r} must be x0,y0,x1,y1 with positive area")
        scores = classify_attributes_boxfree(predictor, pixels, box, queries)
        payload["box"] = box
        payload["scores"] = {q: float(s) for q, s in zip(queries, scores)}
    write_predictions(args.out, payload)
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "infer": cmd_infer}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("lowa: a subcommand is required (synth, train, eval or infer)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError, TemplateError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (AnnotationError, CheckpointError, TrainingError, OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
