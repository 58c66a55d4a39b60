"""``finealign`` command line: curate, train, eval, heatmap, selfcheck, toydata.

Every command takes ``--config`` (a JSON file), ``--seed`` and ``--out``.
Flags override config values. The fully resolved configuration is logged and
written next to the outputs as ``resolved_config.json``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from . import evalkit, selfcheck, toyworld, trainer
from .curation import (
    AttributeLexicon,
    DataError,
    atomic_write_text,
    curate_records,
    parse_records,
    write_records,
)
from .encoders import TextConfig, VisionConfig
from .trainer import CheckpointError, NumericalError, TrainConfig

log = logging.getLogger("finealign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "FINEALIGN_LOG"
TASKS = ("retrieval", "fgovd", "bbox", "zeroshot")

DEFAULTS = {
    "seed": 0,
    "curate": {
        "lexicon": "default",
        "conf_threshold": 0.4,
        "iou_threshold": 0.5,
        "difficulty": 1,
        "negatives": 10,
    },
    "train": {},
    "model": {"vision": {}, "text": {}},
    "eval": {"tasks": list(TASKS), "samples_per_axis": 3, "lexicon": "default", "negatives": 10},
    "toydata": {"kind": "scenes", "count": 64, "raw": False},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# -- configuration ------------------------------------------------------------------------------


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}{key}"
        if key not in base:
            raise UsageError(f"unknown config key {where!r}")
        if isinstance(base[key], dict) and key not in ("train", "vision", "text"):
            if not isinstance(value, dict):
                raise UsageError(f"config key {where!r} must be an object")
            out[key] = _merge(base[key], value, where + ".")
        else:
            out[key] = copy.deepcopy(value)
    return out


def resolve_config(args) -> dict:
    """Defaults, then the config file, then command-line flags."""
    config = copy.deepcopy(DEFAULTS)
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must contain a JSON object")
        config = _merge(config, loaded)
    if args.seed is not None:
        config["seed"] = args.seed
    if getattr(args, "stage", None) is not None:
        config["train"]["stage"] = args.stage
    if getattr(args, "tasks", None):
        config["eval"]["tasks"] = parse_tasks(args.tasks)
    config["train"].setdefault("seed", config["seed"])
    try:
        train = TrainConfig.from_dict(config["train"])
        VisionConfig(**config["model"]["vision"])
        TextConfig(**{"vocab_size": 8, **config["model"]["text"]})
    except KeyError as exc:
        raise UsageError(str(exc).strip("'\"")) from None
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    config["train"] = train.to_dict()
    unknown_tasks = [t for t in config["eval"]["tasks"] if t not in TASKS]
    if unknown_tasks:
        raise UsageError(f"unknown eval task(s) {unknown_tasks}; valid tasks: {', '.join(TASKS)}")
    return config


def parse_tasks(text: str) -> list[str]:
    names = [t.strip() for t in text.split(",") if t.strip()]
    if names == ["all"]:
        return list(TASKS)
    bad = [t for t in names if t not in TASKS]
    if bad or not names:
        raise UsageError(f"unknown eval task(s) {bad or [text]}; valid tasks: all, {', '.join(TASKS)}")
    return names


def _record_config(config: dict, out: Path) -> None:
    text = json.dumps(config, indent=2, sort_keys=True)
    log.info("resolved config:\n%s", text)
    atomic_write_text(out / "resolved_config.json", text + "\n")


def _lexicon(spec: str) -> AttributeLexicon:
    if spec == "default":
        return AttributeLexicon.default()
    if spec == "toy":
        return toyworld.toy_lexicon()
    try:
        return AttributeLexicon.load(spec)
    except OSError as exc:
        raise UsageError(f"cannot read lexicon {spec}: {exc}") from None


def _read_dataset(path: str, extras=()):
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_records(fh, extras, source=path)
    except OSError as exc:
        raise UsageError(f"cannot read dataset {path}: {exc}") from None


def _load_checkpoint(path: str) -> trainer.Checkpoint:
    try:
        return trainer.load_checkpoint(path)
    except OSError as exc:
        raise UsageError(f"cannot read checkpoint {path}: {exc}") from None


# -- commands ----------------------------------------------------------------------------------


def cmd_curate(args, config: dict, out: Path) -> int:
    opts = dict(config["curate"])
    lexicon = _lexicon(opts.pop("lexicon"))
    records, extras, problems = _read_dataset(args.input, ("expression_index",))
    curated, summary = curate_records(records, extras, lexicon, config["seed"], **opts)
    write_records(out / "curated.jsonl", curated)
    counts = summary.counts()
    counts["records_malformed"] = len(problems)
    atomic_write_text(out / "curate_summary.json", json.dumps(counts, indent=2, sort_keys=True) + "\n")
    for problem in problems + summary.diagnostics:
        print(f"warning: {problem}", file=sys.stderr)
    for key in sorted(counts):
        print(f"{key}: {counts[key]}")
    return EXIT_OK


def cmd_train(args, config: dict, out: Path) -> int:
    train = TrainConfig.from_dict(config["train"])
    if train.stage == 2 and not args.init:
        raise UsageError("stage 2 needs --init <stage-1 checkpoint>")
    init = _load_checkpoint(args.init) if args.init else None
    records, _, problems = _read_dataset(args.data)
    for problem in problems:
        print(f"warning: {problem}", file=sys.stderr)
    vision = text = vocab = None
    if init is None:
        vocab = trainer.build_vocab(records)
        vision = VisionConfig(**config["model"]["vision"])
        text = TextConfig(**{"vocab_size": max(len(vocab), 8), **config["model"]["text"]})
    image_root = args.image_root or str(Path(args.data).parent)
    result = trainer.train_stage(
        records, train, init, vision, text, vocab, image_root=image_root, metrics_path=out / "metrics.jsonl"
    )
    trainer.save_checkpoint(result.checkpoint, out / "checkpoint.fack")
    final = result.metrics[-1]
    print(f"steps: {len(result.metrics)}")
    print(f"final_loss: {final.loss_total:.6f}")
    print(f"temperature: {result.checkpoint.temperature:.6f}")
    return EXIT_OK


def _bbox_label(caption: str, lexicon: AttributeLexicon) -> str | None:
    nouns = [w for w in caption.lower().split() if w in lexicon.nouns]
    return nouns[-1] if nouns else None


def run_eval_task(task: str, model, records, config: dict, image_root) -> evalkit.EvalReport:
    opts = config["eval"]
    g = opts["samples_per_axis"]
    if task == "retrieval":
        images = np.stack([toyworld.load_image(r.image_source, image_root) for r in records])
        cls, _ = evalkit.encode_images(model, images)
        metrics, counts = {}, {}
        for split in ("short", "long"):
            caps = [r.short_caption if split == "short" else r.long_caption for r in records]
            rep = evalkit.grouped_retrieval(cls, evalkit.encode_texts(model, caps), evalkit.unique_caption_groups(caps))
            metrics[split], counts[split] = rep.metrics["all"], rep.counts["all"]
        return evalkit.EvalReport("retrieval", metrics, counts)
    if task == "fgovd":
        samples = toyworld.difficulty_samples(records, _lexicon(opts["lexicon"]), config["seed"], opts["negatives"])
        return evalkit.fgovd_accuracy(model, samples, g, image_root)
    if task == "bbox":
        lexicon = _lexicon(opts["lexicon"])
        rows = [(r.image_source, b, _bbox_label(b.positive_caption, lexicon)) for r in records for b in r.regions]
        rows = [row for row in rows if row[2] is not None]
        if not rows:
            raise DataError("no region caption names a lexicon noun; nothing to classify")
        names = sorted({row[2] for row in rows})
        sources, boxes, gold = zip(*rows)
        return evalkit.bbox_classification(model, list(sources), list(boxes), list(gold), names, g, image_root)
    if task == "zeroshot":
        images = np.stack([toyworld.load_image(r.image_source, image_root) for r in records])
        gold = [r.short_caption for r in records]
        return evalkit.zero_shot_classification(model, images, sorted(set(gold)), gold)
    raise UsageError(f"unknown eval task {task!r}")


def cmd_eval(args, config: dict, out: Path) -> int:
    ckpt = _load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    records, _, problems = _read_dataset(args.data)
    if not records:
        raise DataError(f"{args.data} contains no usable records")
    image_root = args.image_root or str(Path(args.data).parent)
    for task in config["eval"]["tasks"]:
        try:
            report = run_eval_task(task, model, records, config, image_root)
        except ValueError as exc:
            if isinstance(exc, DataError):
                raise
            raise DataError(f"{task}: {exc}") from None
        report.write(out / f"{task}.report")
        sys.stdout.write(report.to_text())
        if report.excluded:
            print(f"{task}: {report.excluded} sample(s) excluded (no negatives)", file=sys.stderr)
    return EXIT_OK


def cmd_heatmap(args, config: dict, out: Path) -> int:
    model = _load_checkpoint(args.checkpoint).to_model()
    if args.image:
        image = toyworld.load_image(args.image)
        name = Path(args.image).stem
    else:
        if not (args.data and args.image_id):
            raise UsageError("heatmap needs --image, or --data together with --image-id")
        records, _, _ = _read_dataset(args.data)
        match = [r for r in records if r.image_id == args.image_id]
        if not match:
            raise DataError(f"image id {args.image_id!r} not in {args.data}")
        image = toyworld.load_image(match[0].image_source, args.image_root or str(Path(args.data).parent))
        name = args.image_id
    grid = evalkit.emit_similarity_heatmap(model, image, args.query, out / f"{name}.heatmap")
    r, c = np.unravel_index(int(np.argmax(grid)), grid.shape)
    print(f"wrote {out / (name + '.heatmap.txt')} and {out / (name + '.heatmap.pgm')}; peak at row {r}, column {c}")
    return EXIT_OK


def cmd_selfcheck(args, config: dict, out: Path) -> int:
    results = selfcheck.run_selfcheck(config["seed"], fault=args.inject_fault)
    for res in results:
        print(res.line())
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def cmd_toydata(args, config: dict, out: Path) -> int:
    opts = config["toydata"]
    kind = args.kind or opts["kind"]
    count = args.count if args.count is not None else opts["count"]
    raw = args.raw or opts["raw"]
    if kind == "concepts":
        records = toyworld.concept_dataset(count, seed=config["seed"])
    elif kind == "scenes":
        records = toyworld.scene_dataset(count, seed=config["seed"])
    else:
        raise UsageError(f"unknown toy dataset kind {kind!r}; use concepts or scenes")
    path = out / "records.jsonl"
    if raw:
        rows = toyworld.raw_scene_records(records, config["seed"])
        atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    else:
        write_records(path, records)
    print(f"wrote {len(records)} records to {path}")
    return EXIT_OK


COMMANDS = {
    "curate": cmd_curate,
    "train": cmd_train,
    "eval": cmd_eval,
    "heatmap": cmd_heatmap,
    "selfcheck": cmd_selfcheck,
    "toydata": cmd_toydata,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="finealign", description="Fine-grained image-text alignment toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--seed", type=int, help="global seed (overrides config)")
        p.add_argument("--out", default=".", help="output directory (default: current directory)")
        return p

    p = common(sub.add_parser("curate", help="sanitise, gate, suppress and add hard negatives"))
    p.add_argument("--input", required=True, help="JSON-lines records with candidate boxes")

    p = common(sub.add_parser("train", help="run one training stage"))
    p.add_argument("--data", required=True, help="curated JSON-lines dataset")
    p.add_argument("--stage", type=int, choices=(1, 2))
    p.add_argument("--init", help="checkpoint to start from (required for stage 2)")
    p.add_argument("--image-root", help="directory for relative image paths (default: dataset directory)")

    p = common(sub.add_parser("eval", help="run evaluation harnesses"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--tasks", help=f"comma-separated subset of {', '.join(TASKS)}, or all")
    p.add_argument("--image-root")

    p = common(sub.add_parser("heatmap", help="token-level similarity map for a text query"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--query", required=True)
    p.add_argument("--image", help=".npy image file")
    p.add_argument("--data", help="dataset to look the image up in")
    p.add_argument("--image-id")
    p.add_argument("--image-root")

    p = common(sub.add_parser("selfcheck", help="run the built-in verification suite"))
    p.add_argument("--inject-fault", choices=sorted(selfcheck.FAULTS), help=argparse.SUPPRESS)

    p = common(sub.add_parser("toydata", help="write a synthetic dataset"))
    p.add_argument("--kind", choices=("concepts", "scenes"))
    p.add_argument("--count", type=int, help="images per concept (concepts) or scenes")
    p.add_argument("--raw", action="store_true", help="emit uncurated scene records for the curate command")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        config = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _record_config(config, out)
        return COMMANDS[args.command](args, config, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
