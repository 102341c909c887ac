"""Command line: ``doclm synth | train | eval | predict | repl``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import Counter
from pathlib import Path

from . import checkpoint, config, data, prompts
from .checkpoint import CheckpointError
from .config import ConfigError, RunConfig
from .data import DatasetError, RecordError
from .decoder import LayoutLLM
from .encoder import EncoderError
from .prompts import PromptError, TaskKind
from .tensor import ContractError
from .train import TrainingError, evaluate, train

log = logging.getLogger("doclm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# corpus and model helpers

def load_corpus(cfg: RunConfig, split: str = "train"):
    """VrDU and NLP samples of ``split`` ("all" keeps everything) plus the label sets seen."""
    d = cfg.data
    errors: list | None = [] if d.skip_bad_records else None
    docs: list[tuple[TaskKind, list[data.Document]]] = []
    if d.classification:
        docs.append((TaskKind.CLASSIFICATION, data.load_rvlcdip_like(d.classification, errors=errors)))
    if d.extraction:
        if d.extraction_format == "funsd":
            ext = data.load_funsd_like(d.extraction, label_set=None, errors=errors)
        else:
            gran = "coarse" if d.extraction_format == "cord-coarse" else "fine"
            ext = data.load_cord_like(d.extraction, granularity=gran, errors=errors)
        docs.append((TaskKind.EXTRACTION, ext))
    if d.qa:
        docs.append((TaskKind.DOCQA, data.load_docvqa_like(d.qa, errors=errors)))
    labels = {}
    vrdu = []
    tally: Counter = Counter()
    for kind, group in docs:
        if group and kind is TaskKind.CLASSIFICATION:
            labels["classification"] = list(group[0].class_labels)
        if group and kind is TaskKind.EXTRACTION:
            labels["extraction"] = list(group[0].entity_labels)
        keep = [doc for doc in group if split == "all" or doc.split == split]
        vrdu += data.to_task_samples(keep, kind, tally)
    nlp = []
    if d.instructions and split in ("train", "all"):
        nlp = data.load_alpaca_like(d.instructions, errors=errors)
    for rid, msg in errors or ():
        log.warning("skipped record %s: %s", rid, msg)
    return vrdu, nlp, labels


def build_model(cfg: RunConfig) -> LayoutLLM:
    return LayoutLLM.build(cfg.encoder, cfg.decoder, seed=cfg.train.seed)


def latest_checkpoint(out_dir) -> Path:
    found = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.ckpt"))
    if not found:
        raise UsageError(f"no checkpoints under {Path(out_dir) / 'checkpoints'}; pass --checkpoint")
    return found[-1]


def load_model(cfg: RunConfig, ckpt) -> LayoutLLM:
    model = build_model(cfg)
    path = Path(ckpt) if ckpt else latest_checkpoint(cfg.output_dir)
    arrays, _ = checkpoint.load(path)
    checkpoint.load_state(model, arrays)
    return model


def read_labels(cfg: RunConfig) -> dict:
    path = Path(cfg.output_dir) / "labels.json"
    if path.is_file():
        return json.loads(path.read_text(encoding="utf-8"))
    return {}


# ---------------------------------------------------------------------------
# commands

def cmd_synth(args) -> int:
    spec = data.SyntheticSpec(n_docs=args.docs, n_classes=args.classes, seed=args.seed, n_test=args.test,
                              grid=args.grid)
    problems = spec.validate()
    if args.instructions < 0:
        problems.append("instructions must be >= 0")
    if problems:
        raise ConfigError(problems)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    docs = data.synth_generate(spec)
    data.write_jsonl(out / "classification.jsonl", [data.classification_record(d) for d in docs])
    data.write_jsonl(out / "extraction.jsonl", [data.extraction_record(d) for d in docs])
    data.write_jsonl(out / "qa.jsonl", [data.qa_record(d) for d in docs])
    data.write_jsonl(out / "instructions.jsonl", data.synth_instructions(args.instructions, args.seed))
    per_class = Counter(d.label for d in docs if d.split == "train")
    manifest = {
        "seed": args.seed,
        "n_docs": args.docs,
        "n_test": args.test,
        "n_classes": args.classes,
        "n_instructions": args.instructions,
        "grid": args.grid,
        "per_class": dict(sorted(per_class.items())),
        "files": ["classification.jsonl", "extraction.jsonl", "qa.jsonl", "instructions.jsonl"],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"wrote {len(docs)} documents and {args.instructions} instructions to {out}")
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    vrdu, nlp, labels = load_corpus(cfg, "train")
    if not vrdu and not nlp:
        raise UsageError("no training samples in the configured datasets")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(cfg.dump(), encoding="utf-8")
    (out / "labels.json").write_text(json.dumps(labels, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    model = build_model(cfg)

    def progress(rec, batch):
        if rec.step % 10 == 0:
            log.info("step %d epoch %d %s loss %.4f lr %.3g", rec.step, rec.epoch, rec.tag, rec.loss, rec.lr)

    result = train(model, vrdu, nlp, cfg.train, out_dir=out, resume_from=args.resume, on_step=progress)
    last = result.trace[-1] if result.trace else None
    if last is not None:
        print(f"trained {last.step} steps; final loss {last.loss:.4f}; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def format_table(reports) -> str:
    rows = [("task", "metric", "value", "n", "malformed")]
    for kind, r in reports.items():
        rows.append((kind.value, r.metric, f"{r.value:.3f}", str(r.n_samples), str(r.malformed_count)))
    widths = [max(len(row[i]) for row in rows) for i in range(5)]
    lines = []
    for row in rows:
        cells = [c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        lines.append("  ".join(cells))
    return "\n".join(lines)


def cmd_eval(args, cfg: RunConfig) -> int:
    model = load_model(cfg, args.checkpoint)
    vrdu, nlp, _ = load_corpus(cfg, args.split)
    samples = vrdu + nlp
    if not samples:
        raise UsageError(f"no samples in split {args.split!r}")
    out = Path(args.out) if args.out else Path(cfg.output_dir) / f"eval_{args.split}"
    reports = evaluate(model, samples, out_dir=out)
    print(format_table(reports))
    return EXIT_OK


def _document_prompt(kind: TaskKind, labels: dict, question: str | None):
    if kind is TaskKind.CLASSIFICATION:
        if not labels.get("classification"):
            raise UsageError("no classification labels known; train first or pass --labels")
        return prompts.render_prompt(kind, labels=labels["classification"])
    if kind is TaskKind.EXTRACTION:
        if not labels.get("extraction"):
            raise UsageError("no extraction labels known; train first or pass --labels")
        return prompts.render_prompt(kind, labels=labels["extraction"])
    return prompts.render_prompt(kind, question=question)


def cmd_predict(args, cfg: RunConfig) -> int:
    kind = TaskKind(args.task)
    if kind is TaskKind.NLP:
        raise UsageError("predict works on documents; use a classification, extraction or docqa task")
    doc = data.load_document(args.document)
    labels = read_labels(cfg)
    if args.labels:
        labels[kind.value] = [s.strip() for s in args.labels.split(",") if s.strip()]
    if kind is TaskKind.DOCQA and not args.question:
        raise UsageError("docqa needs --question")
    prompt = _document_prompt(kind, labels, args.question)
    model = load_model(cfg, args.checkpoint)
    print(model.answer(prompt, model.encode(doc)))
    return EXIT_OK


def cmd_repl(args, cfg: RunConfig, stdin=None, stdout=None) -> int:
    stdin = stdin or sys.stdin
    stdout = stdout or sys.stdout
    doc = data.load_document(args.document)
    model = load_model(cfg, args.checkpoint)
    feats = model.encode(doc)
    while True:
        stdout.write("question> ")
        stdout.flush()
        line = stdin.readline()
        if not line:
            stdout.write("\n")
            return EXIT_OK
        question = line.strip()
        if not question:
            continue
        prompt = prompts.render_prompt(TaskKind.DOCQA, question=question)
        stdout.write(model.answer(prompt, feats) + "\n")


# ---------------------------------------------------------------------------
# argument parsing

def _add_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML run configuration (defaults are used for anything it omits)")
    grp = p.add_argument_group("config overrides", "each replaces one field of the configuration file")
    for dotted, typ, default in config.override_fields():
        kind = {bool: "true|false", int: "INT", float: "FLOAT"}.get(typ, "TEXT")
        grp.add_argument(f"--{dotted}", dest=f"ov:{dotted}", metavar=kind, default=None,
                         help=f"(default: {default})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="doclm", description="Document-understanding language model at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic corpus")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--docs", type=int, default=32, help="training documents (default: 32)")
    p.add_argument("--classes", type=int, default=4, help="number of document classes (default: 4)")
    p.add_argument("--seed", type=int, default=7, help="generator seed (default: 7)")
    p.add_argument("--test", type=int, default=0, help="extra held-out documents (default: 0)")
    p.add_argument("--grid", type=int, default=32, help="page image side in pixels (default: 32)")
    p.add_argument("--instructions", type=int, default=0, help="text-only instruction records (default: 0)")

    p = sub.add_parser("train", help="fine-tune on the configured datasets")
    _add_overrides(p)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = sub.add_parser("eval", help="score a checkpoint on one split")
    _add_overrides(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: latest under output_dir)")
    p.add_argument("--split", default="test", help="train, test or all (default: test)")
    p.add_argument("--out", help="report directory (default: <output_dir>/eval_<split>)")

    p = sub.add_parser("predict", help="answer one task on one document")
    _add_overrides(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: latest under output_dir)")
    p.add_argument("--document", required=True, help="document record (.json, or first line of .jsonl)")
    p.add_argument("--task", required=True, choices=[k.value for k in TaskKind if k.is_vrdu])
    p.add_argument("--question", help="question for docqa")
    p.add_argument("--labels", help="comma-separated label set (default: labels saved by train)")

    p = sub.add_parser("repl", help="ask questions about one document interactively")
    _add_overrides(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: latest under output_dir)")
    p.add_argument("--document", required=True, help="document record (.json, or first line of .jsonl)")
    return parser


def run_config(args) -> RunConfig:
    overrides = {k[3:]: v for k, v in vars(args).items() if k.startswith("ov:") and v is not None}
    # only training needs the dataset files; the other commands check what they read
    need_paths = args.command in ("train", "eval")
    return config.load(args.config, overrides, check_paths=need_paths)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = run_config(args)
        if args.command == "eval" and args.split not in ("train", "test", "all"):
            raise UsageError(f"unknown split {args.split!r}")
        handler = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "repl": cmd_repl}[args.command]
        return handler(args, cfg)
    except (ConfigError, UsageError, DatasetError, RecordError, PromptError, EncoderError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, CheckpointError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
