"""Documents, byte tokenization, dataset loaders and the synthetic corpus generator.

All dataset files are UTF-8 JSON Lines; see ``docs/formats.md`` for the record
schemas. Boxes are stored in page pixels and normalized on load.
"""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import prompts
from .prompts import TaskKind, TaskSample

log = logging.getLogger(__name__)

COORD_MAX = 1000

RVL_CDIP_LABELS = (
    "letter", "form", "email", "handwritten", "advertisement", "scientific report",
    "scientific publication", "specification", "file folder", "news article", "budget",
    "invoice", "presentation", "questionnaire", "resume", "memo",
)
FUNSD_LABELS = ("answer", "header", "other", "question")


class DatasetError(ValueError):
    """A dataset file could not be read at all."""


class RecordError(ValueError):
    """A single record violates its schema."""

    def __init__(self, record_id, message: str):
        super().__init__(f"record {record_id}: {message}")
        self.record_id = record_id


# ---------------------------------------------------------------------------
# byte-level codec

class ByteCodec:
    """Bytes map to ids 0..255; BOS, EOS and PAD follow."""

    BOS = 256
    EOS = 257
    PAD = 258
    vocab_size = 259

    def encode(self, text: str | bytes) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        return list(text)

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        return bytes(i for i in ids if 0 <= i < 256)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")


CODEC = ByteCodec()


# ---------------------------------------------------------------------------
# documents

Box = tuple[int, int, int, int]


@dataclass
class Document:
    doc_id: str
    words: list[tuple[str, Box]]
    page_size: tuple[int, int]
    image: np.ndarray | None = None
    label: str | None = None
    entities: list[tuple[str, str]] | None = None
    qas: list[tuple[str, list[str]]] | None = None
    split: str = "train"
    class_labels: tuple[str, ...] = ()
    entity_labels: tuple[str, ...] = ()
    source: str = ""

    def __post_init__(self):
        w, h = self.page_size
        if w <= 0 or h <= 0:
            raise RecordError(self.doc_id, f"page size {self.page_size} must be positive")
        for text, (x0, y0, x1, y1) in self.words:
            if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
                raise RecordError(self.doc_id, f"box {(x0, y0, x1, y1)} of {text!r} outside page {w}x{h}")
        for question, answers in self.qas or ():
            if not answers:
                raise RecordError(self.doc_id, f"question {question!r} has no gold answer")

    def normalized_boxes(self) -> list[Box]:
        return [normalize_box(b, self.page_size) for _, b in self.words]


def normalize_box(box: Sequence[int], page_size: Sequence[int]) -> Box:
    """Scale a pixel box to integer coordinates in [0, 1000] by floor division."""
    w, h = page_size
    if w <= 0 or h <= 0:
        raise ValueError(f"page size {tuple(page_size)} has a zero dimension")
    x0, y0, x1, y1 = (int(c) for c in box)
    if not (0 <= x0 <= x1 <= w and 0 <= y0 <= y1 <= h):
        raise ValueError(f"box {tuple(box)} invalid for page {w}x{h}")
    return (x0 * COORD_MAX // w, y0 * COORD_MAX // h, x1 * COORD_MAX // w, y1 * COORD_MAX // h)


def render_image(boxes: Iterable[Box], size: int) -> np.ndarray:
    """Grayscale page (0 ink .. 255 paper) with every normalized word box inked by coverage."""
    ink = np.zeros((size, size))
    edges = np.arange(size + 1) * (COORD_MAX / size)
    for x0, y0, x1, y1 in boxes:
        cx = np.clip(np.minimum(edges[1:], x1) - np.maximum(edges[:-1], x0), 0, None)
        cy = np.clip(np.minimum(edges[1:], y1) - np.maximum(edges[:-1], y0), 0, None)
        cover = np.outer(cy, cx) / (COORD_MAX / size) ** 2
        np.maximum(ink, cover, out=ink)
    return np.rint(255.0 * (1.0 - ink)).astype(np.int64)


# ---------------------------------------------------------------------------
# loaders

def _read_jsonl(path) -> list[dict]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise DatasetError(f"cannot read {path}: {exc}") from exc
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DatasetError(f"{path}:{lineno}: expected a JSON object")
        records.append(rec)
    return records


def _base_document(rec: dict, index: int, source: str) -> Document:
    rid = rec.get("id", index)
    words, boxes = rec.get("words"), rec.get("boxes")
    if not isinstance(words, list) or not isinstance(boxes, list):
        raise RecordError(rid, "words and boxes must be lists")
    if len(words) != len(boxes):
        raise RecordError(rid, f"{len(words)} words but {len(boxes)} boxes")
    page = rec.get("page_size")
    if not (isinstance(page, list) and len(page) == 2):
        raise RecordError(rid, "page_size must be [width, height]")
    pairs = []
    for w, b in zip(words, boxes):
        if not isinstance(w, str) or not (isinstance(b, list) and len(b) == 4):
            raise RecordError(rid, f"malformed word/box {w!r} {b!r}")
        pairs.append((w, tuple(int(c) for c in b)))
    image = rec.get("image")
    if image is not None:
        image = np.asarray(image, dtype=np.int64)
        if image.ndim != 2:
            raise RecordError(rid, "image must be a 2-D grid")
    return Document(
        doc_id=str(rid), words=pairs, page_size=(int(page[0]), int(page[1])),
        image=image, split=str(rec.get("split", "train")), source=source,
    )


def load_document(path) -> Document:
    """A single document from a ``.json`` record or the first line of a ``.jsonl`` file.

    Any of the record schemas works; only the shared fields are read.
    """
    path = Path(path)
    if path.suffix == ".jsonl":
        records = _read_jsonl(path)
        if not records:
            raise DatasetError(f"{path}: no records")
        rec = records[0]
    else:
        try:
            rec = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, UnicodeDecodeError) as exc:
            raise DatasetError(f"cannot read {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DatasetError(f"{path}: invalid JSON ({exc.msg})") from exc
        if not isinstance(rec, dict):
            raise DatasetError(f"{path}: expected a JSON object")
    return _base_document(rec, 0, "file")


def _load(path, build, errors: list | None) -> list[Document]:
    docs = []
    for i, rec in enumerate(_read_jsonl(path)):
        try:
            docs.append(build(rec, i))
        except RecordError as exc:
            if errors is None:
                raise
            log.warning("skipping %s", exc)
            errors.append((exc.record_id, str(exc)))
    return docs


def _entities(rec: dict, rid) -> list[tuple[str, str]]:
    ents = rec.get("entities")
    if not isinstance(ents, list):
        raise RecordError(rid, "entities must be a list")
    out = []
    for e in ents:
        if not isinstance(e, dict) or not isinstance(e.get("text"), str) or not isinstance(e.get("label"), str):
            raise RecordError(rid, f"malformed entity {e!r}")
        text = " ".join(e["text"].splitlines())
        if not text:
            raise RecordError(rid, "entity with empty text")
        out.append((text, e["label"]))
    return out


def load_rvlcdip_like(path, label_set: Sequence[str] | None = None, errors: list | None = None) -> list[Document]:
    """Classification records: ``{id, split, page_size, words, boxes, image?, label}``."""

    def build(rec, i):
        doc = _base_document(rec, i, "rvlcdip")
        label = rec.get("label")
        if not isinstance(label, str) or not label:
            raise RecordError(doc.doc_id, "missing class label")
        if label_set is not None and label not in label_set:
            raise RecordError(doc.doc_id, f"label {label!r} not in label set")
        doc.label = label
        return doc

    docs = _load(path, build, errors)
    labels = tuple(label_set) if label_set is not None else tuple(sorted({d.label for d in docs}))
    for d in docs:
        d.class_labels = labels
    return docs


def _load_extraction(path, source, label_set, errors, relabel=None):
    def build(rec, i):
        doc = _base_document(rec, i, source)
        doc.entities = _entities(rec, doc.doc_id)
        if relabel is not None:
            doc.entities = [(t, relabel(lab)) for t, lab in doc.entities]
        if label_set is not None:
            bad = [lab for _, lab in doc.entities if lab not in label_set]
            if bad:
                raise RecordError(doc.doc_id, f"labels {bad} not in label set")
        return doc

    docs = _load(path, build, errors)
    labels = tuple(label_set) if label_set is not None else tuple(
        sorted({lab for d in docs for _, lab in d.entities})
    )
    for d in docs:
        d.entity_labels = labels
    return docs


def load_funsd_like(path, label_set: Sequence[str] | None = FUNSD_LABELS, errors: list | None = None) -> list[Document]:
    """Extraction records: ``{id, split, page_size, words, boxes, entities: [{text, label}]}``."""
    return _load_extraction(path, "funsd", label_set, errors)


def cord_category(label: str) -> str:
    """Coarse category of a fine CORD label: the part before the first dot."""
    return label.split(".", 1)[0]


def load_cord_like(
    path, granularity: str = "fine", label_set: Sequence[str] | None = None, errors: list | None = None
) -> list[Document]:
    """CORD-shaped extraction records with fine labels such as ``total.total_price``.

    ``granularity="coarse"`` maps every fine label to its category prefix.
    """
    if granularity not in ("fine", "coarse"):
        raise ValueError(f"granularity must be 'fine' or 'coarse', not {granularity!r}")
    relabel = cord_category if granularity == "coarse" else None
    return _load_extraction(path, "cord", label_set, errors, relabel)


def load_docvqa_like(path, errors: list | None = None) -> list[Document]:
    """QA records: ``{id, split, page_size, words, boxes, qas: [{question, answers}]}``."""

    def build(rec, i):
        doc = _base_document(rec, i, "docvqa")
        qas = rec.get("qas")
        if not isinstance(qas, list) or not qas:
            raise RecordError(doc.doc_id, "qas must be a non-empty list")
        parsed = []
        for qa in qas:
            if not isinstance(qa, dict) or not isinstance(qa.get("question"), str):
                raise RecordError(doc.doc_id, f"malformed qa {qa!r}")
            answers = qa.get("answers")
            if not isinstance(answers, list) or not answers or not all(isinstance(a, str) for a in answers):
                raise RecordError(doc.doc_id, f"question {qa['question']!r} needs >= 1 answer string")
            parsed.append((qa["question"], list(answers)))
        doc.qas = parsed
        return doc

    return _load(path, build, errors)


def load_alpaca_like(path, errors: list | None = None) -> list[TaskSample]:
    """Instruction records ``{instruction, input?, output}`` as text-only samples."""
    samples = []
    for i, rec in enumerate(_read_jsonl(path)):
        rid = rec.get("id", i)
        try:
            instruction, output = rec.get("instruction"), rec.get("output")
            if not isinstance(instruction, str) or not instruction.strip():
                raise RecordError(rid, "missing instruction")
            if not isinstance(output, str) or not output:
                raise RecordError(rid, "missing output")
            extra = rec.get("input") or None
            samples.append(TaskSample(
                kind=TaskKind.NLP,
                instruction=instruction,
                prompt=prompts.render_prompt(TaskKind.NLP, instruction=instruction, input=extra),
                target=output,
                source="alpaca",
                record_id=str(rid),
                gold=output,
            ))
        except RecordError as exc:
            if errors is None:
                raise
            errors.append((exc.record_id, str(exc)))
    return samples


# ---------------------------------------------------------------------------
# task samples

def to_task_samples(docs: Sequence[Document], kind: TaskKind, tally: Counter | None = None) -> list[TaskSample]:
    """One sample per document (classification, extraction) or per question (DocQA).

    Documents lacking the annotation ``kind`` needs are skipped and counted in
    ``tally[kind.value]``.
    """
    kind = TaskKind(kind)
    out = []
    for doc in docs:
        if kind is TaskKind.CLASSIFICATION:
            if not doc.label:
                _skip(tally, kind, doc)
                continue
            labels = doc.class_labels or (doc.label,)
            instruction = prompts.classification_instruction(labels)
            out.append(TaskSample(kind, instruction, prompts.wrap(instruction), doc.label, doc,
                                  doc.source, doc.doc_id, gold=doc.label, labels=tuple(labels)))
        elif kind is TaskKind.EXTRACTION:
            if not doc.entities:
                _skip(tally, kind, doc)
                continue
            labels = doc.entity_labels or tuple(sorted({lab for _, lab in doc.entities}))
            instruction = prompts.extraction_instruction(labels)
            target = prompts.serialize_extraction_target(doc.entities)
            out.append(TaskSample(kind, instruction, prompts.wrap(instruction), target, doc,
                                  doc.source, doc.doc_id, gold=list(doc.entities), labels=tuple(labels)))
        elif kind is TaskKind.DOCQA:
            if not doc.qas:
                _skip(tally, kind, doc)
                continue
            for qi, (question, answers) in enumerate(doc.qas):
                instruction = prompts.docqa_instruction(question)
                out.append(TaskSample(kind, instruction, prompts.wrap(instruction), answers[0], doc,
                                      doc.source, f"{doc.doc_id}/q{qi}", gold=list(answers)))
        else:
            raise ValueError("text-only samples come from load_alpaca_like or synth_instructions")
    return out


def _skip(tally, kind, doc):
    log.debug("no %s annotation on %s", kind.value, doc.doc_id)
    if tally is not None:
        tally[kind.value] += 1


# ---------------------------------------------------------------------------
# synthetic corpus

ENTITY_LABELS = ("company", "date", "total")
QUESTIONS = {
    "company": "What is the company name?",
    "date": "What is the date?",
    "total": "What is the total?",
}
_COMPANIES = (
    "ACME", "GLOBEX", "INITECH", "UMBRELLA", "HOOLI", "STARK", "WAYNE", "WONKA",
    "TYRELL", "CYBERDYNE", "SOYLENT", "VANDELAY", "MONARCH", "OSCORP", "PIED", "DUNDER",
)
_FILLER = ("ref", "item", "qty", "note", "page", "dept", "code", "memo", "sign", "copy")


@dataclass
class SyntheticSpec:
    n_docs: int = 32
    n_classes: int = 4
    seed: int = 7
    label_set: tuple[str, ...] = RVL_CDIP_LABELS
    grid: int = 32
    page_size: tuple[int, int] = (800, 1000)
    n_test: int = 0
    n_filler: int = 2

    def validate(self) -> list[str]:
        problems = []
        if self.n_docs < 1:
            problems.append("n_docs must be >= 1")
        if not 1 <= self.n_classes <= len(self.label_set):
            problems.append(f"n_classes must be in [1, {len(self.label_set)}] (size of the label vocabulary)")
        if self.grid < 1:
            problems.append("grid must be >= 1")
        if min(self.page_size) < 100:
            problems.append("page_size must be at least 100x100 pixels")
        if self.n_test < 0:
            problems.append("n_test must be >= 0")
        return problems


def class_keyword(label: str) -> str:
    return label.upper().replace(" ", "-")


def keyword_slot(spec: SyntheticSpec, class_index: int) -> tuple[int, int]:
    """Pixel x-range of the header slot reserved for ``class_index``."""
    width = spec.page_size[0] // spec.n_classes
    return class_index * width, (class_index + 1) * width


def _synth_document(spec: SyntheticSpec, index: int, classes: Sequence[str], rng: np.random.Generator) -> Document:
    w, h = spec.page_size
    cls = index % spec.n_classes
    label = classes[cls]
    words: list[tuple[str, Box]] = []

    # class keyword in its own header slot
    sx0, sx1 = keyword_slot(spec, cls)
    slot_w = sx1 - sx0
    kx0 = sx0 + int(rng.integers(0, max(1, slot_w // 5)))
    kx1 = min(sx1, kx0 + max(1, (slot_w * 3) // 5))
    ky0 = int(rng.integers(h // 40, h // 10))
    words.append((class_keyword(label), (kx0, ky0, kx1, ky0 + h // 25)))

    company = str(rng.choice(_COMPANIES))
    date = f"20{int(rng.integers(10, 30))}-{int(rng.integers(1, 13)):02d}-{int(rng.integers(1, 29)):02d}"
    total = f"{int(rng.integers(1, 100))}.{int(rng.integers(0, 100)):02d}"
    values = {"company": company, "date": date, "total": total}

    # body lines below the header band, in a random vertical order
    body_top = h // 4
    line_h = (h - body_top) // 6
    rows = rng.permutation(6)[: len(ENTITY_LABELS) + spec.n_filler]
    placed = []
    for row, name in zip(rows, list(ENTITY_LABELS) + [None] * spec.n_filler):
        y0 = body_top + int(row) * line_h + int(rng.integers(0, line_h // 4))
        y1 = y0 + line_h // 2
        text = values[name] if name else str(rng.choice(_FILLER))
        x0 = int(rng.integers(w // 20, w // 2))
        x1 = min(w, x0 + max(8, len(text) * w // 40))
        placed.append((y0, text, (x0, y0, x1, y1), name))
    placed.sort(key=lambda t: (t[0], t[2][0]))
    entities = []
    for _, text, box, name in placed:
        words.append((text, box))
        if name:
            entities.append((text, name))

    asked = str(rng.choice(ENTITY_LABELS))
    doc = Document(
        doc_id=f"synth-{spec.seed}-{index:05d}",
        words=words,
        page_size=(w, h),
        label=label,
        entities=entities,
        qas=[(QUESTIONS[asked], [values[asked]])],
        split="train" if index < spec.n_docs else "test",
        class_labels=tuple(sorted(classes)),
        entity_labels=ENTITY_LABELS,
        source="synthetic",
    )
    doc.image = render_image(doc.normalized_boxes(), spec.grid)
    return doc


def synth_generate(spec: SyntheticSpec) -> list[Document]:
    """Generate ``n_docs`` training documents followed by ``n_test`` held-out ones.

    Document ``i`` has class ``i mod n_classes`` and draws from its own child
    seed, so it is identical whatever the corpus size.
    """
    problems = spec.validate()
    if problems:
        raise ValueError("; ".join(problems))
    classes = tuple(spec.label_set[: spec.n_classes])
    total = spec.n_docs + spec.n_test
    children = np.random.SeedSequence(spec.seed).spawn(total)
    return [_synth_document(spec, i, classes, np.random.default_rng(children[i])) for i in range(total)]


def keyword_rule(doc: Document) -> str | None:
    """Trivial oracle classifier: the class whose keyword appears in the document."""
    texts = {t for t, _ in doc.words}
    for label in doc.class_labels:
        if class_keyword(label) in texts:
            return label
    return None


def synth_instructions(n: int, seed: int) -> list[dict]:
    """Tiny arithmetic/string instruction records in the instruction schema."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    records = []
    for i in range(n):
        a, b = int(rng.integers(0, 50)), int(rng.integers(0, 50))
        kind = i % 3
        if kind == 0:
            rec = {"instruction": f"Add {a} and {b}.", "output": str(a + b)}
        elif kind == 1:
            word = str(rng.choice(_FILLER))
            rec = {"instruction": "Reverse the word.", "input": word, "output": word[::-1]}
        else:
            rec = {"instruction": f"Is {a} larger than {b}?", "output": "yes" if a > b else "no"}
        rec["id"] = f"inst-{seed}-{i:05d}"
        records.append(rec)
    return records


def instruction_samples(records: Sequence[dict]) -> list[TaskSample]:
    return [
        TaskSample(
            kind=TaskKind.NLP,
            instruction=r["instruction"],
            prompt=prompts.render_prompt(TaskKind.NLP, instruction=r["instruction"], input=r.get("input")),
            target=r["output"],
            source="instructions",
            record_id=str(r.get("id", i)),
            gold=r["output"],
        )
        for i, r in enumerate(records)
    ]


# ---------------------------------------------------------------------------
# writers (inverse of the loaders)

def _doc_record(doc: Document) -> dict:
    rec = {
        "id": doc.doc_id,
        "split": doc.split,
        "page_size": list(doc.page_size),
        "words": [t for t, _ in doc.words],
        "boxes": [list(b) for _, b in doc.words],
    }
    if doc.image is not None:
        rec["image"] = np.asarray(doc.image).astype(int).tolist()
    return rec


def classification_record(doc: Document) -> dict:
    return {**_doc_record(doc), "label": doc.label}


def extraction_record(doc: Document) -> dict:
    return {**_doc_record(doc), "entities": [{"text": t, "label": lab} for t, lab in doc.entities or ()]}


def qa_record(doc: Document) -> dict:
    return {**_doc_record(doc), "qas": [{"question": q, "answers": list(a)} for q, a in doc.qas or ()]}


def write_jsonl(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, sort_keys=True))
            fh.write("\n")
