"""Prompt templates, target serialization and output parsing.

Extraction grammar (version 1)::

    target   := entity ("\\n" entity)*
    entity   := text ", " label

``text`` may itself contain ", "; parsing splits each line on the last
occurrence, so labels must not contain ", ".
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Iterable, Sequence

GRAMMAR_VERSION = 1
TEXT_SEP = ", "
ENTITY_SEP = "\n"

DOC_PREAMBLE = "The previous information is about document images."
SCAFFOLD = "Below is an instruction that describes a task. Write a response that appropriately completes the request."


class TaskKind(str, enum.Enum):
    CLASSIFICATION = "classification"
    EXTRACTION = "extraction"
    DOCQA = "docqa"
    NLP = "nlp_instruction"

    @property
    def is_vrdu(self) -> bool:
        return self is not TaskKind.NLP


class PromptError(ValueError):
    pass


@dataclass
class TaskSample:
    kind: TaskKind
    instruction: str
    prompt: str
    target: str
    doc: Any = None
    source: str = ""
    record_id: str = ""
    # gold values for scoring; the target string only carries the first DocQA answer
    gold: Any = None
    labels: tuple[str, ...] = ()

    def __post_init__(self):
        if self.kind.is_vrdu and self.doc is None:
            raise PromptError(f"{self.kind.value} sample {self.record_id!r} needs a document")
        if not self.target:
            raise PromptError(f"sample {self.record_id!r} has an empty target")


@dataclass
class ExtractionPrediction:
    pairs: list[tuple[str, str]] = field(default_factory=list)
    malformed_count: int = 0


def _template_text() -> str:
    return resources.files("doclm").joinpath("assets/prompt_template_v1.txt").read_text("utf-8")


_TEMPLATE = None


def template() -> str:
    global _TEMPLATE
    if _TEMPLATE is None:
        _TEMPLATE = _template_text()
    return _TEMPLATE


def _label_list(labels: Sequence[str]) -> str:
    if not labels:
        raise PromptError("a non-empty label set is required")
    return ", ".join(labels)


def classification_instruction(labels: Sequence[str]) -> str:
    return f"Perform document classification. The classification labels are {_label_list(labels)}."


def extraction_instruction(labels: Sequence[str]) -> str:
    return (
        "Perform document information extraction. "
        f"The classification labels are {_label_list(labels)}. "
        "The output format is a set of extraction words and their labels, separated by commas. "
        "If multiple extraction targets exist, use \\n as a separator and split the outputs."
    )


def docqa_instruction(question: str) -> str:
    if not question or not question.strip():
        raise PromptError("document question answering needs a question")
    return f"Perform document question answering. The question is that {question}"


def wrap(instruction: str, with_document: bool = True, input_text: str | None = None) -> str:
    """Place ``instruction`` into the template; drop the preamble line for text-only tasks."""
    text = template()
    if not with_document:
        text = text.split("\n", 1)[1]
    if input_text:
        text = text.replace("\n\n### Response:", f"\n\n### Input:\n{input_text}\n\n### Response:")
    return text.replace("{instruction}", instruction)


def render_prompt(kind: TaskKind, **fields) -> str:
    """Render the full prompt for ``kind``.

    Classification and extraction need ``labels``; DocQA needs ``question``;
    NLP instructions need ``instruction`` and accept ``input``.
    """
    kind = TaskKind(kind)
    if kind is TaskKind.CLASSIFICATION:
        if "labels" not in fields:
            raise PromptError("classification prompt needs labels")
        return wrap(classification_instruction(fields["labels"]))
    if kind is TaskKind.EXTRACTION:
        if "labels" not in fields:
            raise PromptError("extraction prompt needs labels")
        return wrap(extraction_instruction(fields["labels"]))
    if kind is TaskKind.DOCQA:
        if "question" not in fields:
            raise PromptError("docqa prompt needs a question")
        return wrap(docqa_instruction(fields["question"]))
    instruction = fields.get("instruction")
    if not instruction:
        raise PromptError("instruction prompt needs an instruction")
    return wrap(instruction, with_document=False, input_text=fields.get("input"))


def serialize_extraction_target(entities: Iterable[tuple[str, str]]) -> str:
    lines = []
    for text, label in entities:
        if not text:
            raise PromptError("entity text is empty")
        if "\n" in text or "\n" in label:
            raise PromptError(f"entity {text!r} contains a newline")
        if not label or TEXT_SEP in label:
            raise PromptError(f"invalid entity label {label!r}")
        lines.append(f"{text}{TEXT_SEP}{label}")
    return ENTITY_SEP.join(lines)


def parse_extraction_output(s: str, label_set: Iterable[str]) -> ExtractionPrediction:
    """Split generated text into (text, label) pairs; never raises."""
    labels = set(label_set)
    pred = ExtractionPrediction()
    if not s:
        return pred
    for line in s.split(ENTITY_SEP):
        if not line:
            continue
        text, sep, label = line.rpartition(TEXT_SEP)
        if not sep or not text or label not in labels:
            pred.malformed_count += 1
            continue
        pred.pairs.append((text, label))
    return pred


def parse_classification_output(s: str, label_set: Iterable[str]) -> str | None:
    """Exact match after trimming whitespace; ``None`` means rejected."""
    s = s.strip()
    return s if s and s in set(label_set) else None


def roundtrip(entities: Sequence[tuple[str, str]]) -> list[tuple[str, str]]:
    labels = {label for _, label in entities}
    return parse_extraction_output(serialize_extraction_target(entities), labels).pairs
