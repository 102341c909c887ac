import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doclm import prompts
from doclm.prompts import PromptError, TaskKind

TEMPLATE = (
    "The previous information is about document images.\n"
    "Below is an instruction that describes a task. Write a response that appropriately completes the request.\n"
    "\n### Instruction:\n{instruction}\n\n### Response:\n"
)

entity_text = st.text(st.characters(blacklist_characters="\n", blacklist_categories=("Cs",)), min_size=1, max_size=20)
entity_label = entity_text.filter(lambda s: ", " not in s)
entities = st.lists(st.tuples(entity_text, entity_label), max_size=8)


def test_template_asset_is_verbatim():
    assert prompts.template() == TEMPLATE


def test_classification_prompt():
    out = prompts.render_prompt(TaskKind.CLASSIFICATION, labels=["letter", "invoice"])
    assert out == TEMPLATE.format(
        instruction="Perform document classification. The classification labels are letter, invoice.")


def test_docqa_prompt():
    out = prompts.render_prompt(TaskKind.DOCQA, question="What is the date?")
    assert "### Instruction:\nPerform document question answering. The question is that What is the date?\n" in out
    assert out.startswith(prompts.DOC_PREAMBLE)


def test_extraction_prompt_mentions_separator_literally():
    out = prompts.render_prompt(TaskKind.EXTRACTION, labels=["company", "date"])
    assert "The classification labels are company, date." in out
    assert "use \\n as a separator" in out


def test_nlp_prompt_has_no_document_preamble():
    out = prompts.render_prompt(TaskKind.NLP, instruction="Reverse the word.", input="abc")
    assert not out.startswith(prompts.DOC_PREAMBLE)
    assert out.startswith(prompts.SCAFFOLD)
    assert "### Input:\nabc\n\n### Response:\n" in out


@pytest.mark.parametrize("kind,fields", [
    (TaskKind.CLASSIFICATION, {"labels": ["a", "b"]}),
    (TaskKind.EXTRACTION, {"labels": ["a"]}),
    (TaskKind.DOCQA, {"question": "Who?"}),
    (TaskKind.NLP, {"instruction": "Say hi."}),
])
def test_prompts_are_stable_and_scaffolded(kind, fields):
    a = prompts.render_prompt(kind, **fields)
    assert a.encode() == prompts.render_prompt(kind, **fields).encode()
    assert "Below is an instruction that describes a task." in a
    assert "### Instruction:" in a and "### Response:" in a


@pytest.mark.parametrize("kind,fields", [
    (TaskKind.CLASSIFICATION, {}),
    (TaskKind.CLASSIFICATION, {"labels": []}),
    (TaskKind.EXTRACTION, {}),
    (TaskKind.DOCQA, {}),
    (TaskKind.DOCQA, {"question": "  "}),
    (TaskKind.NLP, {}),
])
def test_missing_fields_rejected(kind, fields):
    with pytest.raises(PromptError):
        prompts.render_prompt(kind, **fields)


def test_serialize_examples():
    assert prompts.serialize_extraction_target([("TOTAL", "total")]) == "TOTAL, total"
    assert prompts.serialize_extraction_target(
        [("ACME", "company"), ("2019-05-01", "date")]) == "ACME, company\n2019-05-01, date"
    assert prompts.serialize_extraction_target([]) == ""


@pytest.mark.parametrize("bad", [[("", "x")], [("a\nb", "x")], [("a", "")], [("a", "x, y")], [("a", "x\n")]])
def test_serialize_rejects(bad):
    with pytest.raises(PromptError):
        prompts.serialize_extraction_target(bad)


def test_parse_examples():
    labels = {"company", "date", "total"}
    out = prompts.parse_extraction_output("ACME, company\n2019-05-01, date", labels)
    assert out.pairs == [("ACME", "company"), ("2019-05-01", "date")] and out.malformed_count == 0
    out = prompts.parse_extraction_output("garbage line", labels)
    assert out.pairs == [] and out.malformed_count == 1
    out = prompts.parse_extraction_output("1,000.00, total", labels)
    assert out.pairs == [("1,000.00", "total")]
    out = prompts.parse_extraction_output("x, unknown\n\nACME, company", labels)
    assert out.pairs == [("ACME", "company")] and out.malformed_count == 1


def test_parse_classification():
    labels = ["invoice", "letter"]
    assert prompts.parse_classification_output(" invoice\n", labels) == "invoice"
    assert prompts.parse_classification_output("Invoice", labels) is None
    assert prompts.parse_classification_output("", labels) is None


def test_roundtrip_examples():
    assert prompts.roundtrip([("a", "b")]) == [("a", "b")]
    assert prompts.roundtrip([("1,000, 00", "total"), ("x", "y")]) == [("1,000, 00", "total"), ("x", "y")]


@settings(max_examples=300, deadline=None)
@given(entities)
def test_roundtrip_property(ents):
    assert prompts.roundtrip(ents) == ents


@settings(max_examples=300, deadline=None)
@given(st.text(), st.lists(st.text(), max_size=4))
def test_parsers_are_total(s, labels):
    prompts.parse_extraction_output(s, labels)
    prompts.parse_classification_output(s, labels)


def test_task_sample_invariants():
    with pytest.raises(PromptError):
        prompts.TaskSample(TaskKind.DOCQA, "i", "p", "t")
    with pytest.raises(PromptError):
        prompts.TaskSample(TaskKind.NLP, "i", "p", "")
    assert not TaskKind.NLP.is_vrdu and TaskKind.EXTRACTION.is_vrdu
