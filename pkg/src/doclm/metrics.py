"""Classification accuracy, entity-level F1 and ANLS."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

from .tensor import ContractError


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance over code points."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def nls(pred: str, gold: str) -> float:
    """Normalized Levenshtein similarity of lowercased, trimmed strings."""
    p, g = pred.strip().lower(), gold.strip().lower()
    longest = max(len(p), len(g))
    if longest == 0:
        return 1.0
    return 1.0 - levenshtein(p, g) / longest


def anls_scores(preds: Sequence[str], golds: Sequence[Sequence[str]], tau: float = 0.5) -> list[float]:
    if len(preds) != len(golds):
        raise ContractError(f"anls: {len(preds)} predictions for {len(golds)} questions")
    scores = []
    for pred, answers in zip(preds, golds):
        if not answers:
            raise ContractError("anls: every question needs at least one gold answer")
        s = max(nls(pred, a) for a in answers)
        scores.append(s if s >= tau else 0.0)
    return scores


def anls(preds: Sequence[str], golds: Sequence[Sequence[str]], tau: float = 0.5) -> float:
    scores = anls_scores(preds, golds, tau)
    return sum(scores) / len(scores) if scores else 0.0


def _norm_pairs(pairs) -> Counter:
    return Counter((t.strip(), lab.strip()) for t, lab in pairs)


@dataclass
class F1Counts:
    matched: int
    n_pred: int
    n_gold: int

    @property
    def precision(self) -> float:
        return self.matched / self.n_pred if self.n_pred else 0.0

    @property
    def recall(self) -> float:
        return self.matched / self.n_gold if self.n_gold else 0.0

    @property
    def f1(self) -> float:
        p, r = self.precision, self.recall
        return 2 * p * r / (p + r) if p + r else 0.0


def entity_counts(preds: Sequence, golds: Sequence) -> F1Counts:
    if len(preds) != len(golds):
        raise ContractError(f"entity_f1: {len(preds)} predicted documents for {len(golds)} gold")
    matched = n_pred = n_gold = 0
    for p, g in zip(preds, golds):
        pc, gc = _norm_pairs(p), _norm_pairs(g)
        matched += sum((pc & gc).values())
        n_pred += sum(pc.values())
        n_gold += sum(gc.values())
    return F1Counts(matched, n_pred, n_gold)


def entity_f1(preds: Sequence, golds: Sequence) -> tuple[float, float, float]:
    """Micro-averaged (precision, recall, F1) over per-document (text, label) multisets."""
    c = entity_counts(preds, golds)
    return c.precision, c.recall, c.f1


def per_label_f1(preds: Sequence, golds: Sequence) -> dict[str, F1Counts]:
    labels = sorted({lab.strip() for doc in list(preds) + list(golds) for _, lab in doc})
    out = {}
    for label in labels:
        p = [[e for e in doc if e[1].strip() == label] for doc in preds]
        g = [[e for e in doc if e[1].strip() == label] for doc in golds]
        out[label] = entity_counts(p, g)
    return out


def classification_accuracy(preds: Sequence[str | None], golds: Sequence[str]) -> float:
    """Fraction of exact matches; ``None`` (a parser reject) is always wrong."""
    if len(preds) != len(golds):
        raise ContractError(f"accuracy: {len(preds)} predictions for {len(golds)} labels")
    if not golds:
        return 0.0
    return sum(p is not None and p == g for p, g in zip(preds, golds)) / len(golds)


@dataclass
class EvalReport:
    task: str
    metric: str
    value: float
    numerator: float
    denominator: float
    n_samples: int
    malformed_count: int = 0
    records: list[tuple[str, float]] = field(default_factory=list)
    breakdown: dict[str, dict] = field(default_factory=dict)

    def consistent(self, tol: float = 1e-12) -> bool:
        expected = self.numerator / self.denominator if self.denominator else 0.0
        return abs(expected - self.value) <= tol and 0.0 <= self.value <= 1.0

    def to_json(self) -> str:
        d = asdict(self)
        d["records"] = [list(r) for r in self.records]
        return json.dumps(d, sort_keys=True, indent=2)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        d = json.loads(text)
        d["records"] = [tuple(r) for r in d["records"]]
        return cls(**d)
