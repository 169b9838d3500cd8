"""EM / F1 with SQuAD answer normalization, plus bucketing helpers."""

from __future__ import annotations

import re
import string
from collections import Counter, defaultdict
from typing import Iterable

INTERROGATIVES = ("who", "when", "what", "where", "why", "how")

_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)
_PUNCT = set(string.punctuation)


def normalize_answer(s: str) -> str:
    """Lower text and remove punctuation, articles and extra whitespace."""
    s = "".join(ch for ch in s.lower() if ch not in _PUNCT)
    return " ".join(_ARTICLES.sub(" ", s).split())


def exact_match(prediction: str, gold: str) -> float:
    return float(normalize_answer(prediction) == normalize_answer(gold))


def f1_score(prediction: str, gold: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    gold_toks = normalize_answer(gold).split()
    if not pred_toks or not gold_toks:
        # no-answer on either side: 1 only if both are empty
        return float(pred_toks == gold_toks)
    common = Counter(pred_toks) & Counter(gold_toks)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_toks)
    recall = same / len(gold_toks)
    return 2 * precision * recall / (precision + recall)


def score(prediction: str, golds: Iterable[str]) -> tuple[float, float]:
    """Max EM and max F1 over gold answers; an empty gold list means unanswerable."""
    golds = list(golds) or [""]
    return max(exact_match(prediction, g) for g in golds), max(f1_score(prediction, g) for g in golds)


def question_type(tokens: Iterable[str]) -> str:
    for tok in tokens:
        if tok in INTERROGATIVES:
            return tok
    return "other"


class Aggregate:
    """Running EM/F1 sums keyed by bucket."""

    def __init__(self):
        self.em = defaultdict(float)
        self.f1 = defaultdict(float)
        self.count = defaultdict(int)

    def add(self, key, em: float, f1: float) -> None:
        self.em[key] += em
        self.f1[key] += f1
        self.count[key] += 1

    def table(self) -> dict:
        return {
            str(k): {"EM": 100.0 * self.em[k] / self.count[k],
                     "F1": 100.0 * self.f1[k] / self.count[k],
                     "count": self.count[k]}
            for k in sorted(self.count, key=str)
        }
