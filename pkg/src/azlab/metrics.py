"""SQuAD v1.1 exact-match / F1 evaluation.

Normalization: lowercase, drop punctuation, drop the articles a/an/the as
whole words, collapse whitespace. A character counts as punctuation if it
is in ``string.punctuation`` (the official script's set) or its Unicode
category starts with "P".
"""
from __future__ import annotations

import json
import re
import string
import unicodedata
from collections import Counter
from typing import Iterable, Mapping

METRIC_KEYS = ("exact", "f1", "total", "HasAns_exact", "HasAns_f1", "HasAns_total")

_ASCII_PUNCT = frozenset(string.punctuation)
_ARTICLES = re.compile(r"\b(a|an|the)\b", re.UNICODE)


def _is_punct(ch: str) -> bool:
    return ch in _ASCII_PUNCT or unicodedata.category(ch).startswith("P")


def normalize_answer(s: str) -> str:
    s = s.lower()
    s = "".join(ch for ch in s if not _is_punct(ch))
    s = _ARTICLES.sub(" ", s)
    return " ".join(s.split())


def exact_match(prediction: str, golds: Iterable[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in golds))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    same = sum(common.values())
    if same == 0:
        return 0.0
    precision = same / len(pred_tokens)
    recall = same / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, golds: Iterable[str]) -> float:
    pred_tokens = normalize_answer(prediction).split()
    return max((_f1_single(pred_tokens, normalize_answer(g).split()) for g in golds),
               default=0.0)


def gold_answers(dataset: Mapping) -> dict[str, list[str]]:
    """qas_id -> gold answer texts, from a SQuAD-format document."""
    out = {}
    for article in dataset["data"]:
        for para in article["paragraphs"]:
            for qa in para["qas"]:
                out[str(qa["id"])] = [a["text"] for a in qa["answers"]]
    return out


def evaluate(dataset: Mapping, predictions: Mapping[str, str]) -> dict:
    golds = gold_answers(dataset)
    missing = [qid for qid in golds if qid not in predictions]
    if missing:
        shown = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise KeyError(f"{len(missing)} question(s) without a prediction: {shown}")
    total = len(golds)
    em = sum(exact_match(predictions[q], g) for q, g in golds.items())
    f1 = sum(f1_score(predictions[q], g) for q, g in golds.items())
    exact = 100.0 * em / total if total else 0.0
    f1 = 100.0 * f1 / total if total else 0.0
    return {"exact": exact, "f1": f1, "total": total,
            "HasAns_exact": exact, "HasAns_f1": f1, "HasAns_total": total}


def format_report(report: Mapping) -> str:
    """Single-line JSON, full float precision, fixed key order."""
    return json.dumps({k: report[k] for k in METRIC_KEYS})
