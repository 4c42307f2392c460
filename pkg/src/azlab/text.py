"""SQuAD v1.1 loading, vocabulary, offset-tracking tokenizer and windowed featurization."""
from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP = "[PAD]", "[UNK]", "[CLS]", "[SEP]"
RESERVED = (PAD, UNK, CLS, SEP)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)


class SquadFormatError(ValueError):
    pass


@dataclass
class SquadExample:
    qas_id: str
    question: str
    context: str
    answers: list[tuple[str, int]] = field(default_factory=list)

    @property
    def usable(self) -> bool:
        """True when every answer's offset points at its own text."""
        return bool(self.answers) and all(
            self.context[start:start + len(text)] == text for text, start in self.answers
        )


def _child(node, key, path):
    if not isinstance(node, dict):
        raise SquadFormatError(f"{path}: expected an object")
    if key not in node:
        raise SquadFormatError(f"{path}: missing key {key!r}")
    return node[key]


def _as_list(value, path):
    if not isinstance(value, list):
        raise SquadFormatError(f"{path}: expected a list")
    return value


def load_squad(document) -> list[SquadExample]:
    """Parse a SQuAD v1.1 document (dict, JSON text or bytes) into examples."""
    if isinstance(document, (str, bytes)):
        try:
            document = json.loads(document)
        except json.JSONDecodeError as exc:
            raise SquadFormatError(f"$: malformed JSON ({exc})") from None
    examples = []
    data = _as_list(_child(document, "data", "$"), "$.data")
    for a, article in enumerate(data):
        apath = f"$.data[{a}]"
        paragraphs = _as_list(_child(article, "paragraphs", apath), f"{apath}.paragraphs")
        for p, para in enumerate(paragraphs):
            ppath = f"{apath}.paragraphs[{p}]"
            context = _child(para, "context", ppath)
            if not isinstance(context, str):
                raise SquadFormatError(f"{ppath}.context: expected a string")
            for q, qa in enumerate(_as_list(_child(para, "qas", ppath), f"{ppath}.qas")):
                qpath = f"{ppath}.qas[{q}]"
                qas_id = _child(qa, "id", qpath)
                question = _child(qa, "question", qpath)
                answers = []
                for k, ans in enumerate(_as_list(_child(qa, "answers", qpath), f"{qpath}.answers")):
                    apath2 = f"{qpath}.answers[{k}]"
                    text = _child(ans, "text", apath2)
                    start = _child(ans, "answer_start", apath2)
                    if not isinstance(text, str) or not isinstance(start, int):
                        raise SquadFormatError(f"{apath2}: bad text/answer_start types")
                    answers.append((text, start))
                examples.append(SquadExample(str(qas_id), question, context, answers))
    return examples


def load_squad_file(path) -> list[SquadExample]:
    return load_squad(Path(path).read_text(encoding="utf-8"))


def read_dataset(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------- vocabulary

class Vocab:
    """Token <-> id map. Ids 0..3 are [PAD], [UNK], [CLS], [SEP]."""

    def __init__(self, tokens: Iterable[str], lowercase: bool = True):
        tokens = list(tokens)
        if tuple(tokens[: len(RESERVED)]) != RESERVED:
            raise ValueError(f"vocab must start with {RESERVED}")
        if len(set(tokens)) != len(tokens):
            raise ValueError("vocab has duplicate tokens")
        self.tokens = tokens
        self.lowercase = lowercase
        self._index = {t: i for i, t in enumerate(tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self._index

    def __eq__(self, other) -> bool:
        return (isinstance(other, Vocab) and self.tokens == other.tokens
                and self.lowercase == other.lowercase)

    def id(self, token: str) -> int:
        if self.lowercase:
            token = token.lower()
        return self._index.get(token, self._index[UNK])

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def cls_id(self) -> int:
        return self._index[CLS]

    @property
    def sep_id(self) -> int:
        return self._index[SEP]


def split_words(text: str) -> list[tuple[str, int, int]]:
    return [(m.group(), m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def build_vocab(corpus: Iterable[str], max_size: int, lowercase: bool = True) -> Vocab:
    """Keep the most frequent tokens; ties go to the lexicographically smaller one."""
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed the {len(RESERVED)} reserved tokens")
    counts: Counter[str] = Counter()
    for text in corpus:
        for word, _, _ in split_words(text):
            counts[word.lower() if lowercase else word] += 1
    for r in RESERVED:
        counts.pop(r, None)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max_size - len(RESERVED)]]
    return Vocab(list(RESERVED) + kept, lowercase=lowercase)


def tokenize(text: str, vocab: Vocab) -> list[tuple[int, tuple[int, int]]]:
    return [(vocab.id(w), (s, e)) for w, s, e in split_words(text)]


# ---------------------------------------------------------------- features

@dataclass(frozen=True)
class SequenceLayout:
    cls_index: int
    question_range: tuple[int, int]
    sep1_index: int
    passage_range: tuple[int, int]
    sep2_index: int
    pad_range: tuple[int, int]

    @property
    def length(self) -> int:
        return self.pad_range[1]

    @property
    def question_block(self) -> range:
        """[CLS], question tokens and the first [SEP]."""
        return range(self.cls_index, self.sep1_index + 1)

    @property
    def passage_block(self) -> range:
        """Passage tokens and the final [SEP]."""
        return range(self.passage_range[0], self.sep2_index + 1)

    def validate(self) -> None:
        q0, q1 = self.question_range
        p0, p1 = self.passage_range
        ok = (self.cls_index == 0 and q0 == 1 and q1 >= q0 and self.sep1_index == q1
              and p0 == q1 + 1 and p1 > p0 and self.sep2_index == p1
              and self.pad_range[0] == p1 + 1 and self.pad_range[1] >= self.pad_range[0])
        if not ok:
            raise ValueError(f"invalid layout {self}")


@dataclass
class Feature:
    qas_id: str
    window_index: int
    input_ids: list[int]
    segment_ids: list[int]
    layout: SequenceLayout
    # sequence position -> (char start, char end) in the context, passage tokens only
    token_to_orig: dict[int, tuple[int, int]]
    start_position: int | None = None
    end_position: int | None = None
    question_truncated: bool = False


def make_layout(question_len: int, passage_len: int, max_seq_length: int) -> SequenceLayout:
    sep1 = 1 + question_len
    p0 = sep1 + 1
    sep2 = p0 + passage_len
    layout = SequenceLayout(0, (1, sep1), sep1, (p0, sep2), sep2, (sep2 + 1, max_seq_length))
    layout.validate()
    return layout


def window_starts(n_tokens: int, capacity: int, doc_stride: int) -> list[int]:
    """Start offsets of passage windows; a stride wider than the window is clamped."""
    step = max(1, min(doc_stride, capacity))
    starts = [0]
    while starts[-1] + capacity < n_tokens:
        starts.append(starts[-1] + step)
    return starts


def featurize(
    example: SquadExample,
    vocab: Vocab,
    max_seq_length: int = 128,
    doc_stride: int = 32,
    max_query_length: int = 64,
) -> list[Feature]:
    passage = tokenize(example.context, vocab)
    if not passage:
        raise ValueError(f"{example.qas_id}: empty passage")
    question = [tid for tid, _ in tokenize(example.question, vocab)]

    budget = min(max_query_length, max_seq_length - 4)
    if budget < 0:
        raise ValueError("max_seq_length too small for [CLS] [SEP] [SEP] and one passage token")
    truncated = len(question) > budget
    if truncated:
        logger.warning("%s: question truncated from %d to %d tokens",
                       example.qas_id, len(question), budget)
        question = question[:budget]
    capacity = max_seq_length - len(question) - 3

    gold = None
    if example.answers and example.usable:
        gold = example.answers[0]

    features = []
    for w, start in enumerate(window_starts(len(passage), capacity, doc_stride)):
        chunk = passage[start:start + capacity]
        layout = make_layout(len(question), len(chunk), max_seq_length)
        n_pad = max_seq_length - layout.pad_range[0]
        input_ids = ([vocab.cls_id] + question + [vocab.sep_id]
                     + [tid for tid, _ in chunk] + [vocab.sep_id] + [vocab.pad_id] * n_pad)
        segment_ids = ([0] * (len(question) + 2) + [1] * (len(chunk) + 1) + [0] * n_pad)
        p0 = layout.passage_range[0]
        feature = Feature(
            qas_id=example.qas_id,
            window_index=w,
            input_ids=input_ids,
            segment_ids=segment_ids,
            layout=layout,
            token_to_orig={p0 + i: span for i, (_, span) in enumerate(chunk)},
            question_truncated=truncated,
        )
        if gold is not None:
            span = map_answer_span(feature, gold[1], gold[0])
            if span is not None:
                feature.start_position, feature.end_position = span
        features.append(feature)
    return features


def map_answer_span(feature: Feature, answer_start: int, answer_text: str
                    ) -> tuple[int, int] | None:
    """Smallest window token interval covering the answer's characters, if any."""
    stripped = answer_text.strip()
    if not stripped:
        return None
    a = answer_start + (len(answer_text) - len(answer_text.lstrip()))
    b = a + len(stripped)
    hits = sorted(i for i, (s, e) in feature.token_to_orig.items() if s < b and e > a)
    if not hits:
        return None
    if feature.token_to_orig[hits[0]][0] > a or feature.token_to_orig[hits[-1]][1] < b:
        return None
    return hits[0], hits[-1]


def featurize_all(examples, vocab, max_seq_length=128, doc_stride=32, max_query_length=64):
    out = []
    for ex in examples:
        out.extend(featurize(ex, vocab, max_seq_length, doc_stride, max_query_length))
    return out
