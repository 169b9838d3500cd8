"""Dialogue data model, tokenization, sequence packing and label construction."""

from __future__ import annotations

import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

_TOKEN_RE = re.compile(r"\w+|[^\w\s]", re.UNICODE)

PAD, UNK, CLS, SEP, COLON = "[PAD]", "[UNK]", "[CLS]", "[SEP]", ":"
RESERVED = (PAD, UNK, CLS, SEP, COLON)
SCENE_SPEAKER = "scene"


class DataError(ValueError):
    """Malformed dialogue or question record."""

    def __init__(self, message: str, record_id: Optional[str] = None):
        self.record_id = record_id
        if record_id is not None:
            message = f"[{record_id}] {message}"
        super().__init__(message)


class AlignmentError(DataError):
    """Answer text does not match the dialogue at the stated offset."""


class SequenceTooLong(ValueError):
    pass


class SpeakerTaskInapplicable(ValueError):
    """Raised when a dialogue has a single utterance (no pair to compare)."""


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace and split punctuation into its own tokens.

    >>> tokenize("I left you!")
    ['i', 'left', 'you', '!']
    """
    return [m.group(0) for m in _TOKEN_RE.finditer(text.lower())]


def tokenize_with_offsets(text: str) -> tuple[list[str], list[tuple[int, int]]]:
    words, offsets = [], []
    for m in _TOKEN_RE.finditer(text.lower()):
        words.append(m.group(0))
        offsets.append((m.start(), m.end()))
    return words, offsets


def canonical_speaker(name: str) -> str:
    return name.strip().lower()


@dataclass(frozen=True)
class Utterance:
    speaker: str
    words: tuple[str, ...]
    text: str = ""
    # character (start, end) of each word inside ``text``
    offsets: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if not canonical_speaker(self.speaker):
            raise DataError("utterance has an empty speaker name")
        if len(self.words) < 1:
            raise DataError(f"utterance by {self.speaker!r} has no words")
        if not self.text:
            object.__setattr__(self, "text", " ".join(self.words))
        if not self.offsets:
            words, offsets = tokenize_with_offsets(self.text)
            if tuple(words) != tuple(self.words):
                # words were supplied directly; lay them out on a space-joined text
                offsets, pos = [], 0
                for w in self.words:
                    offsets.append((pos, pos + len(w)))
                    pos += len(w) + 1
            object.__setattr__(self, "offsets", tuple(offsets))

    @classmethod
    def from_text(cls, speaker: str, text: str) -> "Utterance":
        words, offsets = tokenize_with_offsets(text)
        return cls(speaker=speaker, words=tuple(words), text=text, offsets=tuple(offsets))

    @property
    def canonical_speaker(self) -> str:
        return canonical_speaker(self.speaker)

    def __len__(self) -> int:
        return len(self.words)


@dataclass(frozen=True)
class Dialogue:
    utterances: tuple[Utterance, ...]
    id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "utterances", tuple(self.utterances))
        if not self.utterances:
            raise DataError("dialogue has no utterances", self.id or None)

    def __len__(self) -> int:
        return len(self.utterances)

    @property
    def speakers(self) -> list[str]:
        return [u.canonical_speaker for u in self.utterances]

    def utterance_offsets(self) -> list[int]:
        """Context-token index of the first word of each utterance."""
        starts, total = [], 0
        for u in self.utterances:
            starts.append(total)
            total += len(u)
        return starts

    @property
    def num_context_tokens(self) -> int:
        return sum(len(u) for u in self.utterances)

    def locate(self, context_index: int) -> tuple[int, int]:
        """Map a context-token index to ``(utterance_index, word_index)``."""
        for k, u in enumerate(self.utterances):
            if context_index < len(u):
                return k, context_index
            context_index -= len(u)
        raise IndexError("context index out of range")

    def span_text(self, start: int, end: int) -> str:
        """Original text covered by inclusive context-token span ``[start, end]``."""
        k, i = self.locate(start)
        k2, j = self.locate(end)
        if k != k2:
            raise DataError("span crosses an utterance boundary", self.id or None)
        u = self.utterances[k]
        return u.text[u.offsets[i][0]:u.offsets[j][1]]

    def sub_dialogue(self, start: int, stop: int) -> "Dialogue":
        return Dialogue(self.utterances[start:stop], id=self.id)


@dataclass(frozen=True)
class AnswerSpan:
    utterance_index: int
    start_token: int
    end_token: int
    text: str = ""

    def __post_init__(self):
        if not 0 <= self.start_token <= self.end_token:
            raise DataError(f"bad answer span [{self.start_token}, {self.end_token}]")

    def validate(self, dialogue: Dialogue) -> None:
        n = dialogue.num_context_tokens
        if self.end_token >= n:
            raise DataError("answer span exceeds the context", dialogue.id or None)
        k1, _ = dialogue.locate(self.start_token)
        k2, _ = dialogue.locate(self.end_token)
        if not k1 == k2 == self.utterance_index:
            raise DataError("answer span not inside its utterance", dialogue.id or None)


@dataclass(frozen=True)
class Question:
    tokens: tuple[str, ...]
    gold_answers: tuple[AnswerSpan, ...] = ()
    id: str = ""
    text: str = ""
    qtype: str = ""

    def __post_init__(self):
        object.__setattr__(self, "tokens", tuple(self.tokens))
        object.__setattr__(self, "gold_answers", tuple(self.gold_answers))
        if not self.text:
            object.__setattr__(self, "text", " ".join(self.tokens))

    @classmethod
    def from_text(cls, text: str, gold_answers: Sequence[AnswerSpan] = (), **kw) -> "Question":
        return cls(tokens=tuple(tokenize(text)), gold_answers=tuple(gold_answers), text=text, **kw)

    @property
    def answerable(self) -> bool:
        return bool(self.gold_answers)


class Vocabulary:
    """Dense word -> id map with reserved ids for the packing symbols."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            if w not in self.stoi:
                self.stoi[w] = len(self.itos)
                self.itos.append(w)

    pad_id = 0
    unk_id = 1
    cls_id = 2
    sep_id = 3
    colon_id = 4

    @classmethod
    def build(cls, examples: Iterable[tuple[Dialogue, Question]], max_size: int = 2000,
              min_freq: int = 1) -> "Vocabulary":
        counts: Counter[str] = Counter()
        for dialogue, question in examples:
            counts.update(question.tokens)
            for u in dialogue.utterances:
                counts.update(tokenize(u.canonical_speaker))
                counts.update(u.words)
        for r in RESERVED:
            counts.pop(r, None)
        ranked = sorted((w for w, c in counts.items() if c >= min_freq), key=lambda w: (-counts[w], w))
        return cls(ranked[: max(0, max_size - len(RESERVED))])

    def __len__(self) -> int:
        return len(self.itos)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, words: Iterable[str]) -> list[int]:
        return [self.stoi.get(w, self.unk_id) for w in words]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return list(self.itos[len(RESERVED):])


@dataclass(frozen=True)
class PackedInput:
    token_ids: tuple[int, ...]
    sep_positions: tuple[int, ...]
    speaker_name_spans: tuple[tuple[int, int], ...]
    context_token_positions: tuple[int, ...]
    # utterance index of each entry of context_token_positions
    token_to_utterance: tuple[int, ...]
    cls_position: int = 0

    @property
    def length(self) -> int:
        return len(self.token_ids)

    @property
    def n(self) -> int:
        return len(self.context_token_positions)

    @property
    def num_utterances(self) -> int:
        return len(self.sep_positions) - 1

    @property
    def question_node_position(self) -> int:
        return self.sep_positions[0]

    @property
    def utterance_node_positions(self) -> tuple[int, ...]:
        return self.sep_positions[1:]

    def utterance_of(self, position: int) -> int:
        """Utterance index of a packed context-token position."""
        try:
            return self.token_to_utterance[self.context_token_positions.index(position)]
        except ValueError:
            raise KeyError(position) from None

    def utterance_lengths(self) -> list[int]:
        counts = [0] * self.num_utterances
        for k in self.token_to_utterance:
            counts[k] += 1
        return counts


def pack(dialogue: Dialogue, question: Question, vocab: Vocabulary,
         max_len: Optional[int] = None) -> PackedInput:
    """Lay out ``[CLS] question [SEP] S_1 : U_1 [SEP] ... S_N : U_N [SEP]``."""
    ids = [vocab.cls_id] + vocab.encode(question.tokens) + [vocab.sep_id]
    seps = [len(ids) - 1]
    name_spans, ctx, owner = [], [], []
    for k, u in enumerate(dialogue.utterances):
        name = tokenize(u.canonical_speaker)
        name_spans.append((len(ids), len(ids) + len(name) - 1))
        ids.extend(vocab.encode(name))
        ids.append(vocab.colon_id)
        for w in u.words:
            ctx.append(len(ids))
            owner.append(k)
            ids.append(vocab.stoi.get(w, vocab.unk_id))
        ids.append(vocab.sep_id)
        seps.append(len(ids) - 1)
    if max_len is not None and len(ids) > max_len:
        raise SequenceTooLong(f"packed length {len(ids)} exceeds max_len {max_len}")
    return PackedInput(
        token_ids=tuple(ids),
        sep_positions=tuple(seps),
        speaker_name_spans=tuple(name_spans),
        context_token_positions=tuple(ctx),
        token_to_utterance=tuple(owner),
    )


def packed_length(dialogue: Dialogue, question: Question) -> int:
    """Length ``pack`` would produce, without needing a vocabulary."""
    total = 1 + len(question.tokens) + 1
    for u in dialogue.utterances:
        total += len(tokenize(u.canonical_speaker)) + 1 + len(u) + 1
    return total


def key_utterance_target(span: Optional[AnswerSpan]) -> Optional[int]:
    return None if span is None else span.utterance_index


def speaker_targets(dialogue: Dialogue, m: int) -> list[int]:
    """Same-speaker labels of every utterance except ``m`` against utterance ``m``."""
    speakers = dialogue.speakers
    if not 0 <= m < len(speakers):
        raise IndexError(f"masked utterance {m} out of range")
    return [int(s == speakers[m]) for i, s in enumerate(speakers) if i != m]


def choose_masked_utterance(dialogue: Dialogue | int, rng: np.random.Generator) -> int:
    n = dialogue if isinstance(dialogue, int) else len(dialogue)
    if n < 2:
        raise SpeakerTaskInapplicable("speaker task needs at least two utterances")
    return int(rng.integers(n))


# --------------------------------------------------------------------------
# JSON loading

_UTTERANCE_KEYS = ("context", "utterances", "edus")


def _record_speaker(raw: dict) -> str:
    speaker = raw.get("speaker", raw.get("speakers"))
    if isinstance(speaker, list):
        speaker = " ".join(speaker)
    if speaker is None or not str(speaker).strip():
        return SCENE_SPEAKER
    return str(speaker)


def _parse_dialogue(record: dict, record_id: str) -> Dialogue:
    raw_utts = next((record[k] for k in _UTTERANCE_KEYS if isinstance(record.get(k), list)), None)
    if raw_utts is None:
        raise DataError("no utterance list", record_id)
    utts = []
    for raw in raw_utts:
        text = raw.get("text", raw.get("utterance"))
        if not isinstance(text, str):
            raise DataError("utterance without text", record_id)
        u_words, offsets = tokenize_with_offsets(text)
        if not u_words:
            raise DataError("utterance with no tokens", record_id)
        utts.append(Utterance(_record_speaker(raw), tuple(u_words), text, tuple(offsets)))
    return Dialogue(tuple(utts), id=record_id)


def align_answer(dialogue: Dialogue, utterance_index: int, char_start: int, text: str,
                 record_id: str = "") -> AnswerSpan:
    """Convert a character-offset answer inside one utterance to a context-token span."""
    if not 0 <= utterance_index < len(dialogue):
        raise AlignmentError(f"answer utterance {utterance_index} out of range", record_id)
    u = dialogue.utterances[utterance_index]
    char_end = char_start + len(text)
    if u.text[char_start:char_end] != text:
        raise AlignmentError(
            f"answer {text!r} not found at offset {char_start} of utterance {utterance_index}",
            record_id)
    hits = [i for i, (s, e) in enumerate(u.offsets) if s < char_end and e > char_start]
    if not hits:
        raise AlignmentError(f"answer {text!r} covers no tokens", record_id)
    base = dialogue.utterance_offsets()[utterance_index]
    return AnswerSpan(utterance_index, base + hits[0], base + hits[-1], text)


def parse_records(payload: dict, strict: bool = False) -> list[tuple[Dialogue, Question]]:
    records = payload.get("data", payload) if isinstance(payload, dict) else payload
    if isinstance(records, dict) and "dialogues" in records:
        records = records["dialogues"]
    out: list[tuple[Dialogue, Question]] = []
    for d_idx, record in enumerate(records):
        did = str(record.get("id", f"dialogue-{d_idx}"))
        try:
            dialogue = _parse_dialogue(record, did)
        except DataError:
            if strict:
                raise
            logger.warning("skipping dialogue %s", did, exc_info=True)
            continue
        for q_idx, qa in enumerate(record.get("qas", [])):
            qid = str(qa.get("id", f"{did}-q{q_idx}"))
            try:
                answers = []
                if not qa.get("is_impossible", False):
                    for ans in qa.get("answers", []):
                        utt = ans.get("utterance_id", ans.get("utterance_index"))
                        start = ans.get("answer_start", ans.get("inner_start"))
                        text = ans.get("text", ans.get("answer_text"))
                        if utt is None or start is None or text is None:
                            raise DataError("answer missing utterance_id/answer_start/text", qid)
                        answers.append(align_answer(dialogue, int(utt), int(start), text, qid))
                    if not answers:
                        raise DataError("answerable question without answers", qid)
                question = Question.from_text(qa["question"], answers, id=qid,
                                              qtype=qa.get("type", ""))
            except (DataError, KeyError) as exc:
                if strict:
                    raise exc if isinstance(exc, DataError) else DataError(str(exc), qid)
                logger.warning("skipping question %s: %s", qid, exc)
                continue
            out.append((dialogue, question))
    return out


def load_squad_style(path: str | Path, strict: bool = False) -> list[tuple[Dialogue, Question]]:
    """Read a SQuAD-v2-like dialogue QA file (context as a list of speaker/text objects)."""
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    return parse_records(payload, strict=strict)


def to_records(pairs: Iterable[tuple[Dialogue, Question]]) -> dict:
    """Inverse of ``parse_records``: group questions by dialogue into the JSON shape."""
    grouped: dict[str, dict] = {}
    for dialogue, question in pairs:
        rec = grouped.get(dialogue.id)
        if rec is None:
            rec = grouped[dialogue.id] = {
                "id": dialogue.id,
                "context": [{"speaker": u.speaker, "text": u.text} for u in dialogue.utterances],
                "qas": [],
            }
        answers = []
        starts = dialogue.utterance_offsets()
        for a in question.gold_answers:
            u = dialogue.utterances[a.utterance_index]
            local = a.start_token - starts[a.utterance_index]
            answers.append({"text": a.text, "utterance_id": a.utterance_index,
                            "answer_start": u.offsets[local][0]})
        qa = {"id": question.id, "question": question.text,
              "is_impossible": not question.answerable, "answers": answers}
        if question.qtype:
            qa["type"] = question.qtype
        rec["qas"].append(qa)
    return {"version": "dialogue-qa-1", "data": list(grouped.values())}


@dataclass
class Example:
    """A (dialogue, question) pair packed for the model, plus training labels."""
    dialogue: Dialogue
    question: Question
    packed: PackedInput
    span: Optional[AnswerSpan] = None
    # offset of this piece's first context token in the full dialogue
    context_offset: int = 0
    piece_index: int = 0
    extra: dict = field(default_factory=dict)

    @property
    def key_utterance(self) -> Optional[int]:
        return key_utterance_target(self.span)
