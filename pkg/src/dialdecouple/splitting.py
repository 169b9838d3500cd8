"""Split long dialogues into overlapping utterance windows and merge piece predictions."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

from .data import (AnswerSpan, Dialogue, Example, Question, SequenceTooLong, Utterance,
                   Vocabulary, pack, packed_length)

logger = logging.getLogger(__name__)


def _truncate(dialogue: Dialogue, question: Question, max_len: int) -> Dialogue:
    """Cut the tail of a lone over-long utterance so it packs within ``max_len``."""
    u = dialogue.utterances[0]
    overflow = packed_length(dialogue, question) - max_len
    keep = len(u) - overflow
    if keep < 1:
        raise SequenceTooLong(f"question plus speaker name alone exceed max_len {max_len}")
    logger.warning("utterance in %s truncated from %d to %d tokens", dialogue.id, len(u), keep)
    short = Utterance(u.speaker, u.words[:keep], u.text, u.offsets[:keep])
    return Dialogue((short,), id=dialogue.id)


def _windows(dialogue: Dialogue, question: Question, max_len: int, stride: int):
    N = len(dialogue)
    start = 0
    while True:
        end = start + 1
        while end < N and packed_length(dialogue.sub_dialogue(start, end + 1), question) <= max_len:
            end += 1
        yield start, end
        if end >= N:
            return
        start = max(end - stride, start + 1)


def split_long_context(dialogue: Dialogue, question: Question, vocab: Vocabulary, max_len: int,
                       stride: int = 1) -> list[Example]:
    """Pack ``dialogue`` into windows of whole utterances, ``stride`` utterances shared
    between neighbours. Each piece carries the gold span re-indexed into its own
    context coordinates, or ``None`` when the gold utterance is not inside it."""
    if stride < 0:
        raise ValueError("stride must be non-negative")
    gold = question.gold_answers[0] if question.gold_answers else None
    starts = dialogue.utterance_offsets()
    pieces = []
    for idx, (start, end) in enumerate(_windows(dialogue, question, max_len, stride)):
        sub = dialogue.sub_dialogue(start, end)
        if packed_length(sub, question) > max_len:
            sub = _truncate(sub, question, max_len)
        offset = starts[start]
        span: Optional[AnswerSpan] = None
        if gold is not None and start <= gold.utterance_index < end:
            s, e = gold.start_token - offset, gold.end_token - offset
            if e < sub.num_context_tokens:
                span = AnswerSpan(gold.utterance_index - start, s, e, gold.text)
        pieces.append(Example(
            dialogue=sub, question=question, packed=pack(sub, question, vocab, max_len),
            span=span, context_offset=offset, piece_index=idx,
            extra={"utterance_start": start},
        ))
    return pieces


@dataclass
class SpanPrediction:
    a_s: int
    a_e: int
    score: float
    p_a: Optional[float] = None
    answer_text: str = ""
    piece_index: int = 0


def merge_predictions(pieces: Sequence[Example], predictions: Sequence[SpanPrediction]) -> SpanPrediction:
    """Keep the piece whose best span scores highest (earliest piece on ties) and map
    its span back to full-dialogue coordinates. ``p_a`` is the max over pieces."""
    if not predictions:
        raise ValueError("no piece predictions to merge")
    best = 0
    for i, p in enumerate(predictions):
        if p.score > predictions[best].score:
            best = i
    p, ex = predictions[best], pieces[best]
    p_as = [q.p_a for q in predictions if q.p_a is not None]
    return SpanPrediction(
        a_s=p.a_s + ex.context_offset,
        a_e=p.a_e + ex.context_offset,
        score=p.score,
        p_a=max(p_as) if p_as else None,
        answer_text=ex.dialogue.span_text(p.a_s, p.a_e),
        piece_index=ex.piece_index,
    )
