"""Templated multi-party dialogue QA corpus with exact span answers.

Each dialogue carries one or more questions of type ``who-said``, ``what-did-say`` or
``which-mentions``. Speakers have persona words that make the masked-speaker
task solvable from content, but not perfectly.
"""

from __future__ import annotations

import itertools
import json
import random
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

from .data import AnswerSpan, Dialogue, Question, Utterance, to_records

NAME_POOL = ("rachel", "ross", "monica", "chandler", "joey", "phoebe", "emily waltham", "gunther", "janice")
STYLE_POOL = ("wow", "okay", "dude", "well", "honestly", "yeah", "oh", "hey", "listen", "look",
              "seriously", "hmm")
QUESTION_TYPES = ("who-said", "what-did-say", "which-mentions")

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


@dataclass
class SyntheticConfig:
    num_questions: int = 1000
    speaker_pool: int = 5
    min_speakers: int = 2
    max_speakers: int = 4
    min_utterances: int = 3
    max_utterances: int = 8
    vocab_size: int = 120
    unanswerable_fraction: float = 0.0
    # relative weights of who-said, what-did-say, which-mentions
    question_mix: tuple[float, float, float] = (1.0, 1.0, 1.0)
    style_prob: float = 0.6
    style_words_per_speaker: int = 2
    intro_prob: float = 0.25
    vocative_prob: float = 0.3
    id_prefix: str = "syn"
    # fixes the noun/verb split and speaker personas, so corpora drawn with
    # different sampling seeds describe the same world
    world_seed: int = 0
    questions_per_dialogue: int = 1

    def validate(self) -> None:
        if not 2 <= self.speaker_pool <= len(NAME_POOL):
            raise ValueError(f"speaker_pool must be in [2, {len(NAME_POOL)}]")
        if not 1 <= self.min_speakers <= self.max_speakers:
            raise ValueError("need 1 <= min_speakers <= max_speakers")
        if self.max_speakers > self.speaker_pool:
            raise ValueError("more speakers per dialogue than the speaker pool holds")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ValueError("need 1 <= min_utterances <= max_utterances")
        if self.min_utterances < self.min_speakers:
            raise ValueError("min_utterances must be at least min_speakers")
        if self.vocab_size < 4 * self.max_utterances:
            raise ValueError("vocab_size too small for distinct nouns and verbs per dialogue")
        if self.style_words_per_speaker * self.speaker_pool > len(STYLE_POOL):
            raise ValueError("not enough style words for every speaker")
        if not 0.0 <= self.unanswerable_fraction <= 1.0:
            raise ValueError("unanswerable_fraction must be in [0, 1]")
        if self.questions_per_dialogue < 1:
            raise ValueError("questions_per_dialogue must be at least 1")
        if self.num_questions < 0:
            raise ValueError("num_questions must be non-negative")
        if sum(self.question_mix) <= 0 or min(self.question_mix) < 0:
            raise ValueError("question_mix weights must be non-negative with a positive sum")


def content_words(n: int) -> list[str]:
    """Deterministic pronounceable pseudo-words."""
    syll = [c + v for c, v in itertools.product(_CONSONANTS, _VOWELS)]
    words = []
    for a, b in itertools.product(syll, syll):
        if a != b:
            words.append(a + b)
        if len(words) == n:
            break
    return words


class _Builder:
    def __init__(self, config: SyntheticConfig, rng: random.Random):
        self.c = config
        self.rng = rng
        world = random.Random(config.world_seed)
        words = content_words(config.vocab_size)
        world.shuffle(words)
        half = len(words) // 2
        self.nouns, self.verbs = words[:half], words[half:]
        self.names = list(NAME_POOL[:config.speaker_pool])
        style = list(STYLE_POOL)
        world.shuffle(style)
        k = config.style_words_per_speaker
        self.persona = {name: style[i * k:(i + 1) * k] for i, name in enumerate(self.names)}

    def speaker_sequence(self) -> list[str]:
        c, rng = self.c, self.rng
        n_utt = rng.randint(c.min_utterances, c.max_utterances)
        n_spk = rng.randint(c.min_speakers, min(c.max_speakers, n_utt))
        cast = rng.sample(self.names, n_spk)
        while True:
            seq = [rng.choice(cast) for _ in range(n_utt)]
            if set(seq) == set(cast) and all(a != b for a, b in zip(seq, seq[1:])):
                return seq
            if n_spk == 1:
                return seq

    def utterance(self, speaker: str, cast: list[str], verb: str, noun: str, intro: bool) -> list[str]:
        c, rng = self.c, self.rng
        words: list[str] = []
        others = [s for s in cast if s != speaker]
        if others and rng.random() < c.vocative_prob:
            words += rng.choice(others).split() + [","]
        if intro:
            words += ["this", "is"] + speaker.split() + [","]
        # persona word at a fixed offset from the end of the utterance
        if rng.random() < c.style_prob:
            words.append(rng.choice(self.persona[speaker]))
        words += ["i", verb, "the", noun]
        return words

    def _verbs(self, speakers: list[str], asks: list[tuple[str, Optional[int]]]) -> list[str]:
        """Verbs such that every what-did-say target's verb is unique for its speaker."""
        rng = self.rng
        N = len(speakers)
        pinned = {t for q, t in asks if t is not None}
        wanted = [t for q, t in asks if q == "what-did-say" and t is not None]
        for _ in range(100):
            verbs = [rng.choice(self.verbs) for _ in range(N)]
            for t in wanted:
                # another speaker may reuse the target verb, so the speaker binding matters
                others = [i for i in range(N) if speakers[i] != speakers[t] and i not in pinned]
                if others and rng.random() < 0.5:
                    verbs[rng.choice(others)] = verbs[t]
            if all(sum(1 for i in range(N) if speakers[i] == speakers[t] and verbs[i] == verbs[t]) == 1
                   for t in wanted):
                return verbs
        raise RuntimeError("could not satisfy verb uniqueness")

    def dialogue(self, idx: int, specs: list[tuple[str, bool]]):
        """One dialogue with a question per ``(qtype, answerable)`` in ``specs``."""
        c, rng = self.c, self.rng
        speakers = self.speaker_sequence()
        cast = sorted(set(speakers))
        N = len(speakers)
        nouns = rng.sample(self.nouns, N + 1)
        spare_noun = nouns.pop()
        n_answerable = sum(a for _, a in specs)
        targets = iter(rng.sample(range(N), min(n_answerable, N)) if n_answerable <= N
                       else [rng.randrange(N) for _ in range(n_answerable)])
        asks = [(q, next(targets) if a else None) for q, a in specs]
        verbs = self._verbs(speakers, asks)
        intros = [rng.random() < c.intro_prob for _ in range(N)]
        for q, t in asks:
            if q == "who-said" and t is not None:
                intros[t] = True
        utt_words = [self.utterance(speakers[i], cast, verbs[i], nouns[i], intros[i]) for i in range(N)]
        dialogue = Dialogue(tuple(Utterance(s, tuple(w)) for s, w in zip(speakers, utt_words)),
                            id=f"{c.id_prefix}-{idx}")
        used = set(zip(speakers, verbs))
        out = []
        for j, (qtype, target) in enumerate(asks):
            qid = f"{c.id_prefix}-{idx}-q{j}"
            if target is None:
                q = self.unanswerable_question(qtype, speakers, verbs, nouns, spare_noun, used)
                out.append((dialogue, Question.from_text(q, (), id=qid, qtype=qtype)))
                continue
            words = utt_words[target]
            if qtype == "who-said":
                q = f"who said the {nouns[target]} ?"
                span = (words.index("is") + 1, len(words) - 1)
            elif qtype == "what-did-say":
                q = f"what did {speakers[target]} {verbs[target]} ?"
                span = (len(words) - 3, len(words) - 1)
            else:
                q = f"which utterance mentions {nouns[target]} ?"
                span = (0, len(words) - 1)
            base = dialogue.utterance_offsets()[target]
            a_s, a_e = base + span[0], base + span[1]
            ans = AnswerSpan(target, a_s, a_e, dialogue.span_text(a_s, a_e))
            out.append((dialogue, Question.from_text(q, (ans,), id=qid, qtype=qtype)))
        return out

    def unanswerable_question(self, qtype, speakers, verbs, nouns, spare_noun, used) -> str:
        rng = self.rng
        if qtype == "who-said":
            return f"who said the {spare_noun} ?"
        if qtype == "what-did-say":
            for _ in range(100):
                s, v = rng.choice(self.names), rng.choice(self.verbs)
                if (s, v) not in used:
                    return f"what did {s} {v} ?"
        return f"which utterance mentions {spare_noun} ?"


def generate_synthetic(config: SyntheticConfig, rng: random.Random | int) -> list[tuple[Dialogue, Question]]:
    """Build ``config.num_questions`` (dialogue, question) pairs.

    Consecutive questions share a dialogue, ``questions_per_dialogue`` at a time;
    answerable questions on one dialogue target distinct utterances where possible.
    """
    config.validate()
    if not isinstance(rng, random.Random):
        rng = random.Random(rng)
    builder = _Builder(config, rng)
    total = config.num_questions
    n_unans = round(config.unanswerable_fraction * total)
    unans = set(rng.sample(range(total), n_unans))
    weights = list(config.question_mix)
    specs = [(rng.choices(QUESTION_TYPES, weights=weights)[0], i not in unans) for i in range(total)]
    corpus = []
    k = config.questions_per_dialogue
    for d_idx, first in enumerate(range(0, total, k)):
        corpus.extend(builder.dialogue(d_idx, specs[first:first + k]))
    return corpus


def write_corpus(corpus, path: str | Path, config: Optional[SyntheticConfig] = None) -> None:
    payload = to_records(corpus)
    if config is not None:
        payload["generator"] = asdict(config)
    Path(path).write_text(json.dumps(payload, indent=1) + "\n", encoding="utf-8")
