import json
import random
from collections import Counter
from importlib import resources

import jsonschema
import pytest

from dialdecouple.data import load_squad_style
from dialdecouple.synthetic import QUESTION_TYPES, _Builder, SyntheticConfig, generate_synthetic, write_corpus


def _schema():
    return json.loads(resources.files("dialdecouple").joinpath("schema/dialogue_qa.schema.json").read_text())


def test_same_seed_same_bytes(tmp_path):
    config = SyntheticConfig(num_questions=200, unanswerable_fraction=0.1)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    write_corpus(generate_synthetic(config, 7), a, config)
    write_corpus(generate_synthetic(config, 7), b, config)
    assert a.read_bytes() == b.read_bytes()
    write_corpus(generate_synthetic(config, 8), b, config)
    assert a.read_bytes() != b.read_bytes()


def test_unanswerable_fraction_is_exact():
    corpus = generate_synthetic(SyntheticConfig(num_questions=1000, unanswerable_fraction=0.2), 0)
    assert sum(not q.answerable for _, q in corpus) == 200


def test_output_validates_and_round_trips(tmp_path):
    config = SyntheticConfig(num_questions=150, unanswerable_fraction=0.2)
    corpus = generate_synthetic(config, 3)
    path = tmp_path / "c.json"
    write_corpus(corpus, path, config)
    jsonschema.validate(json.loads(path.read_text()), _schema())
    loaded = load_squad_style(path, strict=True)
    assert len(loaded) == len(corpus)
    for (d1, q1), (d2, q2) in zip(corpus, loaded):
        assert [u.words for u in d1.utterances] == [u.words for u in d2.utterances]
        assert q1.gold_answers == q2.gold_answers
        assert q1.qtype == q2.qtype


def test_shape_limits_and_spans():
    config = SyntheticConfig(num_questions=500, speaker_pool=5, max_speakers=5, max_utterances=8)
    corpus = generate_synthetic(config, 1)
    types = Counter(q.qtype for _, q in corpus)
    assert set(types) == set(QUESTION_TYPES)
    for d, q in corpus:
        assert len(set(d.speakers)) <= 5 and len(d) <= 8
        for a in q.gold_answers:
            a.validate(d)
            assert d.span_text(a.start_token, a.end_token) == a.text
        if q.answerable and q.qtype != "which-mentions":
            gold = q.gold_answers[0]
            utt = d.utterances[gold.utterance_index]
            assert gold.text.endswith(" the " + utt.words[-1])
            if q.qtype == "who-said":
                assert gold.text.startswith(utt.speaker + " , ")
                assert q.tokens[-2] == utt.words[-1]
            else:
                assert gold.text.split()[0] == q.tokens[-2]


def test_what_did_say_answer_is_unique_to_speaker():
    corpus = generate_synthetic(SyntheticConfig(num_questions=300, question_mix=(0, 1, 0)), 2)
    for d, q in corpus:
        speaker, verb = q.tokens[2], q.tokens[-2]
        hits = [u for u in d.utterances if u.speaker.split()[0] == speaker and verb in u.words]
        assert len(hits) == 1


def test_invalid_configs_rejected():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(max_speakers=6, speaker_pool=5), 0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(unanswerable_fraction=1.5), 0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticConfig(vocab_size=10), 0)


def test_several_questions_share_a_dialogue():
    config = SyntheticConfig(num_questions=301, questions_per_dialogue=3, unanswerable_fraction=0.2)
    corpus = generate_synthetic(config, 5)
    assert len(corpus) == 301
    assert sum(not q.answerable for _, q in corpus) == 60
    by_dialogue = {}
    for d, q in corpus:
        by_dialogue.setdefault(d.id, (d, []))[1].append(q)
    assert len(by_dialogue) == 101
    for d, questions in by_dialogue.values():
        assert len({q.id for q in questions}) == len(questions)
        targets = [q.gold_answers[0].utterance_index for q in questions if q.answerable]
        if len(targets) <= len(d):
            assert len(set(targets)) == len(targets)
        for q in questions:
            if q.qtype == "what-did-say" and q.answerable:
                t = q.gold_answers[0].utterance_index
                verb = q.tokens[-2]
                same = [u for u in d.utterances if u.speaker == d.utterances[t].speaker and verb in u.words]
                assert len(same) == 1


def test_world_is_shared_across_sampling_seeds():
    config = SyntheticConfig(num_questions=200, question_mix=(0, 0, 1))
    a, b = _Builder(config, random.Random(1)), _Builder(config, random.Random(2))
    assert a.nouns == b.nouns and a.verbs == b.verbs and a.persona == b.persona
    nouns = set(a.nouns)
    for seed in (1, 2):
        assert {q.tokens[-2] for _, q in generate_synthetic(config, seed)} <= nouns
    other = _Builder(SyntheticConfig(world_seed=1), random.Random(1))
    assert other.nouns != a.nouns
