import random

import numpy as np
import pytest
import torch

from dialdecouple.data import Dialogue, Example, Question, Utterance, Vocabulary, pack
from dialdecouple.layers import ModelConfig
from dialdecouple.model import DecouplingModel
from dialdecouple.synthetic import SyntheticConfig, generate_synthetic

torch.set_num_threads(1)


def tiny_config(vocab_size=40, **kw):
    base = dict(vocab_size=vocab_size, d=8, heads=2, total_layers=2, decoupling_layers=1,
                max_len=64, dropout=0.0)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **kw):
    torch.manual_seed(seed)
    model = DecouplingModel(tiny_config(**kw)).to(dtype)
    model.eval()
    return model


def random_example(rng: random.Random, vocab_words=20, max_utts=5, max_words=4, names=("ann", "bob", "cy dee")):
    n_utt = rng.randint(2, max_utts)
    utts = []
    for _ in range(n_utt):
        words = tuple(f"w{rng.randrange(vocab_words)}" for _ in range(rng.randint(1, max_words)))
        utts.append(Utterance(rng.choice(names), words))
    dialogue = Dialogue(tuple(utts), id="r")
    k = rng.randrange(n_utt)
    start = dialogue.utterance_offsets()[k]
    a = start + rng.randrange(len(utts[k]))
    from dialdecouple.data import AnswerSpan
    span = AnswerSpan(k, a, a)
    question = Question(tokens=tuple(f"w{rng.randrange(vocab_words)}" for _ in range(rng.randint(0, 3))),
                        gold_answers=(span,))
    return dialogue, question


def fixed_vocab(vocab_words=20):
    return Vocabulary([f"w{i}" for i in range(vocab_words)] + ["ann", "bob", "cy", "dee"])


def make_example(dialogue, question, vocab):
    return Example(dialogue, question, pack(dialogue, question, vocab),
                   span=question.gold_answers[0] if question.gold_answers else None)


def central_differences(f, params, indices, step=1e-4):
    """Central finite differences of scalar ``f()`` at flat ``indices`` of each parameter."""
    out = []
    with torch.no_grad():
        for p, idx in zip(params, indices):
            flat = p.view(-1)
            orig = flat[idx].item()
            flat[idx] = orig + step
            up = f().item()
            flat[idx] = orig - step
            down = f().item()
            flat[idx] = orig
            out.append((up - down) / (2 * step))
    return np.array(out)


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic(SyntheticConfig(num_questions=64, unanswerable_fraction=0.25), 11)


class frozen_sidb_inputs:
    """Pin the SIDB's encoder-derived inputs to their values at entry.

    Finite differences of a loss with a stop-gradient must treat the detached
    tensor as a constant; this makes perturbed forward passes do the same.
    """

    def __init__(self, model, batch):
        self.model, self.batch = model, batch

    def __enter__(self):
        sidb = self.model.sidb
        recorded = {}

        def grab(module, args):
            recorded["args"] = tuple(a.detach().clone() for a in args[:4])

        h = sidb.register_forward_pre_hook(grab)
        with torch.no_grad():
            self.model(self.batch)
        h.remove()

        def pin(module, args):
            return recorded["args"] + tuple(args[4:])

        self.handle = sidb.register_forward_pre_hook(pin)
        return self

    def __exit__(self, *exc):
        self.handle.remove()
        return False
