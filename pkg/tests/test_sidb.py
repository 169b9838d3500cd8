import math
import random

import pytest
import torch

from conftest import fixed_vocab, make_example, random_example, tiny_model
from dialdecouple.data import Dialogue, Question, Utterance, Vocabulary, pack
from dialdecouple.layers import neg_inf
from dialdecouple.sidb import (binary_cross_entropy, build_speaker_mask, inference_mode_sidb,
                               sidb_forward, speaker_loss)


def _pack(turns, question="who left"):
    dialogue = Dialogue(tuple(Utterance.from_text(s, t) for s, t in turns))
    q = Question.from_text(question)
    return dialogue, pack(dialogue, q, Vocabulary.build([(dialogue, q)]))


def test_mask_blocks_single_name_column():
    _, p = _pack([("joey", "hey"), ("ross", "i left")])
    mask, span = build_speaker_mask(p, 0, torch.float64)
    assert mask.shape == (13, 13)
    assert span == (4, 4)
    big = neg_inf(torch.float64)
    assert (mask[:, 4] == big).all()
    assert (mask[:, [j for j in range(13) if j != 4]] == 0).all()


def test_mask_two_token_name():
    _, p = _pack([("joey", "hey"), ("emily waltham", "i left")])
    mask, span = build_speaker_mask(p, 1)
    assert span[1] - span[0] == 1
    blocked = (mask != 0).sum(1)
    assert (blocked == 2).all()
    assert (mask[:, span[0]:span[1] + 1] != 0).all()


@pytest.mark.parametrize("P, t, expected", [
    ([0.5, 0.5], [1, 0], math.log(2)),
    ([1.0, 0.0], [1, 0], 0.0),
    ([0.8, 0.2], [1, 0], -math.log(0.8)),
])
def test_speaker_loss_examples(P, t, expected):
    loss = speaker_loss(torch.tensor(P, dtype=torch.float64), t)
    assert math.isclose(loss.item(), expected, abs_tol=2e-7)


def test_speaker_loss_rounded_values():
    assert round(speaker_loss(torch.tensor([0.5, 0.5]), [1, 0]).item(), 4) == 0.6931
    assert round(speaker_loss(torch.tensor([0.8, 0.2]), [1, 0]).item(), 4) == 0.2231


def test_bce_clamps_extremes():
    out = binary_cross_entropy(torch.tensor([0.0, 1.0], dtype=torch.float64), torch.tensor([1.0, 0.0], dtype=torch.float64))
    assert torch.isfinite(out).all()
    assert math.isclose(out[0].item(), -math.log(1e-7), rel_tol=1e-9)


def test_empty_targets_give_zero():
    assert speaker_loss(torch.zeros(0), []).item() == 0.0


def _encoded(model, p):
    ids = torch.tensor(p.token_ids)
    return model.encoder(ids)


def test_prediction_length_and_range():
    model = tiny_model(seed=0)
    _, p = _pack([("a", "x y"), ("b", "z"), ("a", "w")])
    out = sidb_forward(model.sidb, _encoded(model, p), p, m=1)
    assert out.P_S_pred.shape == (2,)
    assert ((out.P_S_pred > 0) & (out.P_S_pred < 1)).all()
    assert out.H_T_s.shape == (p.n, 8)


def test_single_utterance_has_no_predictions():
    model = tiny_model(seed=0)
    _, p = _pack([("a", "x y")])
    out = sidb_forward(model.sidb, _encoded(model, p), p, m=0)
    assert out.P_S_pred.numel() == 0


@pytest.mark.parametrize("seed", range(5))
def test_masked_rows_do_not_leak(seed):
    model = tiny_model(seed=seed)
    rng = random.Random(seed)
    ex = make_example(*random_example(rng), fixed_vocab())
    p = ex.packed
    E = _encoded(model, p).detach()
    m = rng.randrange(p.num_utterances)
    m_s, m_e = p.speaker_name_spans[m]
    base = sidb_forward(model.sidb, E, p, m)
    E2 = E.clone()
    E2[m_s:m_e + 1] = torch.randn(m_e - m_s + 1, 8, dtype=E.dtype) * 10
    out = sidb_forward(model.sidb, E2, p, m)
    assert (out.P_S_pred - base.P_S_pred).abs().max().item() <= 1e-9
    assert (out.H_T_s - base.H_T_s).abs().max().item() <= 1e-9
    assert (out.H_cls - base.H_cls).abs().max().item() <= 1e-9


def test_detached_input_blocks_encoder_gradient():
    model = tiny_model(seed=1)
    _, p = _pack([("a", "x y"), ("b", "z"), ("a", "w")])
    out = sidb_forward(model.sidb, _encoded(model, p), p, m=0)
    speaker_loss(out.P_S_pred, [0, 1]).backward()
    for name, prm in model.encoder.named_parameters():
        assert prm.grad is None or (prm.grad == 0).all(), name
    assert any(prm.grad is not None and (prm.grad != 0).any() for prm in model.sidb.parameters())


def test_undetached_input_reaches_encoder():
    model = tiny_model(seed=1)
    _, p = _pack([("a", "x y"), ("b", "z"), ("a", "w")])
    out = sidb_forward(model.sidb, _encoded(model, p), p, m=0, detach_input=False)
    speaker_loss(out.P_S_pred, [0, 1]).backward()
    assert any(prm.grad is not None and (prm.grad != 0).any() for prm in model.encoder.parameters())


def test_inference_mode_uses_no_mask():
    model = tiny_model(seed=2)
    _, p = _pack([("a", "x y"), ("b", "z")])
    E = _encoded(model, p)
    H = inference_mode_sidb(model.sidb, E, p)
    assert H.shape == (p.n, 8)
    assert torch.equal(H, sidb_forward(model.sidb, E, p, m=None).H_T_s)
    assert torch.equal(H, inference_mode_sidb(model.sidb, E, p))


def test_duplicate_utterances_receive_equal_scores():
    """Without positions a 1-layer stack cannot tell two identical turns apart."""
    model = tiny_model(seed=3, use_position_embeddings=False)
    _, p = _pack([("a", "x y"), ("b", "z"), ("b", "z")])
    out = sidb_forward(model.sidb, _encoded(model, p), p, m=0)
    assert torch.allclose(out.P_S_pred[0], out.P_S_pred[1], atol=1e-12)
