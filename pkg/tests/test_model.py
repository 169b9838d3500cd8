import random

import numpy as np
import pytest
import torch

from conftest import (central_differences, fixed_vocab, frozen_sidb_inputs, make_example, random_example,
                      tiny_model)
from dialdecouple.model import collate
from dialdecouple.training import count_parameters


def _batch(seed=0, size=3, masked=True):
    rng = random.Random(seed)
    exs = [make_example(*random_example(rng), fixed_vocab()) for _ in range(size)]
    m = [rng.randrange(ex.packed.num_utterances) for ex in exs] if masked else None
    return exs, collate(exs, m)


def _grads(model):
    return {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}


def test_output_shapes_and_distributions():
    model = tiny_model(seed=0)
    exs, batch = _batch()
    out = model(batch)
    B, width = batch.size, 1 + batch.ctx_pos.shape[1]
    assert out.P_start.shape == out.P_end.shape == (B, width)
    assert out.P_S_pred.shape == batch.speaker_valid.shape
    assert (out.P_start.sum(-1) <= 1 + 1e-12).all()
    sums = out.P_U_pred.sum(-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)
    assert ((out.p_a > 0) & (out.p_a < 1)).all()


def test_unmasked_batch_has_no_speaker_predictions():
    model = tiny_model(seed=0)
    _, batch = _batch(masked=False)
    out = model(batch)
    assert out.P_S_pred is None
    assert model.losses(batch, out)["L_S"].item() == 0.0


def test_batched_equals_single_examples():
    model = tiny_model(seed=1)
    exs, batch = _batch(seed=1, size=4)
    out = model(batch)
    for b, ex in enumerate(exs):
        m = int(batch.masked_index[b])
        single = model(collate([ex], [m]))
        w = 1 + ex.packed.n
        assert torch.allclose(out.P_start[b, :w], single.P_start[0], atol=1e-12)
        assert torch.allclose(out.P_end[b, :w], single.P_end[0], atol=1e-12)
        assert (out.P_start[b, w:] == 0).all()
        N = ex.packed.num_utterances
        assert torch.allclose(out.P_S_pred[b, :N], single.P_S_pred[0], atol=1e-12)


def test_loss_components_sum_to_total():
    model = tiny_model(seed=2)
    _, batch = _batch(seed=2)
    parts = model.losses(batch, model(batch))
    assert parts["total"].item() == pytest.approx(sum(parts[k].item() for k in ("L_U", "L_S", "L_SE", "L_A")), abs=1e-12)


def test_total_gradient_is_sum_of_component_gradients():
    model = tiny_model(seed=3)
    _, batch = _batch(seed=3)
    per = {}
    for key in ("L_U", "L_S", "L_SE", "L_A", "total"):
        model.zero_grad()
        model.losses(batch, model(batch))[key].backward()
        per[key] = _grads(model)
    for name in per["total"]:
        combined = sum(per[k][name] for k in ("L_U", "L_S", "L_SE", "L_A"))
        assert torch.allclose(per["total"][name], combined, atol=1e-12), name


def test_speaker_loss_leaves_encoder_and_kidb_untouched():
    model = tiny_model(seed=4)
    _, batch = _batch(seed=4)
    model.zero_grad()
    model.losses(batch, model(batch))["L_S"].backward()
    for name, p in model.named_parameters():
        if name.startswith(("encoder.", "kidb.", "head.")):
            assert p.grad is None or (p.grad == 0).all(), name
    assert any((p.grad != 0).any() for p in model.sidb.parameters() if p.grad is not None)


def test_no_detach_lets_speaker_loss_reach_encoder():
    model = tiny_model(seed=4, no_detach=True)
    _, batch = _batch(seed=4)
    model.zero_grad()
    model.losses(batch, model(batch))["L_S"].backward()
    assert any(p.grad is not None and (p.grad != 0).any() for p in model.encoder.parameters())


def test_total_loss_gradient_check():
    model = tiny_model(seed=5)
    _, batch = _batch(seed=5)

    def f():
        return model.losses(batch, model(batch))["total"]

    model.zero_grad()
    f().backward()
    rng = np.random.default_rng(0)
    named = list(model.named_parameters())
    params, idx, analytic = [], [], []
    for _ in range(40):
        _, p = named[rng.integers(len(named))]
        i = int(rng.integers(p.numel()))
        params.append(p)
        idx.append(i)
        analytic.append(p.grad.view(-1)[i].item())
    # the SIDB input is detached, so its dependence on encoder weights is held fixed
    with frozen_sidb_inputs(model, batch):
        numeric = central_differences(f, params, idx, step=1e-5)
    analytic = np.array(analytic)
    rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    assert rel.max() < 1e-3


def test_variant_parameter_counts():
    vocab = ["[NONE]", "ann", "bob", "cy dee"]
    full = count_parameters(tiny_model(speaker_vocab=vocab))
    no_sidb = tiny_model(no_sidb=True, speaker_vocab=vocab)
    emb = tiny_model(speaker_emb=True, speaker_vocab=vocab)
    no_kidb = tiny_model(no_kidb=True, speaker_vocab=vocab)
    assert count_parameters(emb) - count_parameters(no_sidb) == len(vocab) * 8
    assert full - count_parameters(no_sidb) == count_parameters(tiny_model().sidb)
    assert full - count_parameters(no_kidb) == count_parameters(tiny_model().kidb)
    assert no_sidb.sidb is None and no_kidb.kidb is None


@pytest.mark.parametrize("flags", [dict(no_kidb=True), dict(no_sidb=True),
                                   dict(speaker_emb=True, speaker_vocab=["[NONE]", "ann", "bob", "cy dee"]),
                                   dict(no_detach=True), dict(no_kidb=True, no_sidb=True)])
def test_variants_run_and_train_step(flags):
    model = tiny_model(seed=6, **flags)
    exs, _ = _batch(seed=6)
    m = [0] * len(exs)
    batch = collate(exs, m, speaker_index=model.speaker_index)
    out = model(batch)
    losses = model.losses(batch, out)
    if flags.get("no_kidb"):
        assert out.P_U_pred is None and losses["L_U"] is None
    if model.sidb is None:
        assert losses["L_S"] is None
    losses["total"].backward()
    assert torch.isfinite(losses["total"])


def test_answerability_disabled_drops_loss():
    model = tiny_model(seed=7, answerability=False)
    _, batch = _batch(seed=7)
    out = model(batch)
    assert out.p_a is None
    assert model.losses(batch, out)["L_A"] is None
