"""Full model: shared encoder, both decoupling blocks, fusion-prediction, and batching."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial
from typing import Optional, Sequence

import torch
from torch import nn

from .data import Example, speaker_targets
from .fusion import FusionPrediction, answerability_loss, span_loss, total_loss
from .kidb import KIDB, expand_utterance_distribution
from .layers import Encoder, ModelConfig, detach, init_weights
from .sidb import SIDB, binary_cross_entropy

NO_SPEAKER = "[NONE]"


@dataclass
class Batch:
    token_ids: torch.Tensor  # (B, J)
    pad_mask: torch.Tensor  # (B, J) True at padding
    utt_pos: torch.Tensor  # (B, N)
    utt_valid: torch.Tensor
    q_pos: torch.Tensor  # (B,)
    ctx_pos: torch.Tensor  # (B, n)
    ctx_valid: torch.Tensor
    ctx_owner: torch.Tensor  # (B, n) utterance index of each context token
    name_pos: torch.Tensor  # (B, K) masked speaker-name positions
    name_valid: torch.Tensor
    masked_index: torch.Tensor  # (B,) -1 when the speaker task is off
    speaker_target: torch.Tensor  # (B, N)
    speaker_valid: torch.Tensor  # (B, N) pairs that enter the speaker loss
    key_target: torch.Tensor  # (B,) -1 when unanswerable
    start: torch.Tensor  # (B,) index into [CLS; context tokens]
    end: torch.Tensor
    answerable: torch.Tensor  # (B,) float
    speaker_ids: torch.Tensor  # (B, 1 + n) speaker-table ids for [CLS; tokens]

    @property
    def size(self) -> int:
        return self.token_ids.shape[0]


def _pad(rows: Sequence[Sequence[int]], value: int = 0) -> torch.Tensor:
    width = max((len(r) for r in rows), default=0)
    out = torch.full((len(rows), width), value, dtype=torch.long)
    for i, r in enumerate(rows):
        if len(r):
            out[i, :len(r)] = torch.as_tensor(list(r), dtype=torch.long)
    return out


def _valid(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max((len(r) for r in rows), default=0)
    lengths = torch.tensor([len(r) for r in rows])
    return torch.arange(width)[None, :] < lengths[:, None]


def collate(examples: Sequence[Example], masked: Sequence[Optional[int]] | None = None,
            speaker_index: Optional[dict[str, int]] = None, pad_id: int = 0) -> Batch:
    """Pad a list of packed examples; ``masked[b]`` is the masked utterance or None."""
    if masked is None:
        masked = [None] * len(examples)
    packs = [ex.packed for ex in examples]
    names, m_idx, tgt_rows, tgt_valid, key, starts, ends, ans, spk = [], [], [], [], [], [], [], [], []
    for ex, m in zip(examples, masked):
        p = ex.packed
        N = p.num_utterances
        if m is not None and N >= 2:
            m_s, m_e = p.speaker_name_spans[m]
            names.append(range(m_s, m_e + 1))
            m_idx.append(m)
            t = speaker_targets(ex.dialogue, m)
            tgt_rows.append(t[:m] + [0] + t[m:])
            tgt_valid.append([i != m for i in range(N)])
        else:
            names.append(())
            m_idx.append(-1)
            tgt_rows.append([0] * N)
            tgt_valid.append([False] * N)
        if ex.span is not None:
            key.append(ex.span.utterance_index)
            starts.append(ex.span.start_token + 1)
            ends.append(ex.span.end_token + 1)
            ans.append(1.0)
        else:
            key.append(-1)
            starts.append(0)
            ends.append(0)
            ans.append(0.0)
        if speaker_index is not None:
            ids = [speaker_index.get(u.canonical_speaker, 0) for u in ex.dialogue.utterances]
            spk.append([0] + [ids[k] for k in p.token_to_utterance])
        else:
            spk.append([0] * (1 + p.n))
    N_max = max(p.num_utterances for p in packs)
    tv = torch.zeros(len(examples), N_max, dtype=torch.bool)
    tt = torch.zeros(len(examples), N_max)
    for b, (row, valid) in enumerate(zip(tgt_rows, tgt_valid)):
        tt[b, :len(row)] = torch.tensor(row, dtype=torch.float32)
        tv[b, :len(valid)] = torch.tensor(valid, dtype=torch.bool)
    token_rows = [p.token_ids for p in packs]
    return Batch(
        token_ids=_pad(token_rows, pad_id),
        pad_mask=~_valid(token_rows),
        utt_pos=_pad([p.sep_positions[1:] for p in packs]),
        utt_valid=_valid([p.sep_positions[1:] for p in packs]),
        q_pos=torch.tensor([p.sep_positions[0] for p in packs]),
        ctx_pos=_pad([p.context_token_positions for p in packs]),
        ctx_valid=_valid([p.context_token_positions for p in packs]),
        ctx_owner=_pad([p.token_to_utterance for p in packs]),
        name_pos=_pad(names),
        name_valid=_valid(names),
        masked_index=torch.tensor(m_idx),
        speaker_target=tt,
        speaker_valid=tv,
        key_target=torch.tensor(key),
        start=torch.tensor(starts),
        end=torch.tensor(ends),
        answerable=torch.tensor(ans),
        speaker_ids=_pad(spk),
    )


def _gather_rows(E: torch.Tensor, pos: torch.Tensor) -> torch.Tensor:
    return torch.gather(E, 1, pos[..., None].expand(-1, -1, E.shape[-1]))


@dataclass
class ModelOutput:
    P_start: torch.Tensor  # (B, 1 + n): index 0 is CLS
    P_end: torch.Tensor
    span_valid: torch.Tensor
    P_U_pred: Optional[torch.Tensor] = None
    log_P_U_pred: Optional[torch.Tensor] = None
    P_S_pred: Optional[torch.Tensor] = None
    p_a: Optional[torch.Tensor] = None
    E: Optional[torch.Tensor] = None


class DecouplingModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.encoder = Encoder(config)
        self.kidb = None if config.no_kidb else KIDB(config)
        self.sidb = SIDB(config) if config.uses_sidb else None
        self.speaker_table = None
        if config.speaker_emb:
            if not config.speaker_vocab:
                raise ValueError("speaker_emb variant needs a speaker vocabulary")
            self.speaker_table = nn.Embedding(len(config.speaker_vocab), config.d)
        self.head = FusionPrediction(config.d, config.answerability)
        self.apply(partial(init_weights, std=config.initializer_range))
        self.encoder.embeddings.reset_positions(config.initializer_range)

    @property
    def speaker_index(self) -> Optional[dict[str, int]]:
        if not self.config.speaker_vocab:
            return None
        return {s: i for i, s in enumerate(self.config.speaker_vocab)}

    def forward(self, batch: Batch) -> ModelOutput:
        E = self.encoder(batch.token_ids, batch.pad_mask)
        B = E.shape[0]
        tok_pos = torch.cat([torch.zeros(B, 1, dtype=torch.long), batch.ctx_pos], dim=1)
        tok_valid = torch.cat([torch.ones(B, 1, dtype=torch.bool), batch.ctx_valid], dim=1)
        utt = _gather_rows(E, batch.utt_pos)
        ctx = _gather_rows(E, batch.ctx_pos)
        cls = E[:, 0]

        out = ModelOutput(P_start=None, P_end=None, span_valid=tok_valid, E=E)
        if self.kidb is not None:
            q = E[torch.arange(B), batch.q_pos]
            k = self.kidb(utt, q, cls, ctx, batch.utt_valid, batch.ctx_valid)
            H_k = torch.cat([k.H_cls[:, None], k.H_T_k], dim=1)
            expand = expand_utterance_distribution(k.P_U_pred, batch.ctx_owner)
            gate = torch.cat([torch.ones(B, 1, dtype=E.dtype), expand], dim=1) * tok_valid
            out.P_U_pred, out.log_P_U_pred = k.P_U_pred, k.log_P_U_pred
        else:
            H_k = _gather_rows(E, tok_pos)
            gate = tok_valid.to(E.dtype)

        if self.sidb is not None:
            E_s = E if self.config.no_detach else detach(E)
            s = self.sidb(
                _gather_rows(E_s, batch.utt_pos), E_s[:, 0], _gather_rows(E_s, batch.name_pos),
                _gather_rows(E_s, batch.ctx_pos), batch.utt_valid, batch.ctx_valid,
                batch.masked_index,
            )
            H_s = torch.cat([s.H_cls[:, None], s.H_T_s], dim=1)
            if bool((batch.masked_index >= 0).any()):
                out.P_S_pred = s.P_S_pred
        elif self.speaker_table is not None:
            H_s = self.speaker_table(batch.speaker_ids)
        else:
            H_s = _gather_rows(E, tok_pos)

        fused = self.head.fuse(H_k, H_s)
        out.P_start, out.P_end = self.head.spans(fused, gate, tok_valid)
        if self.head.answer_head is not None:
            out.p_a = self.head.answerability(fused[:, 0])
        return out

    def losses(self, batch: Batch, out: ModelOutput) -> dict[str, Optional[torch.Tensor]]:
        """Per-component batch means and their unweighted sum under ``total``."""
        zero = out.P_start.new_zeros(())
        L_U = L_S = L_A = None
        if out.log_P_U_pred is not None:
            has = batch.key_target >= 0
            if bool(has.any()):
                lp = out.log_P_U_pred[has].gather(1, batch.key_target[has][:, None])[:, 0]
                L_U = -lp.mean()
            else:
                L_U = zero
        if self.sidb is not None:
            L_S = zero
            if out.P_S_pred is not None:
                rows = batch.masked_index >= 0
                valid = batch.speaker_valid[rows].to(out.P_S_pred.dtype)
                bce = binary_cross_entropy(out.P_S_pred[rows], batch.speaker_target[rows].to(out.P_S_pred.dtype))
                L_S = ((bce * valid).sum(1) / valid.sum(1)).mean()
        L_SE = span_loss(out.P_start, out.P_end, batch.start, batch.end).mean()
        if out.p_a is not None:
            L_A = answerability_loss(out.p_a, batch.answerable).mean()
        return {"L_U": L_U, "L_S": L_S, "L_SE": L_SE, "L_A": L_A,
                "total": total_loss(L_U, L_S, L_SE, L_A)}
