"""Speaker information decoupling block: detached input, masked speaker name, same-speaker matching."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .data import PackedInput
from .kidb import match_logits
from .layers import BlockStack, ModelConfig, detach, key_mask_to_additive, neg_inf

PROB_CLAMP = 1e-7


@dataclass
class SpeakerPredictionOutput:
    P_S_pred: torch.Tensor  # (B, N) batched, (N-1,) single example
    H_T_s: torch.Tensor
    H_cls: torch.Tensor
    logits: Optional[torch.Tensor] = None


def build_speaker_mask(packed: PackedInput, m: int, dtype: torch.dtype = torch.float32):
    """J x J additive mask blocking the key columns of utterance ``m``'s speaker name."""
    m_s, m_e = packed.speaker_name_spans[m]
    mask = torch.zeros(packed.length, packed.length, dtype=dtype)
    mask[:, m_s:m_e + 1] = neg_inf(dtype)
    return mask, (m_s, m_e)


def binary_cross_entropy(p: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
    """Elementwise BCE with probabilities clamped away from 0 and 1."""
    p = p.clamp(PROB_CLAMP, 1 - PROB_CLAMP)
    return -(t * torch.log(p) + (1 - t) * torch.log(1 - p))


def speaker_loss(P_S_pred: torch.Tensor, targets: Sequence[int] | torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(targets, dtype=P_S_pred.dtype)
    if t.numel() != P_S_pred.numel():
        raise ValueError("prediction and target lengths differ")
    if t.numel() == 0:
        return P_S_pred.new_zeros(())
    return binary_cross_entropy(P_S_pred, t).mean()


class SIDB(nn.Module):
    """L masked blocks over [speaker nodes; CLS; masked-name rows; token nodes].

    The masked utterance's speaker node stays in the speaker slots; the rows of its
    speaker-name tokens are present as queries but blocked as keys in every layer.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = BlockStack(config, config.decoupling_layers)
        self.a = nn.Parameter(torch.empty(4 * config.d))
        std = config.initializer_range
        nn.init.trunc_normal_(self.a, std=std, a=-2 * std, b=2 * std)

    def forward(self, utt: torch.Tensor, cls: torch.Tensor, names: torch.Tensor, tokens: torch.Tensor,
                utt_valid: torch.Tensor, tok_valid: torch.Tensor, masked_index: torch.Tensor,
                name_blocked: Optional[torch.Tensor] = None) -> SpeakerPredictionOutput:
        B, N, d = utt.shape
        K = names.shape[1]
        x = torch.cat([utt, cls[:, None], names, tokens], dim=1)
        if name_blocked is None:
            name_blocked = torch.ones(B, K, dtype=torch.bool, device=utt.device)
        blocked = torch.cat([~utt_valid, utt_valid.new_zeros(B, 1), name_blocked, ~tok_valid], dim=1)
        h = self.blocks(x, key_mask_to_additive(blocked, x.dtype))
        H_S, H_cls, H_T = h[:, :N], h[:, N], h[:, N + 1 + K:]
        idx = masked_index.clamp(min=0)
        H_sm = h[torch.arange(B), idx]
        logits = match_logits(H_S, H_sm[:, None].expand(-1, N, -1), self.a)
        return SpeakerPredictionOutput(P_S_pred=torch.sigmoid(logits), H_T_s=H_T, H_cls=H_cls, logits=logits)


def _single(sidb: SIDB, E: torch.Tensor, packed: PackedInput, m: Optional[int],
            detach_input: bool) -> SpeakerPredictionOutput:
    E_in = detach(E) if detach_input else E
    utt = E_in[list(packed.sep_positions[1:])]
    tokens = E_in[list(packed.context_token_positions)]
    cls = E_in[packed.cls_position]
    N, n = utt.shape[0], tokens.shape[0]
    if m is None:
        names = E_in[:0]
    else:
        m_s, m_e = packed.speaker_name_spans[m]
        names = E_in[m_s:m_e + 1]
    out = sidb(utt[None], cls[None], names[None], tokens[None],
               torch.ones(1, N, dtype=torch.bool), torch.ones(1, n, dtype=torch.bool),
               torch.tensor([-1 if m is None else m]))
    keep = [i for i in range(N) if i != m]
    return SpeakerPredictionOutput(
        P_S_pred=out.P_S_pred[0, keep] if m is not None else out.P_S_pred[0, :0],
        H_T_s=out.H_T_s[0],
        H_cls=out.H_cls[0],
        logits=out.logits[0, keep] if m is not None else out.logits[0, :0],
    )


def sidb_forward(sidb: SIDB, E: torch.Tensor, packed: PackedInput, m: Optional[int],
                 detach_input: bool = True) -> SpeakerPredictionOutput:
    """Run the block on one example's encoder output with utterance ``m``'s name masked.

    ``m=None`` (or a single-utterance dialogue) runs unmasked and yields no predictions.
    """
    if packed.num_utterances < 2:
        m = None
    return _single(sidb, E, packed, m, detach_input)


def inference_mode_sidb(sidb: SIDB, E: torch.Tensor, packed: PackedInput) -> torch.Tensor:
    return _single(sidb, E, packed, None, detach_input=True).H_T_s
