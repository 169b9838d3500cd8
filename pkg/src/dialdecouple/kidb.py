"""Key-utterance information decoupling block."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .data import PackedInput
from .layers import BlockStack, ModelConfig, key_mask_to_additive, neg_inf


@dataclass
class NodeBundle:
    utterance_nodes: torch.Tensor  # (N, d)
    question_node: torch.Tensor  # (d,)
    token_nodes: torch.Tensor  # (n, d)
    cls_node: torch.Tensor  # (d,)
    utterance_positions: tuple[int, ...]
    question_position: int
    token_positions: tuple[int, ...]


@dataclass
class KeyUtteranceOutput:
    P_U_pred: torch.Tensor  # (B, N) or (N,)
    log_P_U_pred: torch.Tensor
    H_T_k: torch.Tensor  # (B, n, d) or (n, d)
    H_cls: torch.Tensor  # (B, d) or (d,)
    P_U_expand: Optional[torch.Tensor] = None


def gather_nodes(E: torch.Tensor, packed: PackedInput) -> NodeBundle:
    J = E.shape[0]
    if J != packed.length:
        raise ValueError(f"encoder output has {J} rows, packed input has {packed.length}")
    if len(packed.token_to_utterance) != packed.n:
        raise ValueError("token_to_utterance does not cover the context tokens")
    seps = packed.sep_positions
    if any(b <= a for a, b in zip(seps, seps[1:])) or seps[-1] >= J:
        raise ValueError("separator positions are not increasing inside the sequence")
    utt = list(seps[1:])
    ctx = list(packed.context_token_positions)
    return NodeBundle(
        utterance_nodes=E[utt],
        question_node=E[seps[0]],
        token_nodes=E[ctx],
        cls_node=E[packed.cls_position],
        utterance_positions=tuple(utt),
        question_position=seps[0],
        token_positions=tuple(ctx),
    )


def match_logits(X: torch.Tensor, Y: torch.Tensor, a: torch.Tensor) -> torch.Tensor:
    """a^T [X; Y; X-Y; X*Y] column-wise; X and Y are (..., N, d) row-major."""
    G = torch.cat([X, Y, X - Y, X * Y], dim=-1)
    return G @ a


def match(X: torch.Tensor, Y: torch.Tensor, a: torch.Tensor, activ: str,
          valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    logits = match_logits(X, Y, a)
    if activ == "softmax":
        if valid is not None:
            logits = logits.masked_fill(~valid, neg_inf(logits.dtype))
        return logits.softmax(dim=-1)
    if activ == "sigmoid":
        return torch.sigmoid(logits)
    raise ValueError(f"activ must be 'softmax' or 'sigmoid', got {activ!r}")


def expand_utterance_distribution(P_U: torch.Tensor, token_to_utterance: torch.Tensor) -> torch.Tensor:
    """Copy each utterance's probability onto its tokens."""
    return torch.gather(P_U, -1, token_to_utterance)


def key_utterance_loss(P_U_pred: torch.Tensor, p_target: Optional[int]) -> torch.Tensor:
    if p_target is None:
        return P_U_pred.new_zeros(())
    return -torch.log(P_U_pred[p_target])


class KIDB(nn.Module):
    """L unmasked blocks over [utterance nodes; question node; CLS; token nodes]."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.blocks = BlockStack(config, config.decoupling_layers)
        self.a = nn.Parameter(torch.empty(4 * config.d))
        std = config.initializer_range
        nn.init.trunc_normal_(self.a, std=std, a=-2 * std, b=2 * std)

    def forward(self, utt: torch.Tensor, question: torch.Tensor, cls: torch.Tensor,
                tokens: torch.Tensor, utt_valid: torch.Tensor, tok_valid: torch.Tensor) -> KeyUtteranceOutput:
        B, N, d = utt.shape
        x = torch.cat([utt, question[:, None], cls[:, None], tokens], dim=1)
        blocked = torch.cat([~utt_valid, utt_valid.new_zeros(B, 2), ~tok_valid], dim=1)
        h = self.blocks(x, key_mask_to_additive(blocked, x.dtype))
        H_U, H_q, H_cls, H_T = h[:, :N], h[:, N], h[:, N + 1], h[:, N + 2:]
        H_Q = H_q[:, None].expand(-1, N, -1)
        logits = match_logits(H_U, H_Q, self.a).masked_fill(~utt_valid, neg_inf(h.dtype))
        return KeyUtteranceOutput(
            P_U_pred=logits.softmax(-1),
            log_P_U_pred=logits.log_softmax(-1),
            H_T_k=H_T,
            H_cls=H_cls,
        )

    def forward_bundle(self, bundle: NodeBundle, token_to_utterance: Sequence[int]) -> KeyUtteranceOutput:
        """Single-example convenience wrapper around ``forward``."""
        N, n = bundle.utterance_nodes.shape[0], bundle.token_nodes.shape[0]
        out = self(
            bundle.utterance_nodes[None], bundle.question_node[None], bundle.cls_node[None],
            bundle.token_nodes[None],
            torch.ones(1, N, dtype=torch.bool), torch.ones(1, n, dtype=torch.bool),
        )
        owner = torch.as_tensor(list(token_to_utterance), dtype=torch.long)
        return KeyUtteranceOutput(
            P_U_pred=out.P_U_pred[0],
            log_P_U_pred=out.log_P_U_pred[0],
            H_T_k=out.H_T_k[0],
            H_cls=out.H_cls[0],
            P_U_expand=expand_utterance_distribution(out.P_U_pred[0], owner),
        )
