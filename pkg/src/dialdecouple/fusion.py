"""Fusion of the two decoupled token views, gated span prediction and the joint objective."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .layers import neg_inf
from .sidb import binary_cross_entropy

LOG_EPS = 1e-12
DEFAULT_MAX_ANSWER_LEN = 30


class AnswerabilityDisabled(RuntimeError):
    pass


def fuse(H_k: torch.Tensor, H_s: torch.Tensor, W_f: nn.Linear) -> torch.Tensor:
    """Tanh(W_f [k; s; k-s; k*s]) row-wise."""
    if H_k.shape != H_s.shape:
        raise ValueError(f"shape mismatch {tuple(H_k.shape)} vs {tuple(H_s.shape)}")
    return torch.tanh(W_f(torch.cat([H_k, H_s, H_k - H_s, H_k * H_s], dim=-1)))


def span_distributions(start_logits: torch.Tensor, end_logits: torch.Tensor, gate: torch.Tensor,
                       valid: Optional[torch.Tensor] = None):
    """softmax(logits) * gate for start and end, without renormalizing."""
    if valid is not None:
        fill = neg_inf(start_logits.dtype)
        start_logits = start_logits.masked_fill(~valid, fill)
        end_logits = end_logits.masked_fill(~valid, fill)
    return start_logits.softmax(-1) * gate, end_logits.softmax(-1) * gate


def span_loss(P_start: torch.Tensor, P_end: torch.Tensor, a_s, a_e) -> torch.Tensor:
    """-(log P_start[a_s] + log P_end[a_e]); batched when a_s/a_e are index tensors."""
    if isinstance(a_s, torch.Tensor) and a_s.dim() == 1:
        ps = P_start.gather(-1, a_s[:, None])[:, 0]
        pe = P_end.gather(-1, a_e[:, None])[:, 0]
    else:
        ps, pe = P_start[..., a_s], P_end[..., a_e]
    return -(torch.log(ps + LOG_EPS) + torch.log(pe + LOG_EPS))


def answerability_loss(p_a: torch.Tensor, t_a) -> torch.Tensor:
    return binary_cross_entropy(p_a, torch.as_tensor(t_a, dtype=p_a.dtype))


def total_loss(L_U, L_S, L_SE, L_A=None):
    """Unweighted sum; ``None`` components contribute nothing."""
    return sum(x for x in (L_U, L_S, L_SE, L_A) if x is not None)


class FusionPrediction(nn.Module):
    def __init__(self, d: int, answerability: bool = True):
        super().__init__()
        self.W_f = nn.Linear(4 * d, d)
        self.w_start = nn.Linear(d, 1, bias=False)
        self.w_end = nn.Linear(d, 1, bias=False)
        self.answer_head = nn.Linear(d, 1) if answerability else None

    def fuse(self, H_k: torch.Tensor, H_s: torch.Tensor) -> torch.Tensor:
        return fuse(H_k, H_s, self.W_f)

    def spans(self, fused: torch.Tensor, gate: torch.Tensor, valid: Optional[torch.Tensor] = None):
        return span_distributions(self.w_start(fused)[..., 0], self.w_end(fused)[..., 0], gate, valid)

    def answerability(self, fused_cls: torch.Tensor) -> torch.Tensor:
        if self.answer_head is None:
            raise AnswerabilityDisabled("answerability head is disabled in this configuration")
        return torch.sigmoid(self.answer_head(fused_cls)[..., 0])


def extract_best_span(P_start, P_end, max_answer_len: int = DEFAULT_MAX_ANSWER_LEN,
                      segments: Optional[Sequence[int]] = None):
    """Best (a_s, a_e, score) with a_s <= a_e < a_s + max_answer_len.

    Ties go to the smallest a_s, then the smallest a_e. With ``segments`` (e.g. the
    utterance of each token) both ends must fall in the same segment.
    """
    ps = np.asarray(P_start, dtype=np.float64)
    pe = np.asarray(P_end, dtype=np.float64)
    n = ps.shape[0]
    if n == 0:
        raise ValueError("empty distributions")
    if max_answer_len < 1:
        raise ValueError("max_answer_len must be >= 1")
    scores = np.outer(ps, pe)
    i, j = np.indices((n, n))
    invalid = (j < i) | (j - i >= max_answer_len)
    if segments is not None:
        seg = np.asarray(segments)
        invalid |= seg[:, None] != seg[None, :]
    scores[invalid] = -1.0
    flat = int(np.argmax(scores))
    a_s, a_e = divmod(flat, n)
    return a_s, a_e, float(scores[a_s, a_e])
