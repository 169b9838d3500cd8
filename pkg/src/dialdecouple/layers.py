"""Transformer building blocks shared by the encoder and both decoupling blocks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import torch
import torch.nn.functional as F
from torch import nn

VARIANTS = ("full", "no_kidb", "no_sidb", "speaker_emb", "no_detach")


def check_ablation_flags(no_kidb: bool, no_sidb: bool, speaker_emb: bool, no_detach: bool) -> None:
    """no_kidb combines with anything; the speaker-side flags are mutually exclusive."""
    if sum((no_sidb, speaker_emb, no_detach)) > 1:
        raise ValueError("at most one of no_sidb, speaker_emb, no_detach may be set")


class FullyMaskedRowError(RuntimeError):
    """Every key of some query row is blocked; the mask was built wrong."""


def neg_inf(dtype: torch.dtype) -> float:
    """Finite stand-in for -inf added before the softmax."""
    return -1e30 if dtype == torch.float64 else -1e9


@dataclass
class ModelConfig:
    vocab_size: int
    d: int = 64
    heads: int = 4
    total_layers: int = 4
    decoupling_layers: int = 2
    ff_width: Optional[int] = None
    max_len: int = 128
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12
    no_kidb: bool = False
    no_sidb: bool = False
    speaker_emb: bool = False
    no_detach: bool = False
    answerability: bool = True
    use_position_embeddings: bool = True
    initializer_range: float = 0.02
    # "normal" or "sinusoidal"; either way the position table stays trainable
    position_init: str = "normal"
    # speaker_emb ablation only; index 0 is reserved for "no speaker"
    speaker_vocab: list[str] = field(default_factory=list)

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")
        if not 1 <= self.decoupling_layers < self.total_layers:
            raise ValueError("need 1 <= decoupling_layers < total_layers")
        check_ablation_flags(self.no_kidb, self.no_sidb, self.speaker_emb, self.no_detach)
        if self.position_init not in ("normal", "sinusoidal"):
            raise ValueError(f"unknown position_init {self.position_init!r}")
        if self.ff_width is None:
            self.ff_width = 4 * self.d

    @property
    def head_dim(self) -> int:
        return self.d // self.heads

    @property
    def variant(self) -> str:
        names = [f for f in VARIANTS[1:] if getattr(self, f)]
        return "+".join(names) or "full"

    @property
    def uses_sidb(self) -> bool:
        return not (self.no_sidb or self.speaker_emb)

    @property
    def encoder_layers(self) -> int:
        return self.total_layers - self.decoupling_layers

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def init_weights(module: nn.Module, std: float = 0.02) -> None:
    if isinstance(module, (nn.Linear, nn.Embedding)):
        nn.init.trunc_normal_(module.weight, std=std, a=-2 * std, b=2 * std)
    if isinstance(module, nn.Linear) and module.bias is not None:
        nn.init.zeros_(module.bias)
    if isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def key_mask_to_additive(blocked: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    """(B, S) bool of blocked keys -> (B, 1, 1, S) additive mask."""
    mask = torch.zeros(blocked.shape, dtype=dtype, device=blocked.device)
    mask = mask.masked_fill(blocked, neg_inf(dtype))
    return mask[:, None, None, :]


class MultiHeadAttention(nn.Module):
    """softmax(QK^T / sqrt(d_k) + M) V per head, heads concatenated through W^O."""

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None,
                return_weights: bool = False):
        squeeze = x.dim() == 2
        if squeeze:
            x = x.unsqueeze(0)
        B, S, d = x.shape
        q = self.q(x).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        k = self.k(x).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        v = self.v(x).view(B, S, self.heads, self.head_dim).transpose(1, 2)
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if mask is not None:
            mask = _broadcast_mask(mask, x.dtype)
            if bool((mask <= neg_inf(x.dtype) / 2).all(dim=-1).any()):
                raise FullyMaskedRowError("attention row with every key masked")
            scores = scores + mask
        weights = scores.softmax(dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, S, d)
        out = self.o(out)
        if squeeze:
            out, weights = out[0], weights[0]
        return (out, weights) if return_weights else out


def _broadcast_mask(mask: torch.Tensor, dtype: torch.dtype) -> torch.Tensor:
    # accepted shapes: (S, S), (B, S, S), (B, 1|h, S|1, S)
    mask = mask.to(dtype)
    if mask.dim() == 2:
        return mask[None, None]
    if mask.dim() == 3:
        return mask[:, None]
    return mask


class TransformerBlock(nn.Module):
    """Post-LN block: LN(x + MHA(x, M)) then LN(x + FFN(x))."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = MultiHeadAttention(config.d, config.heads)
        self.ln1 = nn.LayerNorm(config.d, eps=config.layer_norm_eps)
        self.ff1 = nn.Linear(config.d, config.ff_width)
        self.ff2 = nn.Linear(config.ff_width, config.d)
        self.ln2 = nn.LayerNorm(config.d, eps=config.layer_norm_eps)
        self.drop = nn.Dropout(config.dropout)

    def multihead(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        """Attention sublayer with its residual connection and layer norm."""
        return self.ln1(x + self.drop(self.attn(x, mask)))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = self.multihead(x, mask)
        return self.ln2(x + self.drop(self.ff2(F.gelu(self.ff1(x)))))


class BlockStack(nn.Module):
    def __init__(self, config: ModelConfig, num_layers: int):
        super().__init__()
        self.layers = nn.ModuleList(TransformerBlock(config) for _ in range(num_layers))

    def forward(self, x: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        for layer in self.layers:
            x = layer(x, mask)
        return x


def sinusoidal_table(length: int, d: int) -> torch.Tensor:
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10000.0) * torch.arange(0, d, 2, dtype=torch.float64) / d)
    table = torch.zeros(length, d, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq[: d // 2])
    return table


class Embeddings(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.position_init = config.position_init
        self.tokens = nn.Embedding(config.vocab_size, config.d)
        self.positions = nn.Embedding(config.max_len, config.d) if config.use_position_embeddings else None
        self.ln = nn.LayerNorm(config.d, eps=config.layer_norm_eps)
        self.drop = nn.Dropout(config.dropout)

    def reset_positions(self, std: float) -> None:
        # sinusoid entries have std 1/sqrt(2); rescale to match the token table
        if self.positions is not None and self.position_init == "sinusoidal":
            table = sinusoidal_table(*self.positions.weight.shape) * (std * math.sqrt(2.0))
            with torch.no_grad():
                self.positions.weight.copy_(table.to(self.positions.weight.dtype))

    def forward(self, token_ids: torch.Tensor) -> torch.Tensor:
        x = self.tokens(token_ids)
        if self.positions is not None:
            pos = torch.arange(token_ids.shape[-1], device=token_ids.device)
            x = x + self.positions(pos)
        return self.drop(self.ln(x))


class Encoder(nn.Module):
    """Token + position embeddings followed by ``total_layers - decoupling_layers`` blocks."""

    def __init__(self, config: ModelConfig, num_layers: Optional[int] = None):
        super().__init__()
        self.max_len = config.max_len
        self.embeddings = Embeddings(config)
        self.blocks = BlockStack(config, config.encoder_layers if num_layers is None else num_layers)

    def forward(self, token_ids: torch.Tensor, pad_mask: Optional[torch.Tensor] = None) -> torch.Tensor:
        if token_ids.shape[-1] > self.max_len:
            raise ValueError(f"sequence length {token_ids.shape[-1]} exceeds max_len {self.max_len}")
        squeeze = token_ids.dim() == 1
        if squeeze:
            token_ids = token_ids[None]
            pad_mask = None if pad_mask is None else pad_mask[None]
        x = self.embeddings(token_ids)
        mask = None if pad_mask is None else key_mask_to_additive(pad_mask, x.dtype)
        x = self.blocks(x, mask)
        return x[0] if squeeze else x


def detach(state: torch.Tensor) -> torch.Tensor:
    """Same values, cut from the autograd graph."""
    return state.detach()
