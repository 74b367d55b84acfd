"""Attention and encoder building blocks shared by the REM and DFM models."""

from __future__ import annotations

from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn


def gated_softmax(logits: Tensor, gate: Optional[Tensor] = None) -> Tensor:
    """Softmax over the last axis where ``gate`` multiplies the unnormalized weights.

    A gate entry of exactly 0 yields an attention weight of exactly 0, which is the
    forward behaviour of a -inf logit bias, while still letting gradients reach a
    straight-through gate. Every row of the gate must have a positive entry.
    """
    if gate is None:
        return torch.softmax(logits, dim=-1)
    shift = logits.masked_fill(gate <= 0, float("-inf")).amax(dim=-1, keepdim=True).detach()
    weights = torch.exp(logits - shift) * gate
    return weights / weights.sum(dim=-1, keepdim=True)


class MultiHeadAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.d_head = d_model // n_heads
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.attn_drop = nn.Dropout(dropout)
        self.last_weights: Optional[Tensor] = None
        self.keep_weights = False

    def forward(self, x: Tensor, gate: Optional[Tensor] = None,
                bias: Optional[Tensor] = None) -> Tensor:
        # x: (B, T, D); gate, bias: (B, T, T) shared by all heads
        b, t, d = x.shape
        q, k, v = self.qkv(x).view(b, t, 3, self.n_heads, self.d_head).permute(2, 0, 3, 1, 4)
        logits = q @ k.transpose(-1, -2) / self.d_head ** 0.5
        if bias is not None:
            logits = logits + bias.unsqueeze(1)
        weights = gated_softmax(logits, None if gate is None else gate.unsqueeze(1))
        if self.keep_weights:
            self.last_weights = weights.detach()
        out = self.attn_drop(weights) @ v
        return self.out(out.transpose(1, 2).reshape(b, t, d))


class FeedForward(nn.Module):
    def __init__(self, d_model: int, dropout: float = 0.0, expansion: int = 4):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(d_model, expansion * d_model),
            nn.GELU(),
            nn.Dropout(dropout),
            nn.Linear(expansion * d_model, d_model),
        )

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)


class FrequencyEncoderLayer(nn.Module):
    """Pre-LayerNorm encoder layer used by the REM views.

    The attention residual is taken from the normalized input:
        x' = LN(x);  x* = x' + MHSA(x');  out = FFN(LN(x*)) + x*
    """

    def __init__(self, d_model: int, n_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor, gate: Optional[Tensor] = None,
                bias: Optional[Tensor] = None) -> Tensor:
        normed = self.norm1(x)
        mixed = normed + self.drop(self.attn(normed, gate=gate, bias=bias))
        return mixed + self.drop(self.ffn(self.norm2(mixed)))


class EncoderUpdate(nn.Module):
    """Residual-free pre-LN encoder block; callers add the input back.

    ``x + EncoderUpdate(x)`` is a standard pre-LN Transformer layer, and zeroing the
    output projections of both sublayers makes the update exactly zero.
    """

    def __init__(self, d_model: int, n_heads: int = 4, dropout: float = 0.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.attn = MultiHeadAttention(d_model, n_heads, dropout)
        self.norm2 = nn.LayerNorm(d_model)
        self.ffn = FeedForward(d_model, dropout)
        self.drop = nn.Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        update = self.drop(self.attn(self.norm1(x)))
        return update + self.drop(self.ffn(self.norm2(x + update)))


def zero_output_projections(block: nn.Module) -> None:
    """Zero the last affine map of every attention and feed-forward sublayer."""
    with torch.no_grad():
        for module in block.modules():
            if isinstance(module, MultiHeadAttention):
                module.out.weight.zero_()
                module.out.bias.zero_()
            elif isinstance(module, FeedForward):
                module.net[-1].weight.zero_()
                module.net[-1].bias.zero_()


def mse(a: Tensor, b: Tensor) -> Tensor:
    return F.mse_loss(a, b, reduction="mean")
