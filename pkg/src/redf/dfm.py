"""Dual-stream contrastive forecasting model (DFM) with MSP auxiliary modules."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import Tensor, nn

from .core import Config, InstanceStats, instance_denormalize, instance_normalize, unfold_patches
from .layers import EncoderUpdate, mse


@dataclass
class ForecastPair:
    y_orig: Tensor  # (B, C, H)
    y_pure: Tensor  # (B, C, H)


class MspModule(nn.Module):
    """Fuses the next window's embedding with the previous hidden state."""

    def __init__(self, d_model: int, n_heads: int, dropout: float):
        super().__init__()
        self.norm_embed = nn.LayerNorm(d_model)
        self.norm_hidden = nn.LayerNorm(d_model)
        self.fuse = nn.Linear(2 * d_model, d_model)
        self.encoder = EncoderUpdate(d_model, n_heads, dropout)

    def forward(self, embedded: Tensor, hidden: Tensor) -> Tensor:
        fused = self.fuse(torch.cat([self.norm_embed(embedded), self.norm_hidden(hidden)], dim=-1))
        return fused + self.encoder(fused)


class DfmModel(nn.Module):
    """Channel-independent patch forecaster.

    The patch embedding and output head are single modules used by the main path,
    by both streams and by every MSP module.
    """

    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        d = config.hidden_dim
        self.embedding = nn.Linear(config.patch_size, d)
        self.encoders = nn.ModuleList(
            EncoderUpdate(d, config.n_heads, config.dropout) for _ in range(config.encoder_layers)
        )
        self.head = nn.Linear(config.num_patches * d, config.horizon)
        self.msp = nn.ModuleList(
            MspModule(d, config.n_heads, config.dropout) for _ in range(config.msp_count)
        )

    def embed(self, x: Tensor) -> tuple[Tensor, InstanceStats]:
        """(B, C, L) -> normalized patch embeddings (B, C, N, D) and the window stats."""
        cfg = self.config
        x_norm, stats = instance_normalize(x, cfg.eps)
        return self.embedding(unfold_patches(x_norm, cfg.patch_size, cfg.patch_stride)), stats

    def encode(self, feats: Tensor) -> Tensor:
        b, c, n, d = feats.shape
        h = feats.reshape(b * c, n, d)
        for layer in self.encoders:
            h = h + layer(h)
        return h.view(b, c, n, d)

    def output(self, hidden: Tensor, stats: Optional[InstanceStats] = None) -> Tensor:
        y = self.head(hidden.flatten(start_dim=-2))
        return y if stats is None else instance_denormalize(y, stats)

    def forward(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Main path: forecast (B, C, H) in data units and final hidden state."""
        feats, stats = self.embed(x)
        hidden = self.encode(feats)
        return self.output(hidden, stats), hidden

    def msp_step(self, k: int, x_k: Tensor, hidden_prev: Tensor) -> tuple[Tensor, Tensor]:
        if not 1 <= k <= len(self.msp):
            raise IndexError(f"MSP module index {k} outside 1..{len(self.msp)}")
        feats, stats = self.embed(x_k)
        b, c, n, d = feats.shape
        hidden = self.msp[k - 1](feats.reshape(b * c, n, d), hidden_prev.reshape(b * c, n, d))
        hidden = hidden.view(b, c, n, d)
        return hidden, self.output(hidden, stats)

    def msp_chain(self, inputs: Sequence[Tensor], hidden0: Tensor) -> list[Tensor]:
        """Forecasts for X_1..X_n, each module fed the previous module's hidden state."""
        preds, hidden = [], hidden0
        for k, x_k in enumerate(inputs, start=1):
            hidden, y_k = self.msp_step(k, x_k, hidden)
            preds.append(y_k)
        return preds


def dual_stream_forward(model: DfmModel, x0: Tensor, x0_rec: Tensor) -> ForecastPair:
    """Run the original and purified windows through the same main path."""
    y_orig, _ = model(x0)
    y_pure, _ = model(x0_rec)
    return ForecastPair(y_orig, y_pure)


def dfm_loss(preds: Sequence[Tensor], targets: Sequence[Tensor], y_pure: Tensor,
             lambda_main: float = 0.5, lambda_msp: float = 0.5,
             lambda_contra: float = 1.0) -> Tensor:
    """Weighted main + MSP prediction loss plus the dual-stream contrastive term.

    ``preds[0]`` is the original-stream forecast; ``preds[k]`` the k-th MSP forecast.
    """
    if len(preds) != len(targets) or not preds:
        raise ValueError("need one target per forecast, main forecast first")
    loss_main = mse(preds[0], targets[0])
    loss_msp = sum((mse(p, t) for p, t in zip(preds[1:], targets[1:])), preds[0].new_zeros(()))
    loss_contra = mse(preds[0], y_pure)
    return lambda_main * loss_main + lambda_msp * loss_msp + lambda_contra * loss_contra
