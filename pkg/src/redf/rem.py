"""Reconstruction-Elimination Model (REM).

A window is normalized, taken to the frequency domain, patched along the
frequency axis, modelled by a graph-masked channel attention (inter view) and an
unmasked patch attention (intra view), and projected back to a purified
time-domain window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .core import Config, InstanceStats, instance_denormalize, instance_normalize, unfold_patches
from .layers import FrequencyEncoderLayer, mse

# softplus(_UNIT_WEIGHT_RAW) == 1
_UNIT_WEIGHT_RAW = math.log(math.e - 1.0)
_PROB_CLAMP = 1e-6


@dataclass
class SpectralPair:
    real: Tensor  # (..., C, L)
    imag: Tensor  # (..., C, L)


@dataclass
class SimilarityGraph:
    distance: Tensor  # (B, N, C, C)
    similarity: Tensor  # (B, N, C, C)
    prob: Tensor  # (B, N, C, C), diagonal 1
    mask: Optional[Tensor]  # (B, N, C, C) gate in [0, 1], diagonal 1; None means attend everywhere
    bias: Optional[Tensor] = None  # additive log-probability logits (soft mask mode)


@dataclass
class RemOutput:
    recon: Tensor  # (B, C, L) data units
    recon_norm: Tensor  # (B, C, L) normalized space
    x_norm: Tensor
    spectra_in: SpectralPair
    spectra_rec: SpectralPair
    stats: InstanceStats
    graph: Optional[SimilarityGraph]


def dft(x: Tensor) -> SpectralPair:
    """Full L-point DFT along the last axis, unnormalized (sum over time)."""
    spec = torch.fft.fft(x, dim=-1)
    return SpectralPair(spec.real, spec.imag)


def idft(sp: SpectralPair) -> Tensor:
    """Inverse DFT with the 1/L factor; returns the real part.

    Learned spectra are not Hermitian, so the imaginary residue is discarded.
    """
    if sp.real.shape != sp.imag.shape:
        raise ValueError("real and imaginary parts must have the same shape")
    return torch.fft.ifft(torch.complex(sp.real, sp.imag), dim=-1).real


def patch_frequency(sp: SpectralPair, patch_size: int, stride: int) -> tuple[Tensor, Tensor]:
    """Patch both spectral components along frequency.

    Returns the inter view (..., N, C, 2p) and the intra view (..., C, N, 2p); the
    last axis holds the real patch followed by the imaginary patch.
    """
    intra = torch.cat(
        [unfold_patches(sp.real, patch_size, stride), unfold_patches(sp.imag, patch_size, stride)],
        dim=-1,
    )
    return intra.transpose(-3, -2), intra


def relaxed_bernoulli(prob: Tensor, temperature: float, noise: Optional[Tensor] = None,
                      hard: bool = True) -> Tensor:
    """Gumbel-sigmoid sample of a Bernoulli(prob) mask.

    With ``hard`` the forward value is 0/1 and the gradient is that of the
    relaxed sample (straight-through).
    """
    p = prob.clamp(_PROB_CLAMP, 1 - _PROB_CLAMP)
    if noise is None:
        noise = torch.rand_like(p)
    u = noise.clamp(_PROB_CLAMP, 1 - _PROB_CLAMP)
    logits = torch.log(p) - torch.log1p(-p) + torch.log(u) - torch.log1p(-u)
    soft = torch.sigmoid(logits / temperature)
    if not hard:
        return soft
    return (soft > 0.5).to(soft.dtype) - soft.detach() + soft


def build_graph(inter: Tensor, weight_raw: Tensor, eps: float, temperature: float,
                training: bool, mask_mode: str = "binary", hard: bool = True,
                noise: Optional[Tensor] = None) -> SimilarityGraph:
    """Channel similarity graph per frequency patch from (..., N, C, D) features.

    Weighted L1 distance of feature magnitudes, inverted to a similarity, mapped to
    a Bernoulli probability by dividing each row by its largest off-diagonal
    similarity (self-probability fixed at 1), then sampled into a mask.
    """
    mags = inter.abs()
    w = F.softplus(weight_raw)
    diff = (mags.unsqueeze(-2) - mags.unsqueeze(-3)).abs()  # (..., C, C, D)
    distance = (diff * w).sum(dim=-1)
    distance = 0.5 * (distance + distance.transpose(-1, -2))
    similarity = 1.0 / (distance + eps)

    c = inter.shape[-2]
    eye = torch.eye(c, dtype=inter.dtype, device=inter.device)
    if c > 1:
        off = similarity.masked_fill(eye.bool(), float("-inf"))
        prob = similarity / off.amax(dim=-1, keepdim=True)
        prob = prob.clamp(max=1.0) * (1 - eye) + eye
    else:
        prob = torch.ones_like(similarity)

    if mask_mode == "soft":
        bias = torch.log(prob.clamp(min=_PROB_CLAMP))
        return SimilarityGraph(distance, similarity, prob, None, bias)
    if training:
        mask = relaxed_bernoulli(prob, temperature, noise=noise, hard=hard)
    else:
        mask = (prob >= 0.5).to(prob.dtype)
    mask = mask * (1 - eye) + eye
    return SimilarityGraph(distance, similarity, prob, mask)


class RemModel(nn.Module):
    def __init__(self, config: Config):
        super().__init__()
        self.config = config
        p, d = config.patch_size, config.hidden_dim
        n, length = config.num_patches, config.lookback
        self.embed_inter = nn.Linear(2 * p, d)
        self.embed_intra = nn.Linear(2 * p, d)
        self.distance_weight = nn.Parameter(torch.full((d,), _UNIT_WEIGHT_RAW))
        self.inter_layer = FrequencyEncoderLayer(d, config.n_heads, config.dropout)
        self.intra_layer = FrequencyEncoderLayer(d, config.n_heads, config.dropout)
        self.proj_real = nn.Linear(n * d, length)
        self.proj_imag = nn.Linear(n * d, length)
        # set by tests / ablations: fixed Gumbel noise and relaxed (non-hard) sampling
        self.graph_noise: Optional[Tensor] = None
        self.hard_sampling = True

    def embed(self, inter_patches: Tensor, intra_patches: Tensor) -> tuple[Tensor, Tensor]:
        return self.embed_inter(inter_patches), self.embed_intra(intra_patches)

    def build_graph(self, inter: Tensor) -> Optional[SimilarityGraph]:
        cfg = self.config
        if not cfg.use_graph:
            return None
        return build_graph(inter, self.distance_weight, cfg.eps, cfg.gumbel_temperature,
                           self.training, cfg.mask_mode, hard=self.hard_sampling,
                           noise=self.graph_noise)

    def inter_attention(self, inter: Tensor, graph: Optional[SimilarityGraph]) -> Tensor:
        # inter: (B, N, C, D); attention over the C channel tokens of each patch
        b, n, c, d = inter.shape
        gate = bias = None
        if graph is not None:
            if graph.mask is not None:
                gate = graph.mask.reshape(b * n, c, c)
            if graph.bias is not None:
                bias = graph.bias.reshape(b * n, c, c)
        out = self.inter_layer(inter.reshape(b * n, c, d), gate=gate, bias=bias)
        return out.view(b, n, c, d)

    def intra_attention(self, intra: Tensor) -> Tensor:
        # intra: (B, C, N, D); attention over the N frequency patches of each channel
        b, c, n, d = intra.shape
        return self.intra_layer(intra.reshape(b * c, n, d)).view(b, c, n, d)

    def fuse_and_project(self, inter_out: Tensor, intra_out: Tensor) -> SpectralPair:
        fused = 0.5 * (inter_out.transpose(-3, -2) + intra_out)  # (B, C, N, D)
        if fused.shape != intra_out.shape:
            raise ValueError("inter and intra features disagree in shape")
        flat = fused.flatten(start_dim=-2)
        return SpectralPair(self.proj_real(flat), self.proj_imag(flat))

    def forward(self, x: Tensor) -> RemOutput:
        cfg = self.config
        x_norm, stats = instance_normalize(x, cfg.eps)
        spectra_in = dft(x_norm)
        inter_p, intra_p = patch_frequency(spectra_in, cfg.patch_size, cfg.patch_stride)
        inter, intra = self.embed(inter_p, intra_p)
        graph = self.build_graph(inter)
        inter_out = self.inter_attention(inter, graph)
        intra_out = self.intra_attention(intra)
        spectra_rec = self.fuse_and_project(inter_out, intra_out)
        recon_norm = idft(spectra_rec)
        recon = instance_denormalize(recon_norm, stats)
        return RemOutput(recon, recon_norm, x_norm, spectra_in, spectra_rec, stats, graph)


def rem_loss(x_norm: Tensor, recon_norm: Tensor, spectra_in: SpectralPair,
             spectra_rec: SpectralPair, lambda_time: float = 1.0,
             lambda_freq: float = 0.2) -> Tensor:
    """Weighted time-domain plus frequency-domain reconstruction MSE."""
    loss_time = mse(recon_norm, x_norm)
    loss_freq = mse(spectra_rec.real, spectra_in.real) + mse(spectra_rec.imag, spectra_in.imag)
    return lambda_time * loss_time + lambda_freq * loss_freq


def rem_loss_terms(out: RemOutput, config: Config) -> Tensor:
    return rem_loss(out.x_norm, out.recon_norm, out.spectra_in, out.spectra_rec,
                    config.lambda_time, config.lambda_freq)
