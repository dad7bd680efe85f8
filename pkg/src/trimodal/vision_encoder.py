"""Patch embedding plus a small bidirectional transformer over image patches.

Images are split into non-overlapping square patches in row-major order, each
patch is linearly embedded, and two self-attention layers mix them. The
projection to the language model width is a plain bias-free linear map so the
patch grid survives as a recognisable token axis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class VisionConfig:
    image_px: int = 32
    patch_px: int = 8
    channels: int = 3
    d_v: int = 32
    d_h: int = 128
    n_layers: int = 2
    n_heads: int = 4
    ffn_mult: int = 4

    def __post_init__(self):
        if self.image_px % self.patch_px != 0:
            raise ValueError("image size must be divisible by patch size")
        if self.d_v % self.n_heads != 0:
            raise ValueError("d_v must be divisible by n_heads")

    @property
    def n_v(self) -> int:
        return (self.image_px // self.patch_px) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_px * self.patch_px * self.channels


def patchify(cfg: VisionConfig, img: torch.Tensor) -> torch.Tensor:
    """(H, W, C) image -> (n_v, patch_dim) rows in row-major patch order."""
    if img.shape != (cfg.image_px, cfg.image_px, cfg.channels):
        raise ValueError(f"expected image of shape {(cfg.image_px, cfg.image_px, cfg.channels)}, got {tuple(img.shape)}")
    side = cfg.image_px // cfg.patch_px
    x = img.view(side, cfg.patch_px, side, cfg.patch_px, cfg.channels)
    x = x.permute(0, 2, 1, 3, 4).reshape(cfg.n_v, cfg.patch_dim)
    return x


class _EncoderBlock(nn.Module):
    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.ln1 = nn.LayerNorm(cfg.d_v)
        self.ln2 = nn.LayerNorm(cfg.d_v)
        self.qkv = nn.Linear(cfg.d_v, 3 * cfg.d_v)
        self.out = nn.Linear(cfg.d_v, cfg.d_v)
        self.ff1 = nn.Linear(cfg.d_v, cfg.ffn_mult * cfg.d_v)
        self.ff2 = nn.Linear(cfg.ffn_mult * cfg.d_v, cfg.d_v)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, T, d = x.shape
        h = self.ln1(x)
        nh = self.cfg.n_heads
        hd = d // nh
        q, k, v = self.qkv(h).chunk(3, dim=-1)
        q = q.view(B, T, nh, hd).transpose(1, 2)
        k = k.view(B, T, nh, hd).transpose(1, 2)
        v = v.view(B, T, nh, hd).transpose(1, 2)
        att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
        att = att.softmax(dim=-1)
        mixed = (att @ v).transpose(1, 2).reshape(B, T, d)
        x = x + self.out(mixed)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x


class PatchEncoder(nn.Module):
    """encode_image: pixels -> (n_v, d_v) patch representations."""

    def __init__(self, cfg: VisionConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_proj = nn.Linear(cfg.patch_dim, cfg.d_v)
        self.pos = nn.Parameter(torch.zeros(cfg.n_v, cfg.d_v))
        nn.init.normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList(_EncoderBlock(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.d_v)

    def patch_features(self, img: torch.Tensor) -> torch.Tensor:
        """Per-patch embeddings before position information or attention mixing."""
        return self.patch_proj(patchify(self.cfg, img))

    def forward(self, imgs: torch.Tensor) -> torch.Tensor:
        single = imgs.dim() == 3
        if single:
            imgs = imgs.unsqueeze(0)
        x = torch.stack([self.patch_proj(patchify(self.cfg, im)) for im in imgs])
        x = x + self.pos
        for blk in self.blocks:
            x = blk(x)
        x = self.ln_f(x)
        return x[0] if single else x


def project(weight: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Rowwise linear map into the language model width: H = Z W^T."""
    d_h, d_v = weight.shape
    if z.shape[-1] != d_v:
        raise ValueError(f"projection expects trailing dim {d_v}, got {z.shape[-1]}")
    return z @ weight.T
