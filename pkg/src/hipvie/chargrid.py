"""Chargrid rasterization, the patch-transformer grid encoder and fusion with F."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import CharBox, Vocab


@dataclass
class GridConfig:
    patch_size: int = 32
    layers: int = 3
    heads: int = 8
    hidden: int = 256
    mlp: int = 1024
    upsample: str = "bilinear"
    embed_dim: int = 3
    feature_channels: int = 256  # C_F
    out_channels: int = 256


@dataclass
class CharGrid:
    ids: np.ndarray  # H x W integer character ids
    grid: torch.Tensor  # H x W x 3

    @property
    def shape(self):
        return tuple(self.ids.shape)


def _pixel_span(lo: float, hi: float, n: int) -> tuple[int, int]:
    # integer pixels p with lo <= p < hi, clipped to [0, n)
    a = max(0, int(np.ceil(lo)))
    b = min(n, int(np.ceil(hi)))
    return a, b


def rasterize_ids(chars: Sequence[CharBox], height: int, width: int, vocab: Vocab) -> np.ndarray:
    """Per-pixel character id; [PAD] where no box covers. Later chars overwrite earlier ones."""
    ids = np.full((height, width), vocab.pad_id, dtype=np.int64)
    for c in chars:
        cid = vocab.encode_char(c.char)
        x0, y0, x1, y1 = c.box
        xa, xb = _pixel_span(x0, x1, width)
        ya, yb = _pixel_span(y0, y1, height)
        if xa < xb and ya < yb:
            ids[ya:yb, xa:xb] = cid
    return ids


def rasterize_chargrid(chars: Sequence[CharBox], vocab_embed: torch.Tensor, height: int, width: int,
                       vocab: Vocab | None = None) -> CharGrid:
    """Build g with g[i, j] = E(t_k) for the box covering pixel (i, j), E([PAD]) elsewhere."""
    vocab = vocab or Vocab()
    if vocab_embed.shape[0] != len(vocab):
        raise ValueError(f"embedding table has {vocab_embed.shape[0]} rows, vocab has {len(vocab)}")
    ids = rasterize_ids(chars, height, width, vocab)
    grid = vocab_embed[torch.from_numpy(ids)]
    return CharGrid(ids, grid)


def sample_center_features(G: torch.Tensor, points, stride: int = 8) -> torch.Tensor:
    """Gather G (C x h x w) at image-space points (x, y); returns N x C.

    A point maps to cell ``round(coord / stride)`` (half rounds up), clamped to the map.
    """
    C, h, w = G.shape
    pts = torch.as_tensor(np.asarray(points, dtype=np.float64).reshape(-1, 2))
    if pts.shape[0] == 0:
        return G.new_zeros((0, C))
    cx = torch.floor(pts[:, 0] / stride + 0.5).long().clamp(0, w - 1)
    cy = torch.floor(pts[:, 1] / stride + 0.5).long().clamp(0, h - 1)
    return G[:, cy, cx].t()


def _encoder(layers: int, dim: int, heads: int, mlp: int) -> nn.TransformerEncoder:
    layer = nn.TransformerEncoderLayer(dim, heads, mlp, dropout=0.0, activation="gelu", batch_first=True)
    return nn.TransformerEncoder(layer, layers, enable_nested_tensor=False)


class GridEncoder(nn.Module):
    """ViT over the chargrid, upsampled x4 and fused with F into G (stride 8)."""

    max_patches = 64

    def __init__(self, cfg: GridConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(vocab_size, cfg.embed_dim)  # E
        self.patch = nn.Conv2d(cfg.embed_dim, cfg.hidden, cfg.patch_size, stride=cfg.patch_size)
        self.row_pos = nn.Parameter(torch.zeros(self.max_patches, cfg.hidden))
        self.col_pos = nn.Parameter(torch.zeros(self.max_patches, cfg.hidden))
        nn.init.normal_(self.row_pos, std=0.02)
        nn.init.normal_(self.col_pos, std=0.02)
        self.encoder = _encoder(cfg.layers, cfg.hidden, cfg.heads, cfg.mlp)
        self.to_feature = nn.Conv2d(cfg.hidden, cfg.feature_channels, 1)
        self.fuse = nn.Conv2d(cfg.feature_channels, cfg.out_channels, 1)

    def grid(self, ids: torch.Tensor) -> torch.Tensor:
        """ids (B, H, W) -> chargrid (B, 3, H, W)."""
        return self.embed(ids).permute(0, 3, 1, 2)

    def encode(self, grid: torch.Tensor) -> torch.Tensor:
        """Chargrid (B, 3, H, W) -> ViT features (B, hidden, H/32, W/32)."""
        B, _, H, W = grid.shape
        p = self.cfg.patch_size
        if H % p or W % p:
            raise ValueError(f"chargrid {H}x{W} is not a multiple of the patch size {p}")
        x = self.patch(grid)
        _, C, hp, wp = x.shape
        pos = self.row_pos[:hp, None, :] + self.col_pos[None, :wp, :]
        tokens = x.flatten(2).transpose(1, 2) + pos.reshape(1, hp * wp, C)
        tokens = self.encoder(tokens)
        return tokens.transpose(1, 2).reshape(B, C, hp, wp)

    def forward(self, grid: torch.Tensor, feat: torch.Tensor) -> torch.Tensor:
        """Fuse the encoded chargrid with F (B, C_F, H/8, W/8); returns G (B, 256, H/8, W/8)."""
        z = self.encode(grid)
        mode = self.cfg.upsample
        kw = {"align_corners": False} if mode == "bilinear" else {}
        z = F.interpolate(z, scale_factor=4, mode=mode, **kw)
        z = self.to_feature(z)
        if z.shape != feat.shape:
            raise ValueError(f"upsampled grid features {tuple(z.shape)} do not match F {tuple(feat.shape)}")
        return self.fuse(z + feat)


def encode_grid(encoder: GridEncoder, ids, feat: torch.Tensor) -> torch.Tensor:
    """Convenience wrapper: integer chargrid ids (H, W) or (B, H, W) plus F -> G."""
    ids = torch.as_tensor(ids)
    if ids.dim() == 2:
        ids = ids[None]
    if feat.dim() == 3:
        feat = feat[None]
    return encoder(encoder.grid(ids), feat)
