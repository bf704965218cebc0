"""Entity detection (ETD), word-to-block relations (WTB) and inference-time word grouping."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import Box, box_area, box_center, box_intersection, spatial_order
from .spotting import conv_branch, draw_gaussian, focal_loss, gaussian_radius

log = logging.getLogger(__name__)


@dataclass
class GroupConfig:
    in_channels: int = 256
    head_channels: int = 64
    wtb_channels: int = 64
    lambda_size_pretrain: float = 0.2
    lambda_size_finetune: float = 1.0
    iou_threshold: float = 0.4
    top_n: int = 100
    score_threshold: float = 0.25
    stride: int = 4


@dataclass
class ETDMaps:
    heatmap: torch.Tensor  # (B, 1, 2h, 2w) in [0, 1]
    size: torch.Tensor  # (B, 2, 2h, 2w) width, height in map cells
    offset: torch.Tensor  # (B, 2, 2h, 2w)
    heat_logits: torch.Tensor | None = None

    def __getitem__(self, b: int) -> "ETDMaps":
        logits = None if self.heat_logits is None else self.heat_logits[b:b + 1]
        return ETDMaps(self.heatmap[b:b + 1], self.size[b:b + 1], self.offset[b:b + 1], logits)


@dataclass
class WTBOutput:
    logits: torch.Tensor  # (N, M)
    word_reps: torch.Tensor  # (N, 64)
    entity_reps: torch.Tensor  # (M, 64)


class ETDHead(nn.Module):
    def __init__(self, cfg: GroupConfig):
        super().__init__()
        self.heat = conv_branch(cfg.in_channels, cfg.head_channels, 1)
        self.size = conv_branch(cfg.in_channels, cfg.head_channels, 2)
        self.offset = conv_branch(cfg.in_channels, cfg.head_channels, 2)
        nn.init.constant_(self.heat[-1].bias, -2.19)

    def forward(self, G: torch.Tensor) -> ETDMaps:
        x = F.interpolate(G, scale_factor=2, mode="bilinear", align_corners=False)
        logits = self.heat(x)
        return ETDMaps(torch.sigmoid(logits), torch.exp(self.size(x)), self.offset(x), logits)


def etd_forward(head: ETDHead, G: torch.Tensor) -> ETDMaps:
    return head(G if G.dim() == 4 else G[None])


def render_etd_targets(boxes: Sequence[Box], map_hw, stride: int = 4) -> dict:
    """CenterNet targets on the stride-4 map: Gaussian heatmap, size/offset at center cells."""
    h, w = map_hw
    heat = np.zeros((h, w), dtype=np.float64)
    size = np.zeros((2, h, w), dtype=np.float64)
    offset = np.zeros((2, h, w), dtype=np.float64)
    mask = np.zeros((h, w), dtype=bool)
    for b in boxes:
        cx, cy = box_center(b)
        mx, my = cx / stride, cy / stride
        ix, iy = int(math.floor(mx)), int(math.floor(my))
        if not (0 <= ix < w and 0 <= iy < h):
            log.warning("entity center (%.1f, %.1f) outside %dx%d map; clamped", mx, my, w, h)
            ix, iy = min(max(ix, 0), w - 1), min(max(iy, 0), h - 1)
        bw, bh = (b[2] - b[0]) / stride, (b[3] - b[1]) / stride
        draw_gaussian(heat, ix, iy, max(0, int(gaussian_radius(bh, bw))))
        size[:, iy, ix] = (bw, bh)
        offset[:, iy, ix] = (mx - ix, my - iy)
        mask[iy, ix] = True
    return {"heatmap": heat, "size": size, "offset": offset, "mask": mask, "count": len(boxes)}


def combine_etd(l_heat, l_size, l_offset, lambda_size: float):
    return l_heat + lambda_size * l_size + l_offset


def loss_etd(pred: ETDMaps, targets: dict, lambda_size: float, b: int = 0):
    """(L_ETD, L_Heatmap, L_Size, L_Offset) for batch element ``b``."""
    ht = torch.as_tensor(targets["heatmap"], dtype=pred.size.dtype)
    if pred.heat_logits is not None:
        l_heat = focal_loss(pred.heat_logits[b, 0], ht)
    else:
        p = pred.heatmap[b, 0].clamp(1e-12, 1 - 1e-12)
        l_heat = focal_loss(torch.log(p) - torch.log1p(-p), ht)
    n = int(targets["count"])
    mask = torch.as_tensor(targets["mask"])
    if n == 0 or not bool(mask.any()):
        zero = pred.size.new_zeros(())
        return combine_etd(l_heat, zero, zero, lambda_size), l_heat, zero, zero
    st = torch.as_tensor(targets["size"], dtype=pred.size.dtype)
    ot = torch.as_tensor(targets["offset"], dtype=pred.size.dtype)
    l_size = (pred.size[b][:, mask] - st[:, mask]).abs().sum() / n
    l_off = (pred.offset[b][:, mask] - ot[:, mask]).abs().sum() / n
    return combine_etd(l_heat, l_size, l_off, lambda_size), l_heat, l_size, l_off


def local_maxima(heat: torch.Tensor) -> torch.Tensor:
    pooled = F.max_pool2d(heat[None, None], 3, stride=1, padding=1)[0, 0]
    return heat == pooled


@torch.no_grad()
def decode_entities(maps: ETDMaps, top_n: int = 100, score_threshold: float = 0.25,
                    stride: int = 4, b: int = 0) -> list[tuple[Box, float]]:
    """Boxes from 3x3 heatmap peaks: center (cell + offset) * stride, size * stride."""
    heat = maps.heatmap[b, 0]
    h, w = heat.shape
    peaks = local_maxima(heat)
    scores = torch.where(peaks, heat, torch.full_like(heat, -1.0)).flatten()
    k = min(top_n, int(peaks.sum()))
    if k == 0:
        return []
    top, idx = torch.topk(scores, k)
    out = []
    for s, i in zip(top.tolist(), idx.tolist()):
        if s < score_threshold:
            continue
        iy, ix = divmod(i, w)
        cx = (ix + float(maps.offset[b, 0, iy, ix])) * stride
        cy = (iy + float(maps.offset[b, 1, iy, ix])) * stride
        bw = float(maps.size[b, 0, iy, ix]) * stride
        bh = float(maps.size[b, 1, iy, ix]) * stride
        out.append(((cx - bw / 2, cy - bh / 2, cx + bw / 2, cy + bh / 2), s))
    return out


# -- word-to-block --------------------------------------------------------------

class WTBHead(nn.Module):
    """Word and entity branches over G; pairwise differences scored per (word, entity)."""

    def __init__(self, cfg: GroupConfig):
        super().__init__()
        c = cfg.wtb_channels
        self.word = conv_branch(cfg.in_channels, c, c)
        self.entity = conv_branch(cfg.in_channels, c, c)
        # nonlinear pair scorer; a single linear map of W_i - E_j is rank-limited
        self.pair = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, 1))

    def forward(self, G: torch.Tensor, word_centers, entity_centers, stride: int = 8) -> WTBOutput:
        from .chargrid import sample_center_features

        G = G[0] if G.dim() == 4 else G
        rw = self.word(G[None])[0]
        re = self.entity(G[None])[0]
        W = sample_center_features(rw, word_centers, stride)
        E = sample_center_features(re, entity_centers, stride)
        diff = W[:, None, :] - E[None, :, :]
        logits = self.pair(diff)[..., 0] if diff.numel() else diff.new_zeros((W.shape[0], E.shape[0]))
        return WTBOutput(logits, W, E)


def wtb_forward(head: WTBHead, G, word_centers, entity_centers) -> WTBOutput:
    return head(G, word_centers, entity_centers)


def wtb_targets(word_centers, entity_boxes) -> np.ndarray:
    """target[i, j] = 1 iff word center i lies in entity box j."""
    c = np.asarray(word_centers, dtype=np.float64).reshape(-1, 2)
    b = np.asarray(entity_boxes, dtype=np.float64).reshape(-1, 4)
    x, y = c[:, 0:1], c[:, 1:2]
    inside = (b[None, :, 0] <= x) & (x < b[None, :, 2]) & (b[None, :, 1] <= y) & (y < b[None, :, 3])
    return inside.astype(np.float64)


def loss_wtb(logits: torch.Tensor, targets) -> torch.Tensor:
    if logits.numel() == 0:
        return logits.new_zeros(())
    return F.binary_cross_entropy_with_logits(logits, torch.as_tensor(targets, dtype=logits.dtype))


# -- inference grouping -----------------------------------------------------------

def overlap_ratio(word: Box, entity: Box) -> float:
    a = box_area(word)
    return box_intersection(word, entity) / a if a > 0 else 0.0


def assign_words_to_entities(word_boxes: Sequence[Box], entity_boxes: Sequence[Box],
                             iou_threshold: float = 0.4) -> tuple[list[int], list[tuple[int, list[int]]]]:
    """Assign each word to the entity box covering the largest share of it.

    Returns ``(assignment, groups)``: ``assignment[i]`` is the entity index of word i
    (or -1 when no entity reaches the threshold) and ``groups`` is a list of
    ``(entity index, word ids)`` partitioning all words: entity groups first (empty
    entities dropped), then unassigned singletons with index -1. Words within a
    group are in spatial order.
    """
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must lie in (0, 1], got {iou_threshold}")
    assignment = []
    for wb in word_boxes:
        best, best_j = 0.0, -1
        for j, eb in enumerate(entity_boxes):
            r = overlap_ratio(wb, eb)
            if r > best:
                best, best_j = r, j
        assignment.append(best_j if best >= iou_threshold else -1)
    groups = []
    for j in range(len(entity_boxes)):
        members = [i for i, a in enumerate(assignment) if a == j]
        if members:
            order = spatial_order([word_boxes[i] for i in members])
            groups.append((j, [members[k] for k in order]))
    groups += [(-1, [i]) for i, a in enumerate(assignment) if a == -1]
    return assignment, groups
