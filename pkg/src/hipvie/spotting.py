"""Straight-line point spotter, masked-image-modeling plans, head and loss."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .core import Box, CharBox, Document, Vocab, Word, clamp_box
from .chargrid import _encoder, _pixel_span

FOCAL_ALPHA, FOCAL_BETA = 2.0, 4.0


@dataclass
class SpotConfig:
    K: int = 100
    conf_threshold: float = 0.3
    points: int = 8  # P, also the maximum decodable word length
    feature_channels: int = 256  # C_F
    backbone_channels: tuple[int, int, int] = (32, 64, 128)
    head_channels: int = 64
    rec_hidden: int = 128
    stride: int = 8  # stride of F
    upsample: int = 2  # heads decode centers on F upsampled by this factor

    @property
    def map_stride(self) -> int:
        return self.stride // self.upsample


@dataclass
class MIMConfig:
    ratio_char: float = 0.30
    ratio_word: float = 0.15
    layers: int = 2
    heads: int = 8
    hidden: int = 256
    mlp: int = 1024
    bins: int = 256
    mask_value: float = 0.5
    lambda_char: float = 0.5
    lambda_word: float = 0.35


@dataclass
class CenterProposal:
    center: tuple[float, float]
    score: float
    feature: torch.Tensor


@dataclass
class SpottedWord:
    points: list[tuple[float, float]]
    text: str
    confidence: float
    box: Box
    half_height: float = 0.0

    def to_word(self, line_id: int = 0) -> Word:
        """Word with char boxes from an even split of the box (monospaced glyphs)."""
        x0, y0, x1, y1 = self.box
        n = len(self.text)
        step = (x1 - x0) / n
        chars = [CharBox(ch, (x0 + k * step, y0, x0 + (k + 1) * step, y1)) for k, ch in enumerate(self.text)]
        return Word(chars, line_id)


@dataclass
class MaskPlan:
    regions: list[Box]
    kind: str
    ratio: float
    indices: list = field(default_factory=list)


# -- backbone -----------------------------------------------------------------

class Backbone(nn.Module):
    """Small conv stack standing in for the pyramid CNN; outputs F at stride 8."""

    def __init__(self, cfg: SpotConfig):
        super().__init__()
        c1, c2, c3 = cfg.backbone_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c1, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c1, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c1, c2, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c2, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c2, c3, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(c3, c3, 3, padding=1), nn.ReLU(),
            nn.Conv2d(c3, cfg.feature_channels, 1),
        )

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # white paper -> 0 so blank regions give small activations
        return self.net(1.0 - image)


def conv_branch(cin: int, mid: int, cout: int) -> nn.Sequential:
    """3x3 conv -> ReLU -> 1x1 conv."""
    return nn.Sequential(nn.Conv2d(cin, mid, 3, padding=1), nn.ReLU(), nn.Conv2d(mid, cout, 1))


# -- spotter ------------------------------------------------------------------

def _line_points(start: torch.Tensor, end: torch.Tensor, P: int) -> torch.Tensor:
    """P equally spaced points at fractions (j + 0.5)/P along start->end; (N, P, 2)."""
    t = (torch.arange(P, dtype=start.dtype) + 0.5) / P
    return start[:, None, :] + t[None, :, None] * (end - start)[:, None, :]


def char_point_slots(length: int, P: int) -> list[int]:
    """Point index carrying the i-th character of a ``length``-char word."""
    return [int(math.floor((i + 0.5) * P / length)) for i in range(length)]


class SpotHead(nn.Module):
    """Center heatmap + line geometry over F; per-point character logits."""

    GEOM = 5  # dx, dy, log half-length, log half-height, angle

    def __init__(self, cfg: SpotConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        C = cfg.feature_channels
        self.heat = conv_branch(C, cfg.head_channels, 1)
        self.geom = conv_branch(C, cfg.head_channels, self.GEOM)
        nn.init.constant_(self.heat[-1].bias, -2.19)
        self.point_pos = nn.Parameter(torch.zeros(cfg.points, C))
        nn.init.normal_(self.point_pos, std=0.02)
        self.rec_in = nn.Linear(C, cfg.rec_hidden)
        self.rec_ctx = nn.Conv1d(cfg.rec_hidden, cfg.rec_hidden, 3, padding=1)
        self.rec_out = nn.Linear(cfg.rec_hidden, vocab_size)

    def maps(self, feat: torch.Tensor):
        """Center logits and geometry on F upsampled to ``cfg.map_stride``."""
        if self.cfg.upsample > 1:
            feat = F.interpolate(feat, scale_factor=self.cfg.upsample, mode="bilinear", align_corners=False)
        return self.heat(feat), self.geom(feat)

    def recognize(self, feat: torch.Tensor, points: torch.Tensor, image_hw) -> torch.Tensor:
        """feat (C, h, w), points (N, P, 2) in pixels -> char logits (N, P, V); class 0 is blank."""
        H, W = image_hw
        if points.shape[0] == 0:
            return feat.new_zeros((0, self.cfg.points, self.rec_out.out_features))
        grid = torch.stack([points[..., 0] / W * 2 - 1, points[..., 1] / H * 2 - 1], dim=-1)
        sampled = F.grid_sample(feat[None], grid[None].to(feat.dtype), mode="bilinear",
                                padding_mode="border", align_corners=False)[0]  # (C, N, P)
        x = sampled.permute(1, 2, 0) + self.point_pos
        x = F.relu(self.rec_in(x))
        x = x + F.relu(self.rec_ctx(x.transpose(1, 2))).transpose(1, 2)
        return self.rec_out(x)


def word_geometry(word: Word):
    """(center, start, end, half_height, angle) of the straight center line of ``word``."""
    x0, y0, x1, y1 = word.box
    first, last = word.chars[0].box, word.chars[-1].box
    c0 = ((first[0] + first[2]) / 2, (first[1] + first[3]) / 2)
    c1 = ((last[0] + last[2]) / 2, (last[1] + last[3]) / 2)
    angle = math.atan2(c1[1] - c0[1], c1[0] - c0[0]) if len(word.chars) > 1 else 0.0
    cy = (y0 + y1) / 2
    return ((x0 + x1) / 2, cy), (x0, cy), (x1, cy), (y1 - y0) / 2, angle


def gaussian_radius(height: float, width: float, min_overlap: float = 0.7) -> float:
    """CenterNet radius rule (smallest of the three corner-shift cases)."""
    a1 = 1
    b1 = height + width
    c1 = width * height * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2 = 4
    b2 = 2 * (height + width)
    c2 = (1 - min_overlap) * width * height
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3 = 4 * min_overlap
    b3 = -2 * min_overlap * (height + width)
    c3 = (min_overlap - 1) * width * height
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def draw_gaussian(heatmap: np.ndarray, cx: int, cy: int, radius: int) -> None:
    """Elementwise-max a unit-peak Gaussian (sigma = (2r+1)/6) into ``heatmap``."""
    d = 2 * radius + 1
    sigma = d / 6.0
    ys, xs = np.ogrid[-radius:radius + 1, -radius:radius + 1]
    g = np.exp(-(xs * xs + ys * ys) / (2 * sigma * sigma))
    g[g < np.finfo(g.dtype).eps * g.max()] = 0
    h, w = heatmap.shape
    left, right = min(cx, radius), min(w - cx, radius + 1)
    top, bottom = min(cy, radius), min(h - cy, radius + 1)
    region = heatmap[cy - top:cy + bottom, cx - left:cx + right]
    patch = g[radius - top:radius + bottom, radius - left:radius + right]
    np.maximum(region, patch, out=region)


def focal_loss(logits: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Penalty-reduced pixel focal loss (alpha=2, beta=4) normalised by the peak count."""
    logp = F.logsigmoid(logits)
    log1mp = F.logsigmoid(-logits)
    p = torch.sigmoid(logits)
    pos = target == 1
    pos_loss = (logp * (1 - p) ** FOCAL_ALPHA)[pos].sum()
    neg_loss = (log1mp * p ** FOCAL_ALPHA * (1 - target) ** FOCAL_BETA)[~pos].sum()
    n_pos = int(pos.sum())
    if n_pos == 0:
        return -neg_loss
    return -(pos_loss + neg_loss) / n_pos


def spot_targets(words: Sequence[Word], map_hw, stride: int, vocab: Vocab, P: int):
    """Heatmap, per-word center cells, geometry targets and per-point char targets."""
    h, w = map_hw
    heat = np.zeros((h, w), dtype=np.float64)
    cells, geom, starts, ends, chars = [], [], [], [], []
    for word in words:
        (cx, cy), start, end, hh, angle = word_geometry(word)
        mx, my = cx / stride, cy / stride
        ix, iy = min(max(int(mx), 0), w - 1), min(max(int(my), 0), h - 1)
        bw, bh = (word.box[2] - word.box[0]) / stride, (word.box[3] - word.box[1]) / stride
        draw_gaussian(heat, ix, iy, max(0, int(gaussian_radius(bh, bw))))
        hl = math.hypot(end[0] - start[0], end[1] - start[1]) / 2
        geom.append([mx - ix, my - iy, math.log(hl / stride), math.log(hh / stride), angle])
        cells.append((iy, ix))
        starts.append(start)
        ends.append(end)
        target = [vocab.pad_id] * P
        text = word.text[:P]
        for slot, ch in zip(char_point_slots(len(text), P), text):
            target[slot] = vocab.encode_char(ch)
        chars.append(target)
    return {
        "heat": heat,
        "cells": np.array(cells, dtype=np.int64).reshape(-1, 2),
        "geom": np.array(geom, dtype=np.float64).reshape(-1, SpotHead.GEOM),
        "start": np.array(starts, dtype=np.float64).reshape(-1, 2),
        "end": np.array(ends, dtype=np.float64).reshape(-1, 2),
        "chars": np.array(chars, dtype=np.int64).reshape(-1, P),
    }


def loss_spot(head: SpotHead, feat: torch.Tensor, targets: dict, image_hw) -> torch.Tensor:
    """Desk-scale spotting loss for one image: focal(center) + L1(geometry) + CE(points).

    Character logits are computed at ground-truth line points (teacher forcing).
    """
    heat_logits, geom = head.maps(feat[None])
    heat_t = torch.as_tensor(targets["heat"], dtype=feat.dtype)
    loss = focal_loss(heat_logits[0, 0], heat_t)
    n = targets["cells"].shape[0]
    if n == 0:
        return loss
    iy = torch.as_tensor(targets["cells"][:, 0])
    ix = torch.as_tensor(targets["cells"][:, 1])
    g_pred = geom[0][:, iy, ix].t()
    g_t = torch.as_tensor(targets["geom"], dtype=feat.dtype)
    loss = loss + (g_pred - g_t).abs().sum() / n
    pts = _line_points(torch.as_tensor(targets["start"], dtype=feat.dtype),
                       torch.as_tensor(targets["end"], dtype=feat.dtype), head.cfg.points)
    logits = head.recognize(feat, pts, image_hw)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), torch.as_tensor(targets["chars"]).reshape(-1))
    return loss + ce


def _local_maxima(heat: torch.Tensor) -> torch.Tensor:
    pooled = F.max_pool2d(heat[None, None], 3, stride=1, padding=1)[0, 0]
    return heat == pooled


@torch.no_grad()
def spot(head: SpotHead, feat: torch.Tensor, K: int | None = None, threshold: float | None = None,
         image_hw=None, vocab: Vocab | None = None) -> list[SpottedWord]:
    """Decode words from F (C, h, w): top-K 3x3 peaks, straight-line points, per-point chars."""
    cfg = head.cfg
    K = cfg.K if K is None else K
    if K <= 0:
        raise ValueError(f"K must be positive, got {K}")
    threshold = cfg.conf_threshold if threshold is None else threshold
    vocab = vocab or Vocab()
    image_hw = image_hw or (feat.shape[1] * cfg.stride, feat.shape[2] * cfg.stride)
    stride = cfg.map_stride
    heat_logits, geom = head.maps(feat[None])
    heat = torch.sigmoid(heat_logits[0, 0])
    w = heat.shape[1]
    scores = torch.where(_local_maxima(heat), heat, torch.zeros_like(heat)).flatten()
    k = min(K, scores.numel())
    top, idx = torch.topk(scores, k)
    keep = top >= threshold
    top, idx = top[keep], idx[keep]
    if idx.numel() == 0:
        return []
    iy, ix = idx // w, idx % w
    g = geom[0][:, iy, ix].t()
    cx = (ix.to(g.dtype) + g[:, 0]) * stride
    cy = (iy.to(g.dtype) + g[:, 1]) * stride
    hl = torch.exp(g[:, 2]) * stride
    hh = torch.exp(g[:, 3]) * stride
    ang = g[:, 4]
    d = torch.stack([torch.cos(ang), torch.sin(ang)], dim=1)
    c = torch.stack([cx, cy], dim=1)
    start, end = c - hl[:, None] * d, c + hl[:, None] * d
    pts = _line_points(start, end, cfg.points)
    labels = head.recognize(feat, pts, image_hw).argmax(-1)
    H, W = image_hw
    words = []
    for n in range(idx.numel()):
        text = "".join(vocab.itos[t] for t in labels[n].tolist() if t >= vocab.n_special)
        if not text:
            continue
        ex = float(abs(hl[n] * d[n, 0]) + abs(hh[n] * d[n, 1]))
        ey = float(abs(hl[n] * d[n, 1]) + abs(hh[n] * d[n, 0]))
        box = clamp_box((float(cx[n]) - ex, float(cy[n]) - ey, float(cx[n]) + ex, float(cy[n]) + ey), W, H)
        if not (box[0] < box[2] and box[1] < box[3]):
            continue
        words.append(SpottedWord([tuple(map(float, p)) for p in pts[n]], text, float(top[n]), box, float(hh[n])))
    words.sort(key=lambda sw: -sw.confidence)
    return words


def center_proposals(head: SpotHead, feat: torch.Tensor, K: int) -> list[CenterProposal]:
    """Top-K center proposals (3x3 peaks of the center heatmap) with their F features."""
    stride = head.cfg.map_stride
    with torch.no_grad():
        heat = torch.sigmoid(head.maps(feat[None])[0][0, 0])
        w = heat.shape[1]
        scores = torch.where(_local_maxima(heat), heat, torch.zeros_like(heat)).flatten()
        top, idx = torch.topk(scores, min(K, scores.numel()))
    return [
        CenterProposal(((int(i) % w + 0.5) * stride, (int(i) // w + 0.5) * stride), float(s),
                       feat[:, (int(i) // w) * stride // head.cfg.stride, (int(i) % w) * stride // head.cfg.stride])
        for s, i in zip(top, idx)
    ]


# -- masked image modeling ----------------------------------------------------

def masked_count(ratio: float, count: int) -> int:
    """round-half-up(ratio * count), at least 1 when count >= 1."""
    if count <= 0:
        return 0
    return max(1, int(math.floor(ratio * count + 0.5)))


def select_masks(doc: Document, kind: str, ratio: float, rng: np.random.Generator) -> MaskPlan:
    """Pick char boxes (``kind='char'``) or word boxes (``kind='word'``) to mask."""
    if not 0.0 < ratio < 1.0:
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if kind == "char":
        refs = [(wi, ci) for wi, w in enumerate(doc.words) for ci in range(len(w.chars))]
        n = masked_count(ratio, len(refs))
        caps = [math.ceil(ratio * len(w.chars)) for w in doc.words]
        taken = [0] * len(doc.words)
        chosen = []
        for r in rng.permutation(len(refs)):
            if len(chosen) == n:
                break
            wi, ci = refs[r]
            if taken[wi] < caps[wi]:
                taken[wi] += 1
                chosen.append((wi, ci))
        return MaskPlan([doc.words[wi].chars[ci].box for wi, ci in chosen], "char", ratio, chosen)
    if kind == "word":
        n = masked_count(ratio, len(doc.words))
        # round-robin over lines so picks spread across lines before doubling up
        per_line: dict[int, list[int]] = {}
        for wi in rng.permutation(len(doc.words)):
            per_line.setdefault(doc.words[int(wi)].line_id, []).append(int(wi))
        queues = list(per_line.values())
        chosen = []
        depth = 0
        while len(chosen) < n:
            for q in queues:
                if depth < len(q) and len(chosen) < n:
                    chosen.append(q[depth])
            depth += 1
        return MaskPlan([doc.words[wi].box for wi in chosen], "word", ratio, chosen)
    raise ValueError(f"unknown mask kind {kind!r}")


def region_mask(regions: Sequence[Box], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for x0, y0, x1, y1 in regions:
        xa, xb = _pixel_span(x0, x1, width)
        ya, yb = _pixel_span(y0, y1, height)
        mask[ya:yb, xa:xb] = True
    return mask


def apply_mask(image: np.ndarray, plan: MaskPlan, value: float = 0.5) -> np.ndarray:
    out = np.array(image, dtype=np.float64, copy=True)
    out[region_mask(plan.regions, *out.shape)] = value
    return out


class MIMHead(nn.Module):
    """Transformer over F tokens, then three stride-2 deconvolutions to per-pixel bin logits."""

    max_cells = 128

    def __init__(self, cfg: MIMConfig, feature_channels: int = 256, zero_init: bool = False):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Linear(feature_channels, cfg.hidden) if feature_channels != cfg.hidden else nn.Identity()
        self.row_pos = nn.Parameter(torch.zeros(self.max_cells, cfg.hidden))
        self.col_pos = nn.Parameter(torch.zeros(self.max_cells, cfg.hidden))
        nn.init.normal_(self.row_pos, std=0.02)
        nn.init.normal_(self.col_pos, std=0.02)
        self.encoder = _encoder(cfg.layers, cfg.hidden, cfg.heads, cfg.mlp)
        self.deconv = nn.Sequential(
            nn.ConvTranspose2d(cfg.hidden, 128, 2, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(128, 64, 2, stride=2), nn.ReLU(),
            nn.ConvTranspose2d(64, cfg.bins, 2, stride=2),
        )
        if zero_init:
            nn.init.zeros_(self.deconv[-1].weight)
            nn.init.zeros_(self.deconv[-1].bias)

    def trunk(self, feat: torch.Tensor) -> torch.Tensor:
        """Everything before the last deconvolution: (B, C, h, w) -> (B, 64, 4h, 4w)."""
        B, _, h, w = feat.shape
        tokens = self.proj(feat.flatten(2).transpose(1, 2))
        pos = self.row_pos[:h, None, :] + self.col_pos[None, :w, :]
        tokens = self.encoder(tokens + pos.reshape(1, h * w, -1))
        x = tokens.transpose(1, 2).reshape(B, -1, h, w)
        return self.deconv[:-1](x)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        """F (B, C, h, w) -> logits (B, bins, 8h, 8w)."""
        return self.deconv[-1](self.trunk(feat))

    def logits_at(self, feat: torch.Tensor, b: torch.Tensor, y: torch.Tensor, x: torch.Tensor) -> torch.Tensor:
        """Logits (N, bins) at pixels (b, y, x); equal to ``forward(feat)[b, :, y, x]``.

        The last layer is a kernel-2 stride-2 deconvolution, so a pixel only sees its
        parent cell through the weight slice for its parity. Training reads masked
        pixels only, which skips the full-resolution 256-bin map.
        """
        trunk = self.trunk(feat)
        last = self.deconv[-1]
        out = trunk.new_empty(len(b), self.cfg.bins)
        for dy in (0, 1):
            for dx in (0, 1):
                sel = ((y % 2) == dy) & ((x % 2) == dx)
                if bool(sel.any()):
                    parent = trunk[b[sel], :, y[sel] // 2, x[sel] // 2]
                    out[sel] = parent @ last.weight[:, :, dy, dx] + last.bias
        return out


def mim_reconstruct(head: MIMHead, feat: torch.Tensor) -> torch.Tensor:
    """Per-pixel logits as (H, W, Q) for a single F (C, h, w), or (B, H, W, Q) for a batch."""
    single = feat.dim() == 3
    out = head(feat[None] if single else feat).permute(0, 2, 3, 1)
    return out[0] if single else out


def intensity_bins(image, bins: int = 256) -> torch.Tensor:
    """Quantize intensities in [0, 1] to ``bins`` uniform levels."""
    img = torch.as_tensor(np.asarray(image), dtype=torch.float64)
    return torch.clamp(torch.floor(img * (bins - 1) + 0.5), 0, bins - 1).long()


def _masked_ce(logits, target, mask):
    m = torch.as_tensor(mask)
    if not bool(m.any()):
        return logits.new_zeros(())
    ce = F.cross_entropy(logits, target, reduction="none")
    return ce[m].mean()


def loss_mim(logits: torch.Tensor, image, char_mask, word_mask, lambda_char: float = 0.5,
             lambda_word: float = 0.35):
    """(L_MIM, L_CMIM, L_WMIM) with L_MIM = lambda_char * L_CMIM + lambda_word * L_WMIM.

    ``logits`` is (B, Q, H, W) or (Q, H, W); masks are boolean pixel masks of the same
    spatial shape. Each term is the mean pixel cross-entropy inside its regions.
    """
    if logits.dim() == 3:
        logits = logits[None]
    target = intensity_bins(image, logits.shape[1])
    if target.dim() == 2:
        target = target[None]
    cm = np.asarray(char_mask).reshape(target.shape)
    wm = np.asarray(word_mask).reshape(target.shape)
    l_char = _masked_ce(logits, target, cm)
    l_word = _masked_ce(logits, target, wm)
    return lambda_char * l_char + lambda_word * l_word, l_char, l_word


def loss_mim_at(logits: torch.Tensor, target: torch.Tensor, in_char: torch.Tensor, in_word: torch.Tensor,
                lambda_char: float = 0.5, lambda_word: float = 0.35):
    """``loss_mim`` on pixels already gathered: (N, Q) logits, (N,) bins, (N,) region flags."""
    ce = F.cross_entropy(logits, target, reduction="none") if len(target) else logits.new_zeros(0)
    l_char = ce[in_char].mean() if bool(in_char.any()) else logits.new_zeros(())
    l_word = ce[in_word].mean() if bool(in_word.any()) else logits.new_zeros(())
    return lambda_char * l_char + lambda_word * l_word, l_char, l_word


def combine_mim(l_char, l_word, lambda_char: float = 0.5, lambda_word: float = 0.35):
    return lambda_char * l_char + lambda_word * l_word
