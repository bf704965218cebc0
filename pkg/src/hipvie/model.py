"""The full network: backbone -> spotter, chargrid -> G -> ETD/WTB, semantic encoder -> heads."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .core import Box, Document, Vocab, Word, entity_content, row_bands
from .chargrid import GridConfig, GridEncoder, rasterize_ids, sample_center_features
from .grouping import (
    ETDHead, GroupConfig, WTBHead, assign_words_to_entities, decode_entities, loss_etd, loss_wtb,
    render_etd_targets, wtb_targets,
)
from .labeling import (
    PairHead, SemConfig, SemanticEncoder, build_sequence, loss_mlm, loss_ror, loss_tag,
    mlm_corrupt, ror_forward, ror_targets, tag_entities,
)
from .spotting import (
    Backbone, MIMConfig, MIMHead, SpotConfig, SpotHead, apply_mask, intensity_bins, loss_mim_at, loss_spot,
    region_mask, select_masks, spot, spot_targets,
)
from .synthdoc import pseudo_entities

PRETRAIN_TASKS = ("mim", "etd", "wtb", "mlm", "ror")


@dataclass
class ModelConfig:
    spot: SpotConfig = field(default_factory=SpotConfig)
    mim: MIMConfig = field(default_factory=MIMConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    group: GroupConfig = field(default_factory=GroupConfig)
    sem: SemConfig = field(default_factory=SemConfig)

    def check(self) -> None:
        c = self.spot.feature_channels
        if self.grid.feature_channels != c:
            raise ValueError(f"grid.feature_channels {self.grid.feature_channels} != spot.feature_channels {c}")
        if self.group.in_channels != self.grid.out_channels:
            raise ValueError("group.in_channels must equal grid.out_channels")
        if self.sem.visual_channels != self.grid.out_channels:
            raise ValueError("sem.visual_channels must equal grid.out_channels")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EntityPrediction:
    box: Box
    text: str
    category: str
    confidence: float
    word_ids: list[int]
    box_score: float = 1.0


@dataclass
class InferenceResult:
    words: list[Word]
    word_confidence: list[float]
    entities: list[EntityPrediction]
    width: int
    height: int


class HIPModel(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        cfg.check()
        self.vocab = Vocab()
        V = len(self.vocab)
        self.backbone = Backbone(cfg.spot)
        self.spot_head = SpotHead(cfg.spot, V)
        self.mim_head = MIMHead(cfg.mim, cfg.spot.feature_channels)
        self.grid_encoder = GridEncoder(cfg.grid, V)
        self.etd_head = ETDHead(cfg.group)
        self.wtb_head = WTBHead(cfg.group)
        self.semantic = SemanticEncoder(cfg.sem, V)
        self.mlm_head = nn.Linear(cfg.sem.hidden, V)
        self.ror_head = PairHead(cfg.sem.hidden, cfg.sem.ror_channels)
        self.tag_head = nn.Linear(cfg.sem.hidden, len(cfg.sem.categories))

    @property
    def dtype(self):
        return self.spot_head.point_pos.dtype

    def heads(self) -> dict[str, nn.Module]:
        """Named parameter groups used by the gradient harness and checkpoints."""
        return {
            "backbone": self.backbone,
            "spot": self.spot_head,
            "grid_encoder": self.grid_encoder,
            "mim": self.mim_head,
            "etd_heatmap": self.etd_head.heat,
            "etd_size": self.etd_head.size,
            "etd_offset": self.etd_head.offset,
            "wtb": self.wtb_head,
            "semantic_encoder": self.semantic,
            "mlm": self.mlm_head,
            "ror": self.ror_head,
            "tag": self.tag_head,
        }

    def _images(self, images: Sequence[np.ndarray]) -> torch.Tensor:
        return torch.as_tensor(np.stack(images)[:, None], dtype=self.dtype)

    # -- training ---------------------------------------------------------------

    def loss_terms(self, docs: Sequence[Document], stage: str, active: Sequence[str] = PRETRAIN_TASKS,
                   rng: np.random.Generator | None = None) -> dict[str, torch.Tensor]:
        """Per-term losses averaged over ``docs``.

        ``stage='pretrain'`` computes spot plus the active pre-training tasks with
        pseudo entity labels; ``stage='finetune'`` computes spot, etd and tag.
        """
        if stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {stage!r}")
        rng = rng if rng is not None else np.random.default_rng(0)
        active = set(active) if stage == "pretrain" else {"etd", "tag"}
        unknown = active - set(PRETRAIN_TASKS) - {"tag"}
        if unknown:
            raise ValueError(f"unknown tasks {sorted(unknown)}")
        cfg = self.cfg
        B = len(docs)
        H, W = docs[0].height, docs[0].width
        stride = cfg.spot.stride

        # mask plans; the WMIM word selection doubles as the MLM selection
        char_plans, word_plans = [], []
        if active & {"mim", "mlm"}:
            for d in docs:
                char_plans.append(select_masks(d, "char", cfg.mim.ratio_char, rng) if d.words else None)
                word_plans.append(select_masks(d, "word", cfg.mim.ratio_word, rng) if d.words else None)
        images = []
        for b, d in enumerate(docs):
            img = d.image
            if "mim" in active and d.words:
                img = apply_mask(apply_mask(img, char_plans[b], cfg.mim.mask_value), word_plans[b], cfg.mim.mask_value)
            images.append(img)
        feat = self.backbone(self._images(images))
        terms: dict[str, torch.Tensor] = {}

        spot_l = []
        up = cfg.spot.upsample
        for b, d in enumerate(docs):
            t = spot_targets(d.words, (feat.shape[-2] * up, feat.shape[-1] * up), cfg.spot.map_stride,
                             self.vocab, cfg.spot.points)
            spot_l.append(loss_spot(self.spot_head, feat[b], t, (H, W)))
        terms["spot"] = torch.stack(spot_l).mean()

        if "mim" in active:
            cm = torch.as_tensor(np.stack([region_mask(p.regions if p else [], H, W) for p in char_plans]))
            wm = torch.as_tensor(np.stack([region_mask(p.regions if p else [], H, W) for p in word_plans]))
            b, y, x = torch.nonzero(cm | wm, as_tuple=True)
            logits = self.mim_head.logits_at(feat, b, y, x)
            target = intensity_bins(np.stack([d.image for d in docs]), cfg.mim.bins)[b, y, x]
            terms["mim"] = loss_mim_at(logits, target, cm[b, y, x], wm[b, y, x],
                                       cfg.mim.lambda_char, cfg.mim.lambda_word)[0]

        need_g = active & {"etd", "wtb", "mlm", "ror", "tag"}
        if not need_g:
            return terms
        ids = torch.as_tensor(np.stack([rasterize_ids(d.chars, H, W, self.vocab) for d in docs]))
        G = self.grid_encoder(self.grid_encoder.grid(ids), feat)

        if stage == "pretrain":
            entity_sets = [pseudo_entities(d) for d in docs]
        else:
            entity_sets = [d.entities for d in docs]

        if "etd" in active:
            maps = self.etd_head(G)
            lam = cfg.group.lambda_size_pretrain if stage == "pretrain" else cfg.group.lambda_size_finetune
            mh, mw = maps.heatmap.shape[-2:]
            terms["etd"] = torch.stack([
                loss_etd(maps, render_etd_targets([e.box for e in ents], (mh, mw), cfg.group.stride), lam, b)[0]
                for b, ents in enumerate(entity_sets)
            ]).mean()

        if "wtb" in active:
            wl = []
            for b, (d, ents) in enumerate(zip(docs, entity_sets)):
                centers = [w.center for w in d.words]
                points = [e.point(d.words) for e in ents]
                out = self.wtb_head(G[b], centers, points, stride)
                wl.append(loss_wtb(out.logits, wtb_targets(centers, [e.box for e in ents])))
            terms["wtb"] = torch.stack(wl).mean()

        if not active & {"mlm", "ror", "tag"}:
            return terms
        seqs, inputs, labels = [], [], []
        for b, d in enumerate(docs):
            visual = sample_center_features(G[b], [w.center for w in d.words], stride)
            seq = build_sequence(d.words, visual, W, H, "train", self.vocab, cfg.sem.position_jitter, rng)
            seqs.append(seq)
            if "mlm" in active and word_plans[b] is not None:
                mb = mlm_corrupt(seq, word_plans[b].indices, rng, cfg.sem.mlm_split, self.vocab)
                inputs.append(mb.input_ids)
                labels.append(mb.labels)
            else:
                inputs.append(None)
                labels.append(None)
        keep = [b for b, s in enumerate(seqs) if len(s) > 0]
        feats = dict(zip(keep, self.semantic([seqs[b] for b in keep], [inputs[b] for b in keep])))
        zero = G.new_zeros(())
        if "mlm" in active:
            ml = [loss_mlm(self.mlm_head(feats[b]), labels[b]) for b in keep if labels[b] is not None]
            terms["mlm"] = torch.stack(ml).mean() if ml else zero
        if "ror" in active:
            rl = [loss_ror(ror_forward(self.ror_head, feats[b], seqs[b]), ror_targets(seqs[b].line_boxes))
                  for b in keep]
            terms["ror"] = torch.stack(rl).mean() if rl else zero
        if "tag" in active:
            cats = list(cfg.sem.categories)
            tl = []
            for b in keep:
                ents = docs[b].entities
                logits, kept = tag_entities(self.tag_head, feats[b], seqs[b], [e.words for e in ents])
                tl.append(loss_tag(logits, [cats.index(ents[k].category) for k in kept]))
            terms["tag"] = torch.stack(tl).mean() if tl else zero
        return terms

    # -- inference ----------------------------------------------------------------

    @torch.no_grad()
    def infer(self, image: np.ndarray, conf_threshold: float | None = None) -> InferenceResult:
        cfg = self.cfg
        H, W = image.shape
        stride = cfg.spot.stride
        feat = self.backbone(self._images([image]))
        spotted = spot(self.spot_head, feat[0], cfg.spot.K, conf_threshold, (H, W), self.vocab)
        bands = row_bands([s.box for s in spotted])
        words = [s.to_word(line_id=band) for s, band in zip(spotted, bands)]
        conf = [s.confidence for s in spotted]
        if not words:
            return InferenceResult([], [], [], W, H)
        ids = torch.as_tensor(rasterize_ids([c for w in words for c in w.chars], H, W, self.vocab))[None]
        G = self.grid_encoder(self.grid_encoder.grid(ids), feat)
        maps = self.etd_head(G)
        decoded = decode_entities(maps, cfg.group.top_n, cfg.group.score_threshold, cfg.group.stride)
        _, groups = assign_words_to_entities([w.box for w in words], [b for b, _ in decoded],
                                             cfg.group.iou_threshold)
        visual = sample_center_features(G[0], [w.center for w in words], stride)
        seq = build_sequence(words, visual, W, H, "infer", self.vocab)
        feats = self.semantic([seq])[0]
        logits, kept = tag_entities(self.tag_head, feats, seq, [m for _, m in groups])
        probs = torch.softmax(logits, -1)
        cats = cfg.sem.categories
        entities = []
        for row, k in enumerate(kept):
            j, members = groups[k]
            if j >= 0:
                box, score = decoded[j]
                category = cats[int(probs[row].argmax())]
                confidence = float(probs[row].max())
            else:
                box, score = words[members[0]].box, 0.0
                category, confidence = "other", float(probs[row, cats.index("other")])
            entities.append(EntityPrediction(tuple(float(v) for v in box), entity_content(words, members),
                                             category, confidence, list(members), float(score)))
        return InferenceResult(words, conf, entities, W, H)
