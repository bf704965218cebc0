"""End-to-end orchestration: validated configs, prediction JSON, directory-level infer/evaluate, overlays."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import Document, box_iou, load_document, load_image, spatial_order
from .metrics import EvalReport, evaluate, match_boxes
from .model import PRETRAIN_TASKS, HIPModel, InferenceResult, ModelConfig
from .objectives import TrainConfig, load_checkpoint
from .synthdoc import LayoutSpec

log = logging.getLogger(__name__)


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    corpus: str = "corpus"
    checkpoints: str = "checkpoints"
    reports: str = "reports"


def _pretrain_defaults() -> TrainConfig:
    # constant lr 1e-4 for pre-training
    return TrainConfig(stage="pretrain", steps=1000, lr=1e-4, decay_at=None)


def _finetune_defaults() -> TrainConfig:
    return TrainConfig(stage="finetune", steps=2000, lr=5e-4)


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    layout: LayoutSpec = field(default_factory=LayoutSpec)
    pretrain: TrainConfig = field(default_factory=_pretrain_defaults)
    finetune: TrainConfig = field(default_factory=_finetune_defaults)
    paths: PathsConfig = field(default_factory=PathsConfig)
    stage: str = "finetune"
    seed: int = 0

    def validate(self) -> None:
        try:
            self.model.check()
            self.layout.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"stage must be pretrain or finetune, got {self.stage!r}")
        for name in ("pretrain", "finetune"):
            t = getattr(self, name)
            if t.stage != name:
                raise ConfigError(f"{name}.stage must be {name!r}")
            if t.steps < 0 or t.batch_size < 1 or not t.lr > 0:
                raise ConfigError(f"{name}: steps >= 0, batch_size >= 1 and lr > 0 required")
            bad = set(t.active) - set(PRETRAIN_TASKS)
            if bad:
                raise ConfigError(f"{name}.active has unknown tasks {sorted(bad)}")
        s, g = self.model.spot, self.model.group
        if s.K <= 0:
            raise ConfigError("model.spot.K must be positive")
        for key, v in (("model.spot.conf_threshold", s.conf_threshold), ("model.group.iou_threshold", g.iou_threshold)):
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{key} must lie in (0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)


def _update(obj, data: dict, where: str):
    known = {f.name for f in fields(obj)}
    for key, value in data.items():
        path = f"{where}.{key}" if where else key
        if key not in known:
            raise ConfigError(f"unknown config key {path!r}")
        current = getattr(obj, key)
        if is_dataclass(current):
            if not isinstance(value, dict):
                raise ConfigError(f"{path} must be a mapping")
            _update(current, value, path)
        else:
            if isinstance(value, list):
                value = tuple(value)
            if isinstance(current, bool) != isinstance(value, bool) or (
                    isinstance(current, (int, float)) and not isinstance(value, (int, float))):
                raise ConfigError(f"{path}: expected {type(current).__name__}, got {value!r}")
            if isinstance(current, float) and isinstance(value, int):
                value = float(value)
            setattr(obj, key, value)


def config_from_dict(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    _update(cfg, data, "")
    cfg.validate()
    return cfg


def parse_override(item: str) -> dict:
    """``a.b.c=value`` -> nested dict; value parsed as JSON when possible."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out: dict = {}
    node = out
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
    node[parts[-1]] = value
    return out


def _merge(a: dict, b: dict) -> dict:
    out = copy.deepcopy(a)
    for k, v in b.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | Path | None = None, overrides: Sequence[str] = (), seed: int | None = None) -> PipelineConfig:
    data = json.loads(Path(path).read_text()) if path else {}
    if not isinstance(data, dict):
        raise ConfigError("config file must hold a JSON object")
    for item in overrides:
        data = _merge(data, parse_override(item))
    if seed is not None:
        data = _merge(data, {"seed": seed})
    return config_from_dict(data)


# -- predictions ---------------------------------------------------------------------

_BOX = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
PREDICTION_SCHEMA = {
    "type": "object",
    "required": ["width", "height", "words", "entities"],
    "properties": {
        "width": {"type": "integer", "minimum": 1},
        "height": {"type": "integer", "minimum": 1},
        "words": {"type": "array", "items": {
            "type": "object",
            "required": ["text", "box", "chars", "line_id", "confidence"],
            "properties": {
                "text": {"type": "string", "minLength": 1},
                "box": _BOX,
                "chars": {"type": "array", "items": {
                    "type": "object", "required": ["c", "box"],
                    "properties": {"c": {"type": "string", "minLength": 1, "maxLength": 1}, "box": _BOX},
                }},
                "line_id": {"type": "integer"},
                "confidence": {"type": "number", "minimum": 0, "maximum": 1},
            },
        }},
        "entities": {"type": "array", "items": {
            "type": "object",
            "required": ["word_ids", "category", "box", "text", "confidence"],
            "properties": {
                "word_ids": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
                "category": {"type": "string"},
                "box": _BOX,
                "text": {"type": "string"},
                "confidence": {"type": "number", "minimum": 0, "maximum": 1},
                "box_score": {"type": "number"},
            },
        }},
    },
}


def _r(v: float) -> float:
    return round(float(v), 4)


def prediction_to_json(result: InferenceResult) -> dict:
    return {
        "width": result.width,
        "height": result.height,
        "words": [
            {
                "text": w.text,
                "box": [_r(v) for v in w.box],
                "chars": [{"c": c.char, "box": [_r(v) for v in c.box]} for c in w.chars],
                "line_id": int(w.line_id),
                "confidence": _r(conf),
            }
            for w, conf in zip(result.words, result.word_confidence)
        ],
        "entities": [
            {
                "word_ids": list(map(int, e.word_ids)),
                "category": e.category,
                "box": [_r(v) for v in e.box],
                "text": e.text,
                "confidence": _r(e.confidence),
                "box_score": _r(e.box_score),
            }
            for e in result.entities
        ],
    }


def validate_prediction(pred: dict, categories: Sequence[str] | None = None) -> None:
    """Schema check plus the partition property: each word in exactly one entity."""
    import jsonschema

    jsonschema.validate(pred, PREDICTION_SCHEMA)
    n = len(pred["words"])
    seen: list[int] = []
    for k, e in enumerate(pred["entities"]):
        if categories is not None and e["category"] not in categories:
            raise ValueError(f"entity {k}: unknown category {e['category']!r}")
        seen += e["word_ids"]
    if sorted(seen) != list(range(n)):
        raise ValueError("entity word_ids do not partition the words")


def dumps_prediction(pred: dict) -> str:
    return json.dumps(pred, sort_keys=True, indent=1)


def infer_image(model: HIPModel, image: np.ndarray) -> dict:
    model.eval()
    pred = prediction_to_json(model.infer(np.asarray(image, dtype=np.float64)))
    validate_prediction(pred, model.cfg.sem.categories)
    return pred


def load_model(checkpoint: str | Path) -> HIPModel:
    model, _, _ = load_checkpoint(checkpoint)
    model.eval()
    return model


def _inputs(path: Path) -> list[Path]:
    if path.is_file():
        return [path]
    pngs = sorted(path.glob("*.png"))
    if not pngs:
        raise FileNotFoundError(f"no .png images under {path}")
    return pngs


def infer_paths(checkpoint: str | Path, source: str | Path, out_dir: str | Path) -> list[Path]:
    """Write ``<stem>.json`` predictions for one PNG or every PNG in a directory."""
    model = load_model(checkpoint)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for png in _inputs(Path(source)):
        pred = infer_image(model, load_image(png))
        target = out / f"{png.stem}.json"
        target.write_text(dumps_prediction(pred))
        written.append(target)
    return written


def _annotation_files(d: Path) -> dict[str, Path]:
    return {p.stem: p for p in sorted(d.glob("*.json")) if p.name != "manifest.json"}


def evaluate_dirs(pred_dir, gt_dir, iou_threshold: float = 0.5, method: str = "greedy") -> EvalReport:
    """Pair ``<stem>.json`` files by stem; a missing prediction counts as empty."""
    gts = _annotation_files(Path(gt_dir))
    preds = _annotation_files(Path(pred_dir))
    if not gts:
        raise FileNotFoundError(f"no annotation JSON under {gt_dir}")
    extra = sorted(set(preds) - set(gts))
    if extra:
        raise ValueError(f"predictions without ground truth: {extra[:5]}")
    gt_data, pred_data = [], []
    for stem, path in gts.items():
        g = json.loads(path.read_text())
        gt_data.append(g)
        if stem in preds:
            pred_data.append(json.loads(preds[stem].read_text()))
        else:
            log.warning("no prediction for %s; scored as empty", stem)
            pred_data.append({"width": g["width"], "height": g["height"], "words": [], "entities": []})
    return evaluate(pred_data, gt_data, iou_threshold, method)


def predict_documents(model: HIPModel, docs: Sequence[Document]) -> list[dict]:
    return [infer_image(model, d.image) for d in docs]


def evaluate_model(model: HIPModel, docs: Sequence[Document], method: str = "greedy") -> EvalReport:
    from .core import document_to_json

    return evaluate(predict_documents(model, docs), [document_to_json(d) for d in docs], method=method)


# -- visualization -------------------------------------------------------------------

CORRECT, WRONG, MISSED = (0, 160, 0), (210, 0, 0), (0, 90, 220)
CATEGORY_COLORS = {"header": (150, 0, 170), "key": (0, 110, 220), "value": (0, 150, 60), "other": (200, 120, 0)}


@dataclass
class Overlay:
    path: Path
    classes: list[str]  # per drawn item: "correct", "wrong", "missed", or panel names
    order: list[int] = field(default_factory=list)


def _canvas(image: np.ndarray, scale: int):
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255), 0, 255).astype(np.uint8)
    im = Image.fromarray(arr, mode="L").convert("RGB")
    return im.resize((im.width * scale, im.height * scale), Image.NEAREST)


def _rect(draw, box, scale, color, width=1):
    x0, y0, x1, y1 = (v * scale for v in box)
    draw.rectangle([x0, y0, max(x0, x1 - 1), max(y0, y1 - 1)], outline=color, width=width)


def _gt_entities(doc: Document):
    return [(e.box, e.category, doc.entity_text(e)) for e in doc.entities]


def _pred_entities(pred: dict):
    words = pred["words"]
    out = []
    for e in pred["entities"]:
        ids = e["word_ids"]
        order = spatial_order([words[i]["box"] for i in ids])
        out.append((tuple(e["box"]), e["category"], " ".join(words[ids[k]]["text"] for k in order)))
    return out


def visualize(doc: Document, pred: dict | None, which: str, out_dir, stem: str = "doc", scale: int = 4,
              model: HIPModel | None = None, seed: int = 0) -> Overlay:
    """Write one overlay PNG for ``which`` in {spotting, grouping, labeling, mim, ror}."""
    from PIL import Image, ImageDraw

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{stem}_{which}.png"
    if which == "mim":
        return _visualize_mim(doc, model, path, scale, seed)
    im = _canvas(doc.image, scale)
    draw = ImageDraw.Draw(im)
    classes: list[str] = []
    order: list[int] = []
    if which == "ror":
        lines = doc.lines
        order = spatial_order([ln.box for ln in lines])
        pts = []
        for k in order:
            x0, y0, x1, y1 = lines[k].box
            _rect(draw, lines[k].box, scale, MISSED)
            pts.append(((x0 + x1) / 2 * scale, (y0 + y1) / 2 * scale))
        if len(pts) > 1:
            draw.line(pts, fill=(0, 0, 255), width=2)
        classes = ["line"] * len(order)
    elif which == "spotting":
        if pred is None:
            raise ValueError("spotting overlay needs predictions")
        gt = [(w.box, w.text) for w in doc.words]
        pw = [(tuple(w["box"]), w["text"]) for w in pred["words"]]
        pairs = dict(match_boxes([b for b, _ in pw], [b for b, _ in gt]))
        for i, (box, text) in enumerate(pw):
            ok = i in pairs and gt[pairs[i]][1] == text
            classes.append("correct" if ok else "wrong")
            _rect(draw, box, scale, CORRECT if ok else WRONG)
            draw.text((box[0] * scale, max(0, box[1] * scale - 10)), text, fill=CORRECT if ok else WRONG)
        for j in sorted(set(range(len(gt))) - set(pairs.values())):
            classes.append("missed")
            _rect(draw, gt[j][0], scale, MISSED)
    elif which in ("grouping", "labeling"):
        if pred is None:
            raise ValueError(f"{which} overlay needs predictions")
        gt = _gt_entities(doc)
        pe = _pred_entities(pred)
        pairs = dict(match_boxes([b for b, _, _ in pe], [b for b, _, _ in gt]))
        for i, (box, cat, text) in enumerate(pe):
            if which == "grouping":
                ok = i in pairs
                color = CORRECT if ok else WRONG
            else:
                ok = i in pairs and gt[pairs[i]][1] == cat
                color = CATEGORY_COLORS.get(cat, WRONG)
                draw.text((box[0] * scale, max(0, box[1] * scale - 10)), cat + ("" if ok else " x"), fill=color)
            classes.append("correct" if ok else "wrong")
            _rect(draw, box, scale, color, width=2 if ok else 1)
        for j in sorted(set(range(len(gt))) - set(pairs.values())):
            classes.append("missed")
            _rect(draw, gt[j][0], scale, MISSED)
    else:
        raise ValueError(f"unknown overlay {which!r}")
    im.save(path)
    return Overlay(path, classes, order)


def _visualize_mim(doc: Document, model: HIPModel | None, path: Path, scale: int, seed: int) -> Overlay:
    """Two panels: the original with masked regions outlined, and the reconstruction of the masked input."""
    import torch
    from PIL import Image, ImageDraw

    from .spotting import apply_mask, select_masks

    if model is None:
        raise ValueError("mim overlay needs a model")
    rng = np.random.default_rng(seed)
    cfg = model.cfg.mim
    masked = doc.image
    regions = []
    if doc.words:
        for kind, ratio in (("char", cfg.ratio_char), ("word", cfg.ratio_word)):
            plan = select_masks(doc, kind, ratio, rng)
            masked = apply_mask(masked, plan, cfg.mask_value)
            regions += plan.regions
    model.eval()
    with torch.no_grad():
        logits = model.mim_head(model.backbone(model._images([masked])))
    recon = logits[0].argmax(0).numpy() / (cfg.bins - 1)
    left, right = _canvas(doc.image, scale), _canvas(recon, scale)
    draw = ImageDraw.Draw(left)
    for box in regions:
        _rect(draw, box, scale, WRONG)
    im = Image.new("RGB", (left.width * 2, left.height), (255, 255, 255))
    im.paste(left, (0, 0))
    im.paste(right, (left.width, 0))
    im.save(path)
    return Overlay(path, ["original", "reconstruction"])
