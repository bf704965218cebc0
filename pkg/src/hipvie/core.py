"""Domain types, hierarchical points, box predicates and spatial ordering."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

Box = tuple[float, float, float, float]
Point = tuple[float, float]

CATEGORIES = ("header", "key", "value", "other")


class AnnotationError(ValueError):
    pass


def box_center(b: Sequence[float]) -> Point:
    return ((b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0)


def box_area(b: Sequence[float]) -> float:
    return max(0.0, b[2] - b[0]) * max(0.0, b[3] - b[1])


def box_union(boxes: Sequence[Sequence[float]]) -> Box:
    if not boxes:
        raise ValueError("union of zero boxes")
    return (
        float(min(b[0] for b in boxes)),
        float(min(b[1] for b in boxes)),
        float(max(b[2] for b in boxes)),
        float(max(b[3] for b in boxes)),
    )


def box_intersection(a: Sequence[float], b: Sequence[float]) -> float:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(0.0, w) * max(0.0, h)


def box_iou(a: Sequence[float], b: Sequence[float]) -> float:
    inter = box_intersection(a, b)
    union = box_area(a) + box_area(b) - inter
    return inter / union if union > 0 else 0.0


def clamp_box(b: Sequence[float], width: float, height: float) -> Box:
    return (
        float(min(max(b[0], 0.0), width)),
        float(min(max(b[1], 0.0), height)),
        float(min(max(b[2], 0.0), width)),
        float(min(max(b[3], 0.0), height)),
    )


def point_in_box(p: Sequence[float], b: Sequence[float]) -> bool:
    """Half-open membership: ``x0 <= x < x1`` and ``y0 <= y < y1``."""
    return b[0] <= p[0] < b[2] and b[1] <= p[1] < b[3]


def entity_point(word_centers: Sequence[Sequence[float]]) -> Point:
    """Entity-level point: the mean of its member word centers."""
    if len(word_centers) == 0:
        raise ValueError("entity has no words")
    xs = [float(c[0]) for c in word_centers]
    ys = [float(c[1]) for c in word_centers]
    return (sum(xs) / len(xs), sum(ys) / len(ys))


def row_bands(boxes: Sequence[Sequence[float]]) -> list[int]:
    """Assign each box a row-band id (0 = topmost band).

    Boxes are swept by vertical center; a new band opens when a center is at
    least half the median box height below the center that opened the
    current band.
    """
    n = len(boxes)
    if n == 0:
        return []
    heights = [b[3] - b[1] for b in boxes]
    threshold = 0.5 * float(np.median(heights))
    cys = [(b[1] + b[3]) / 2.0 for b in boxes]
    sweep = sorted(range(n), key=lambda i: (cys[i], i))
    bands = [0] * n
    band = 0
    anchor = cys[sweep[0]]
    for i in sweep:
        if cys[i] - anchor >= threshold:
            band += 1
            anchor = cys[i]
        bands[i] = band
    return bands


def spatial_order(boxes: Sequence[Sequence[float]]) -> list[int]:
    """Top-to-bottom, left-to-right permutation of ``boxes``.

    Returns ``order`` with ``order[k]`` the index of the k-th box read.
    Ties (same band, same x0) fall back to input index.
    """
    bands = row_bands(boxes)
    return sorted(range(len(boxes)), key=lambda i: (bands[i], boxes[i][0], i))


@dataclass(frozen=True)
class CharBox:
    char: str
    box: Box


@dataclass
class Word:
    chars: list[CharBox]
    line_id: int = 0

    @property
    def text(self) -> str:
        return "".join(c.char for c in self.chars)

    @property
    def box(self) -> Box:
        return box_union([c.box for c in self.chars])

    @property
    def center(self) -> Point:
        return box_center(self.box)


@dataclass
class Line:
    words: list[int]
    box: Box


@dataclass
class Entity:
    words: list[int]
    category: str
    box: Box

    def point(self, doc_words: Sequence[Word]) -> Point:
        return entity_point([doc_words[i].center for i in self.words])


@dataclass
class Document:
    image: np.ndarray
    words: list[Word]
    entities: list[Entity] = field(default_factory=list)

    @property
    def height(self) -> int:
        return int(self.image.shape[0])

    @property
    def width(self) -> int:
        return int(self.image.shape[1])

    @property
    def chars(self) -> list[CharBox]:
        return [c for w in self.words for c in w.chars]

    @property
    def lines(self) -> list[Line]:
        """Lines rebuilt from word ``line_id``; words inside sorted by x0."""
        groups: dict[int, list[int]] = {}
        for i, w in enumerate(self.words):
            groups.setdefault(w.line_id, []).append(i)
        lines = []
        for lid in sorted(groups):
            idx = sorted(groups[lid], key=lambda i: (self.words[i].box[0], i))
            lines.append(Line(idx, box_union([self.words[i].box for i in idx])))
        return lines

    def entity_text(self, entity: Entity) -> str:
        return entity_content(self.words, entity.words)


def entity_content(words: Sequence[Word], word_ids: Sequence[int]) -> str:
    """Entity content: member words in spatial order, space-joined."""
    ids = list(word_ids)
    order = spatial_order([words[i].box for i in ids])
    return " ".join(words[ids[k]].text for k in order)


def validate_document(doc: Document) -> None:
    """Raise AnnotationError on the first violated invariant."""
    H, W = doc.image.shape[:2]
    if doc.image.ndim != 2:
        raise AnnotationError(f"image must be 2-D grayscale, got shape {doc.image.shape}")
    if doc.image.size and (doc.image.min() < 0.0 or doc.image.max() > 1.0):
        raise AnnotationError("image values must lie in [0, 1]")
    for wi, w in enumerate(doc.words):
        if not w.chars:
            raise AnnotationError(f"word {wi} has no characters")
        for c in w.chars:
            x0, y0, x1, y1 = c.box
            if not (x0 < x1 and y0 < y1):
                raise AnnotationError(f"word {wi}: degenerate char box {c.box}")
            if x0 < 0 or y0 < 0 or x1 > W or y1 > H:
                raise AnnotationError(f"word {wi}: char box {c.box} outside {W}x{H}")
            if len(c.char) != 1:
                raise AnnotationError(f"word {wi}: char {c.char!r} is not one codepoint")
    seen: set[int] = set()
    for ei, e in enumerate(doc.entities):
        if not e.words:
            raise AnnotationError(f"entity {ei} has no words")
        for i in e.words:
            if i < 0 or i >= len(doc.words):
                raise AnnotationError(f"entity {ei} references missing word {i}")
            if i in seen:
                raise AnnotationError(f"word {i} belongs to more than one entity")
            seen.add(i)
            if not point_in_box(doc.words[i].center, e.box):
                raise AnnotationError(f"entity {ei}: word {i} center outside entity box")
        if not (e.box[0] < e.box[2] and e.box[1] < e.box[3]):
            raise AnnotationError(f"entity {ei}: degenerate box {e.box}")


# -- annotation JSON ---------------------------------------------------------

def _box_json(b: Sequence[float]) -> list[float]:
    return [round(float(v), 4) for v in b]


def document_to_json(doc: Document) -> dict:
    return {
        "width": doc.width,
        "height": doc.height,
        "words": [
            {
                "text": w.text,
                "box": _box_json(w.box),
                "chars": [{"c": c.char, "box": _box_json(c.box)} for c in w.chars],
                "line_id": w.line_id,
            }
            for w in doc.words
        ],
        "entities": [
            {"word_ids": list(e.words), "category": e.category, "box": _box_json(e.box)}
            for e in doc.entities
        ],
    }


def document_from_json(data: dict, image: np.ndarray | None = None) -> Document:
    try:
        width, height = int(data["width"]), int(data["height"])
        raw_words = data["words"]
        raw_entities = data.get("entities", [])
    except (KeyError, TypeError) as exc:
        raise AnnotationError(f"malformed annotation: {exc}") from exc
    if image is None:
        image = np.ones((height, width), dtype=np.float64)
    if image.shape != (height, width):
        raise AnnotationError(f"image shape {image.shape} != ({height}, {width})")
    words = []
    for rw in raw_words:
        chars = [CharBox(str(c["c"]), tuple(float(v) for v in c["box"])) for c in rw["chars"]]
        w = Word(chars, int(rw.get("line_id", 0)))
        if "text" in rw and rw["text"] != w.text:
            raise AnnotationError(f"word text {rw['text']!r} != chars {w.text!r}")
        words.append(w)
    entities = [
        Entity([int(i) for i in re["word_ids"]], str(re["category"]), tuple(float(v) for v in re["box"]))
        for re in raw_entities
    ]
    doc = Document(np.asarray(image, dtype=np.float64), words, entities)
    validate_document(doc)
    return doc


def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("L"), dtype=np.float64) / 255.0


def save_image(image: np.ndarray, path: str | Path) -> None:
    from PIL import Image

    arr = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="L").save(path)


def save_document(doc: Document, stem: str | Path) -> None:
    """Write ``<stem>.png`` and ``<stem>.json``."""
    stem = Path(stem)
    save_image(doc.image, stem.with_suffix(".png"))
    stem.with_suffix(".json").write_text(json.dumps(document_to_json(doc), indent=1))


def load_document(stem: str | Path) -> Document:
    stem = Path(stem)
    data = json.loads(stem.with_suffix(".json").read_text())
    png = stem.with_suffix(".png")
    image = load_image(png) if png.exists() else None
    return document_from_json(data, image)


class Vocab:
    """Character vocabulary shared by the chargrid and the semantic encoder."""

    PAD, MASK, CLS = "[PAD]", "[MASK]", "[CLS]"

    def __init__(self, alphabet: str | None = None):
        from .glyphs import ALPHABET

        self.alphabet = alphabet if alphabet is not None else ALPHABET
        self.itos = [self.PAD, self.MASK, self.CLS] + list(self.alphabet)
        self.stoi = {s: i for i, s in enumerate(self.itos)}

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def mask_id(self) -> int:
        return 1

    @property
    def n_special(self) -> int:
        return 3

    def encode_char(self, ch: str) -> int:
        try:
            return self.stoi[ch]
        except KeyError:
            raise KeyError(f"character {ch!r} (U+{ord(ch):04X}) not in vocabulary") from None

    def encode(self, text: str) -> list[int]:
        return [self.encode_char(c) for c in text]
