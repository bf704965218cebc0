"""Synthetic form-like documents with full hierarchical annotation.

Pages are grayscale, words are drawn from a fixed 5x7 bitmap alphabet on a
monospaced grid, and every document carries char/word/line/entity labels.
The module also derives the unsupervised pre-training labels: pseudo
entity boxes from colon/indentation cues and line reading order.
"""
from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import (
    CATEGORIES,
    CharBox,
    Document,
    Entity,
    Word,
    box_intersection,
    box_union,
    save_document,
    spatial_order,
    validate_document,
)
from .glyphs import GLYPH_H, GLYPH_W, glyph

log = logging.getLogger(__name__)

KEY_WORDS = [
    "name", "date", "total", "phone", "addr", "city", "code", "amount",
    "id", "to", "from", "email", "fax", "ref", "tax", "qty", "zip", "item",
]
VALUE_WORDS = [
    "john", "smith", "main", "street", "north", "park", "acme", "corp",
    "blue", "river", "lake", "road", "west", "hill", "box", "paid", "due",
    "cash", "card", "net", "unit", "alpha", "delta", "omega",
]
HEADER_WORDS = ["invoice", "form", "report", "receipt", "order", "claim", "summary", "memo"]
OTHER_WORDS = ["note", "page", "copy", "draft", "file", "signed", "see", "over"]


@dataclass
class LayoutSpec:
    width: int = 128
    height: int = 128
    n_key_value_pairs: int = 3
    n_headers: int = 1
    n_other: int = 1
    char_w: int = 6  # glyph advance (5 px glyph + 1 px spacing)
    line_h: int = 9  # char box height (1 px pad above and below the glyph)
    line_pitch: int = 12
    margin: int = 6
    indent: int = 12
    colon_prob: float = 0.95
    below_prob: float = 0.3
    wrap_prob: float = 0.2
    max_word_len: int = 8
    noise_std: float = 0.02
    categories: tuple[str, ...] = CATEGORIES

    @classmethod
    def small(cls) -> "LayoutSpec":
        """64x64 page with one header and one key/value pair (gradient checks, quick tests)."""
        return cls(width=64, height=64, n_key_value_pairs=1, n_headers=1, n_other=0, max_word_len=4, below_prob=1.0)

    def validate(self) -> None:
        if self.width % 32 or self.height % 32:
            raise ValueError("page size must be a multiple of 32")
        if min(self.n_key_value_pairs, self.n_headers, self.n_other) < 0:
            raise ValueError("element counts must be non-negative")
        if not 0.0 <= self.colon_prob <= 1.0:
            raise ValueError("colon_prob must lie in [0, 1]")
        if self.char_w < GLYPH_W + 1 or self.line_h < GLYPH_H + 2:
            raise ValueError("character cell too small for the glyph alphabet")


class LayoutOverflow(RuntimeError):
    pass


def _random_token(rng, pool, max_len):
    if rng.random() < 0.25:
        n = int(rng.integers(1, min(5, max_len) + 1))
        return "".join(str(d) for d in rng.integers(0, 10, size=n))
    return str(pool[int(rng.integers(len(pool)))])[:max_len]


def _plan(spec: LayoutSpec, rng, n_pairs: int, n_headers: int, n_other: int):
    """Abstract entity plan: headers first, then shuffled key/value pairs and other lines."""
    ents = []
    for _ in range(n_headers):
        n = int(rng.integers(1, 3))
        ents.append(("header", [[_random_token(rng, HEADER_WORDS, spec.max_word_len) for _ in range(n)]]))
    for _ in range(n_pairs):
        n_key = int(rng.integers(1, 3))
        key = [str(KEY_WORDS[int(rng.integers(len(KEY_WORDS)))]) for _ in range(n_key)]
        if rng.random() < spec.colon_prob:
            key[-1] = key[-1][: spec.max_word_len - 1] + ":"
        n_val = int(rng.integers(1, 4))
        val = [_random_token(rng, VALUE_WORDS, spec.max_word_len) for _ in range(n_val)]
        place = "below" if rng.random() < spec.below_prob else "right"
        wrap = n_val >= 2 and rng.random() < spec.wrap_prob
        ents.append(("key", [key], place, val, wrap))
    for _ in range(n_other):
        n = int(rng.integers(1, 3))
        ents.append(("other", [[_random_token(rng, OTHER_WORDS, spec.max_word_len) for _ in range(n)]]))
    # headers first; pairs and other lines shuffled below them
    body = ents[n_headers:]
    order = rng.permutation(len(body))
    return ents[:n_headers] + [body[i] for i in order]


def _layout(spec: LayoutSpec, rng, plan):
    """Place tokens; returns (words as (text, x, line_no), entity specs) or raises LayoutOverflow."""
    cw = spec.char_w
    right_edge = spec.width - spec.margin
    placed = []  # (text, x, line_no)
    entities = []  # (category, [placed indices])
    line = 0

    def width_of(tokens):
        return sum(len(t) for t in tokens) * cw + (len(tokens) - 1) * cw

    def put(tokens, x, line_no):
        ids = []
        for t in tokens:
            if x + len(t) * cw > right_edge:
                raise LayoutOverflow("line too long")
            placed.append((t, x, line_no))
            ids.append(len(placed) - 1)
            x += (len(t) + 1) * cw
        return ids

    for item in plan:
        cat = item[0]
        if cat in ("header", "other"):
            tokens = item[1][0]
            free = right_edge - spec.margin - width_of(tokens)
            if free < 0:
                raise LayoutOverflow("line too long")
            x = spec.margin
            if cat == "header" and rng.random() < 0.5:
                x = spec.margin + (free // 2 // cw) * cw
            entities.append((cat, put(tokens, x, line)))
            line += 1
            continue
        _, (key,), place, val, wrap = item
        kids = put(key, spec.margin, line)
        entities.append(("key", kids))
        split = len(val) // 2 if wrap else len(val)
        first, rest = val[:split], val[split:]
        if place == "right":
            vx = spec.margin + width_of(key) + 2 * cw
            vids = put(first, vx, line)
            cont_x = vx + cw * 2 if vx + 2 * cw + width_of(rest) <= right_edge else vx
        else:
            line += 1
            vids = put(first, spec.margin, line)
            cont_x = spec.margin + spec.indent
        if rest:
            line += 1
            vids += put(rest, cont_x, line)
        entities.append(("value", vids))
        line += 1
    n_lines = line
    if spec.margin + n_lines * spec.line_pitch > spec.height:
        raise LayoutOverflow(f"{n_lines} lines do not fit in height {spec.height}")
    return placed, entities


def _render(spec: LayoutSpec, rng, placed, entities) -> Document:
    H, W = spec.height, spec.width
    image = np.ones((H, W), dtype=np.float64)
    words = []
    for text, x, line_no in placed:
        y = spec.margin + line_no * spec.line_pitch
        chars = []
        for k, ch in enumerate(text):
            cx = x + k * spec.char_w
            chars.append(CharBox(ch, (float(cx), float(y), float(cx + spec.char_w), float(y + spec.line_h))))
            g = glyph(ch)
            gy = y + (spec.line_h - GLYPH_H) // 2
            image[gy:gy + GLYPH_H, cx:cx + GLYPH_W][g] = 0.0
        words.append(Word(chars, line_no))
    if spec.noise_std > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise_std, size=image.shape), 0.0, 1.0)
    # PNG round trip is exact only on the 8-bit lattice
    image = np.rint(image * 255.0) / 255.0
    ents = [Entity(ids, cat, box_union([words[i].box for i in ids])) for cat, ids in entities]
    return Document(image, words, ents)


def generate_document(spec: LayoutSpec | None = None, seed: int = 0, max_retries: int = 8) -> Document:
    """Deterministic synthetic form for ``seed``.

    On layout overflow the element counts are reduced and layout retried;
    ``LayoutOverflow`` propagates once nothing is left to drop.
    """
    spec = spec or LayoutSpec()
    spec.validate()
    n_pairs, n_headers, n_other = spec.n_key_value_pairs, spec.n_headers, spec.n_other
    for attempt in range(max_retries + 1):
        rng = np.random.default_rng([seed, attempt])
        try:
            plan = _plan(spec, rng, n_pairs, n_headers, n_other)
            placed, entities = _layout(spec, rng, plan)
        except LayoutOverflow:
            if n_other > 0:
                n_other -= 1
            elif n_pairs > 1:
                n_pairs -= 1
            elif n_headers > 0:
                n_headers -= 1
            elif attempt >= max_retries:
                raise
            continue
        doc = _render(spec, rng, placed, entities)
        validate_document(doc)
        return doc
    raise LayoutOverflow(f"seed {seed}: layout did not fit after {max_retries} retries")


# -- pre-training pseudo labels ------------------------------------------------

def pseudo_entity_groups(doc: Document) -> list[list[int]]:
    """Word-id groups from colon splits and indented-continuation merges."""
    lines = doc.lines
    if not lines:
        return []
    glyph_w = float(np.median([c.box[2] - c.box[0] for c in doc.chars]))
    line_h = float(np.median([ln.box[3] - ln.box[1] for ln in lines]))
    order = spatial_order([ln.box for ln in lines])
    segments_per_line = []
    for li in order:
        segs, cur = [], []
        for wi in lines[li].words:
            cur.append(wi)
            if doc.words[wi].text.endswith(":"):
                segs.append(cur)
                cur = []
        if cur:
            segs.append(cur)
        segments_per_line.append((lines[li], segs))

    groups: list[list[int]] = []
    boxes: list[tuple] = []

    def gbox(ids):
        return box_union([doc.words[i].box for i in ids])

    prev_last = None  # index into groups of the previous line's last segment
    for ln, segs in segments_per_line:
        start = 0
        if prev_last is not None:
            block = boxes[prev_last]
            first_box = gbox(segs[0])
            indented = first_box[0] - block[0] > glyph_w
            adjacent = first_box[1] - block[3] < 1.5 * line_h
            if indented and adjacent:
                merged = box_union([block, first_box])
                rest = [gbox(s) for s in segs[1:]]
                others = [b for k, b in enumerate(boxes) if k != prev_last] + rest
                if all(box_intersection(merged, b) == 0 for b in others):
                    groups[prev_last] = groups[prev_last] + segs[0]
                    boxes[prev_last] = merged
                    start = 1
                    if len(segs) == 1:
                        continue
        for s in segs[start:]:
            groups.append(list(s))
            boxes.append(gbox(s))
        prev_last = len(groups) - 1
    return groups


def pseudo_entities(doc: Document) -> list[Entity]:
    """Pseudo entities (category left empty) for ETD/WTB pre-training."""
    return [
        Entity(ids, "", box_union([doc.words[i].box for i in ids]))
        for ids in pseudo_entity_groups(doc)
    ]


def pseudo_entity_boundaries(doc: Document) -> list[tuple]:
    return [e.box for e in pseudo_entities(doc)]


def pseudo_reading_order(lines) -> list[int]:
    """Line reading order (top-to-bottom, left-to-right)."""
    return spatial_order([ln.box for ln in lines])


def boundary_recovery(doc: Document) -> tuple[int, int]:
    """(entities whose exact word set is a pseudo group, total entities)."""
    pseudo = {frozenset(g) for g in pseudo_entity_groups(doc)}
    hit = sum(frozenset(e.words) in pseudo for e in doc.entities)
    return hit, len(doc.entities)


# -- corpus ------------------------------------------------------------------

@dataclass
class CorpusManifest:
    spec: dict
    seeds: list[int]
    category_counts: dict = field(default_factory=dict)
    files: list[str] = field(default_factory=list)


def generate_corpus(out_dir, count: int, seed: int = 0, spec: LayoutSpec | None = None) -> CorpusManifest:
    """Write ``count`` documents (PNG + JSON) and ``manifest.json`` into ``out_dir``."""
    spec = spec or LayoutSpec()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = [seed + i for i in range(count)]
    counts: Counter = Counter()
    files = []
    for s in seeds:
        doc = generate_document(spec, s)
        counts.update(e.category for e in doc.entities)
        name = f"doc_{s:06d}"
        save_document(doc, out / name)
        files.append(name)
    manifest = CorpusManifest(asdict(spec), seeds, dict(sorted(counts.items())), files)
    (out / "manifest.json").write_text(json.dumps(asdict(manifest), indent=1))
    return manifest


def load_corpus(out_dir) -> list[Document]:
    from .core import load_document

    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return [load_document(out / name) for name in manifest["files"]]
