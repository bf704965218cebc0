"""OCR-based (1-NED, grouping F1, labeling accuracy, EE 1-NED) and OCR-free (entity F1, TED) metrics."""
from __future__ import annotations

from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .core import Box, box_iou, spatial_order


def levenshtein(a: Sequence, b: Sequence) -> int:
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def ned(a: str, b: str) -> float:
    """Levenshtein distance normalised by the longer length (0 for two empty strings)."""
    n = max(len(a), len(b))
    return levenshtein(a, b) / n if n else 0.0


def match_boxes(pred: Sequence[Box], gt: Sequence[Box], iou_threshold: float = 0.5,
                method: str = "greedy") -> list[tuple[int, int]]:
    """One-to-one (pred, gt) pairs with IoU >= threshold.

    ``greedy`` takes pairs by descending IoU; ``hungarian`` maximises total IoU.
    """
    if not pred or not gt:
        return []
    iou = np.array([[box_iou(p, g) for g in gt] for p in pred])
    if method == "hungarian":
        from scipy.optimize import linear_sum_assignment

        rows, cols = linear_sum_assignment(-np.where(iou >= iou_threshold, iou, 0.0))
        return sorted((int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= iou_threshold)
    if method != "greedy":
        raise ValueError(f"unknown matcher {method!r}")
    cand = [(-iou[i, j], i, j) for i in range(len(pred)) for j in range(len(gt)) if iou[i, j] >= iou_threshold]
    cand.sort()
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in cand:
        if i not in used_p and j not in used_g:
            used_p.add(i)
            used_g.add(j)
            pairs.append((i, j))
    return sorted(pairs)


@dataclass
class NedTally:
    """Running sum for 1-NED: matched pairs add their NED, misses and spurious items add 1."""
    total: float = 0.0
    count: int = 0

    def add(self, other: "NedTally") -> None:
        self.total += other.total
        self.count += other.count

    @property
    def score(self) -> float:
        return 1.0 - self.total / self.count if self.count else 1.0


def _ned_tally(pred_boxes, pred_texts, gt_boxes, gt_texts, iou_threshold, method, ok=None) -> NedTally:
    pairs = match_boxes(pred_boxes, gt_boxes, iou_threshold, method)
    total = 0.0
    for i, j in pairs:
        total += ned(pred_texts[i], gt_texts[j]) if ok is None or ok(i, j) else 1.0
    missed = len(gt_boxes) - len(pairs)
    spurious = len(pred_boxes) - len(pairs)
    return NedTally(total + missed + spurious, len(gt_boxes) + spurious)


def spotting_score(pred_words, gt_words, iou_threshold: float = 0.5, method: str = "greedy") -> float:
    """1 - mean NED over IoU-matched words; ``*_words`` are (box, text) pairs."""
    return _ned_tally([b for b, _ in pred_words], [t for _, t in pred_words],
                      [b for b, _ in gt_words], [t for _, t in gt_words], iou_threshold, method).score


def f1_from_counts(matched: int, n_pred: int, n_gt: int) -> tuple[float, float, float]:
    p = matched / n_pred if n_pred else 0.0
    r = matched / n_gt if n_gt else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return f, p, r


def grouping_f1(pred_boxes, gt_boxes, iou: float = 0.5, method: str = "greedy") -> float:
    pairs = match_boxes(list(pred_boxes), list(gt_boxes), iou, method)
    return f1_from_counts(len(pairs), len(pred_boxes), len(gt_boxes))[0]


def labeling_accuracy(pred_categories, gt_categories) -> tuple[float, bool]:
    """(accuracy, defined): fraction of equal categories over matched pairs; (0, False) if none."""
    if len(pred_categories) != len(gt_categories):
        raise ValueError("category lists differ in length")
    if not gt_categories:
        return 0.0, False
    hits = sum(p == g for p, g in zip(pred_categories, gt_categories))
    return hits / len(gt_categories), True


def entity_f1(pred_entities, gt_entities) -> float:
    """Exact multiset match on (category, content) pairs."""
    return _entity_f1_counts(pred_entities, gt_entities)[0]


def _entity_f1_counts(pred_entities, gt_entities):
    p, g = Counter(map(tuple, pred_entities)), Counter(map(tuple, gt_entities))
    matched = sum((p & g).values())
    n_p, n_g = sum(p.values()), sum(g.values())
    return f1_from_counts(matched, n_p, n_g)[0], matched, n_p, n_g


# -- tree edit distance ----------------------------------------------------------

@dataclass
class Tree:
    label: str
    children: list["Tree"] = field(default_factory=list)

    def size(self) -> int:
        return 1 + sum(c.size() for c in self.children)


def _postorder(tree: Tree):
    labels, lmld = [], []

    def walk(node):
        first = None
        for c in node.children:
            leaf = walk(c)
            if first is None:
                first = leaf
        labels.append(node.label)
        idx = len(labels) - 1
        lmld.append(idx if first is None else first)
        return lmld[idx]

    walk(tree)
    return labels, lmld


def tree_edit_distance(t1: Tree | None, t2: Tree | None) -> int:
    """Zhang-Shasha ordered tree edit distance with unit costs."""
    if t1 is None:
        return 0 if t2 is None else t2.size()
    if t2 is None:
        return t1.size()
    l1, lm1 = _postorder(t1)
    l2, lm2 = _postorder(t2)
    n, m = len(l1), len(l2)
    kr1 = sorted({max(i for i in range(n) if lm1[i] == lm1[k]) for k in range(n)})
    kr2 = sorted({max(j for j in range(m) if lm2[j] == lm2[k]) for k in range(m)})
    td = np.zeros((n, m), dtype=np.int64)
    for i in kr1:
        for j in kr2:
            li, lj = lm1[i], lm2[j]
            fd = np.zeros((i - li + 2, j - lj + 2), dtype=np.int64)
            fd[1:, 0] = np.arange(1, i - li + 2)
            fd[0, 1:] = np.arange(1, j - lj + 2)
            for x in range(li, i + 1):
                for y in range(lj, j + 1):
                    a, b = x - li + 1, y - lj + 1
                    if lm1[x] == li and lm2[y] == lj:
                        fd[a, b] = min(fd[a - 1, b] + 1, fd[a, b - 1] + 1,
                                       fd[a - 1, b - 1] + (l1[x] != l2[y]))
                        td[x, y] = fd[a, b]
                    else:
                        p, q = lm1[x] - li, lm2[y] - lj
                        fd[a, b] = min(fd[a - 1, b] + 1, fd[a, b - 1] + 1, fd[p, q] + td[x, y])
    return int(td[n - 1, m - 1])


def entity_tree(entities) -> Tree:
    """root -> one node per entity (its category) -> one leaf per content word.

    Entities are sorted by (category, content) so the tree ignores list order.
    """
    root = Tree("<root>")
    for cat, content in sorted((str(c), str(t)) for c, t in entities):
        root.children.append(Tree(cat, [Tree(tok) for tok in content.split()]))
    return root


def ted_accuracy(pred: Tree, gt: Tree) -> float:
    """max(0, 1 - TED(pred, gt) / TED(empty, gt)); the empty tree is a bare root."""
    empty = Tree(gt.label)
    norm = tree_edit_distance(empty, gt)
    d = tree_edit_distance(pred, gt)
    if norm == 0:
        return 1.0 if d == 0 else 0.0
    return max(0.0, 1.0 - d / norm)


# -- document-level evaluation -------------------------------------------------------

@dataclass
class EvalReport:
    spotting_1ned: float = 0.0
    grouping_f1: float = 0.0
    labeling_acc: float = 0.0
    labeling_defined: bool = False
    ee_1ned: float = 0.0
    entity_f1: float = 0.0
    ted_acc: float = 0.0
    counts: dict = field(default_factory=dict)
    matcher: str = "greedy"
    iou_threshold: float = 0.5
    documents: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _entities_of(ann: dict):
    """(box, category, content) per entity of an annotation/prediction JSON dict."""
    words = ann["words"]
    out = []
    for e in ann.get("entities", []):
        ids = list(e["word_ids"])
        order = spatial_order([words[i]["box"] for i in ids])
        content = " ".join(words[ids[k]]["text"] for k in order)
        out.append((tuple(e["box"]), e["category"], content))
    return out


def evaluate(preds: Sequence[dict], gts: Sequence[dict], iou_threshold: float = 0.5,
             method: str = "greedy") -> EvalReport:
    """Micro-averaged metrics over paired prediction / ground-truth JSON documents.

    Spotting, grouping, labeling and entity F1 pool counts over documents; TED
    accuracy is the mean of per-document accuracies.
    """
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground-truth documents")
    spot, ee = NedTally(), NedTally()
    g_match = g_pred = g_gt = 0
    lab_hit = lab_n = 0
    f_match = f_pred = f_gt = 0
    teds = []
    for pd, gd in zip(preds, gts):
        spot.add(_ned_tally([tuple(w["box"]) for w in pd["words"]], [w["text"] for w in pd["words"]],
                            [tuple(w["box"]) for w in gd["words"]], [w["text"] for w in gd["words"]],
                            iou_threshold, method))
        pe, ge = _entities_of(pd), _entities_of(gd)
        pairs = match_boxes([b for b, _, _ in pe], [b for b, _, _ in ge], iou_threshold, method)
        g_match += len(pairs)
        g_pred += len(pe)
        g_gt += len(ge)
        lab_n += len(pairs)
        lab_hit += sum(pe[i][1] == ge[j][1] for i, j in pairs)
        ee.add(_ned_tally([b for b, _, _ in pe], [t for _, _, t in pe], [b for b, _, _ in ge],
                          [t for _, _, t in ge], iou_threshold, method, ok=lambda i, j: pe[i][1] == ge[j][1]))
        _, m, n_p, n_g = _entity_f1_counts([(c, t) for _, c, t in pe], [(c, t) for _, c, t in ge])
        f_match += m
        f_pred += n_p
        f_gt += n_g
        teds.append(ted_accuracy(entity_tree([(c, t) for _, c, t in pe]), entity_tree([(c, t) for _, c, t in ge])))
    return EvalReport(
        spotting_1ned=spot.score,
        grouping_f1=f1_from_counts(g_match, g_pred, g_gt)[0],
        labeling_acc=lab_hit / lab_n if lab_n else 0.0,
        labeling_defined=lab_n > 0,
        ee_1ned=ee.score,
        entity_f1=f1_from_counts(f_match, f_pred, f_gt)[0],
        ted_acc=float(np.mean(teds)) if teds else 0.0,
        counts={"matched": g_match, "missed": g_gt - g_match, "spurious": g_pred - g_match,
                "words_gt": sum(len(g["words"]) for g in gts), "words_pred": sum(len(p["words"]) for p in preds)},
        matcher=method,
        iou_threshold=iou_threshold,
        documents=len(gts),
    )


def format_report(r: EvalReport, protocol: str | None = None) -> str:
    """Aligned text table; ``protocol`` in {ocr-based, ocr-free} limits the score rows."""
    rows = [
        ("matcher", f"{r.matcher} IoU>={r.iou_threshold}"),
        ("documents", str(r.documents)),
    ]
    if protocol in (None, "ocr-based"):
        rows += [
            ("spotting 1-NED", f"{r.spotting_1ned:.4f}"),
            ("grouping F1", f"{r.grouping_f1:.4f}"),
            ("labeling acc", f"{r.labeling_acc:.4f}" + ("" if r.labeling_defined else " (no matched entities)")),
            ("EE 1-NED", f"{r.ee_1ned:.4f}"),
        ]
    if protocol in (None, "ocr-free"):
        rows += [("entity F1", f"{r.entity_f1:.4f}"), ("TED acc", f"{r.ted_acc:.4f}")]
    rows.append(("matched/missed/spurious",
                 f"{r.counts.get('matched')}/{r.counts.get('missed')}/{r.counts.get('spurious')}"))
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)
