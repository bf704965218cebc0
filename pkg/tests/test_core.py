import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hipvie.core import (
    AnnotationError, CharBox, Document, Entity, Vocab, Word, box_iou, document_from_json,
    document_to_json, entity_content, entity_point, load_document, point_in_box, row_bands,
    save_document, spatial_order, validate_document,
)
from oracles import comparator_order


def test_entity_point_examples():
    assert entity_point([(0, 0), (2, 2)]) == (1, 1)
    assert entity_point([(5, 7)]) == (5, 7)
    # [DERIVED] (1+2+6)/3 = 3, (1+3+2)/3 = 2
    assert entity_point([(1, 1), (2, 3), (6, 2)]) == pytest.approx((3, 2))


def test_entity_point_empty():
    with pytest.raises(ValueError, match="entity has no words"):
        entity_point([])


pts = st.lists(st.tuples(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3)), min_size=1, max_size=12)


@given(pts, st.randoms())
def test_entity_point_permutation_and_hull(points, rnd):
    p = entity_point(points)
    shuffled = list(points)
    rnd.shuffle(shuffled)
    q = entity_point(shuffled)
    assert p == pytest.approx(q, abs=1e-9)
    xs, ys = zip(*points)
    assert min(xs) - 1e-9 <= p[0] <= max(xs) + 1e-9
    assert min(ys) - 1e-9 <= p[1] <= max(ys) + 1e-9


def test_point_in_box_edges():
    assert point_in_box((1, 1), (0, 0, 2, 2))
    assert not point_in_box((2, 2), (0, 0, 2, 2))
    assert point_in_box((0, 0), (0, 0, 2, 2))


@given(st.integers(0, 20), st.integers(0, 20), st.integers(1, 20), st.integers(1, 20))
def test_point_in_box_pixel_scan(x0, y0, w, h):
    b = (x0, y0, x0 + w, y0 + h)
    grid = np.zeros((64, 64), dtype=bool)
    grid[y0:y0 + h, x0:x0 + w] = True
    for y in range(0, 64, 3):
        for x in range(0, 64, 3):
            assert point_in_box((x, y), b) == grid[y, x]


def test_spatial_order_examples():
    assert spatial_order([(0, 10, 5, 20), (6, 10, 9, 20), (0, 30, 5, 40)]) == [0, 1, 2]
    assert spatial_order([(3, 3, 4, 4)]) == [0]
    assert spatial_order([]) == []


def _boxes(draw_list):
    return [(x, y, x + w, y + h) for x, y, w, h in draw_list]


box_lists = st.lists(st.tuples(st.integers(0, 100), st.integers(0, 100), st.integers(1, 20), st.integers(1, 12)),
                     min_size=1, max_size=10).map(_boxes)


@given(box_lists)
def test_spatial_order_matches_comparator_oracle(boxes):
    assert spatial_order(boxes) == comparator_order(boxes)


@given(box_lists)
def test_spatial_order_bijection_and_idempotent(boxes):
    order = spatial_order(boxes)
    assert sorted(order) == list(range(len(boxes)))
    reordered = [boxes[i] for i in order]
    assert spatial_order(reordered) == list(range(len(boxes)))


def test_spatial_order_six_random_nonoverlapping():
    rng = np.random.default_rng(3)
    for _ in range(50):
        cells = rng.choice(36, size=6, replace=False)
        boxes = [(float(c % 6 * 20 + rng.integers(0, 5)), float(c // 6 * 15 + rng.integers(0, 3)),
                  0, 0) for c in cells]
        boxes = [(x, y, x + 12, y + 9) for x, y, _, _ in boxes]
        assert spatial_order(boxes) == comparator_order(boxes)


def test_row_bands_same_row():
    # centres 15 and 17 with median height 10 share a band; 35 opens a new one
    assert row_bands([(0, 10, 5, 20), (9, 12, 12, 22), (0, 30, 5, 40)]) == [0, 0, 1]


def test_box_iou():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 2, 2), (2, 2, 4, 4)) == 0.0
    assert box_iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3)


def _word(text, x, y, line=0):
    return Word([CharBox(c, (x + 6 * k, y, x + 6 * k + 6, y + 9)) for k, c in enumerate(text)], line)


def test_word_properties():
    w = _word("ab", 10, 20)
    assert w.text == "ab"
    assert w.box == (10, 20, 22, 29)
    assert w.center == (16, 24.5)
    assert point_in_box(w.center, w.box)


def test_entity_content_spatial_order():
    words = [_word("b", 30, 0), _word("a", 0, 0), _word("c", 0, 12, 1)]
    assert entity_content(words, [0, 1, 2]) == "a b c"


def test_document_json_roundtrip(tmp_path, docs):
    d = docs[0]
    data = document_to_json(d)
    back = document_from_json(json.loads(json.dumps(data)), d.image)
    assert document_to_json(back) == data
    save_document(d, tmp_path / "x")
    loaded = load_document(tmp_path / "x")
    assert np.array_equal(loaded.image, d.image)
    assert document_to_json(loaded) == data


def test_lines_sorted_and_cover_words(docs):
    for d in docs:
        seen = []
        for ln in d.lines:
            xs = [d.words[i].box[0] for i in ln.words]
            assert xs == sorted(xs)
            seen += ln.words
        assert sorted(seen) == list(range(len(d.words)))


def test_validate_document_errors():
    img = np.ones((32, 32))
    w = _word("ab", 0, 0)
    validate_document(Document(img, [w], [Entity([0], "key", w.box)]))
    with pytest.raises(AnnotationError, match="more than one entity"):
        validate_document(Document(img, [w], [Entity([0], "key", w.box), Entity([0], "key", w.box)]))
    with pytest.raises(AnnotationError, match="outside"):
        validate_document(Document(img, [_word("abcdefg", 0, 0)], []))
    with pytest.raises(AnnotationError, match="center outside"):
        validate_document(Document(img, [w], [Entity([0], "key", (20, 20, 30, 30))]))
    with pytest.raises(AnnotationError, match="missing word"):
        validate_document(Document(img, [w], [Entity([3], "key", w.box)]))
    with pytest.raises(AnnotationError, match=r"\[0, 1\]"):
        validate_document(Document(img * 2, [w], []))


def test_vocab():
    v = Vocab()
    assert (v.pad_id, v.mask_id, v.n_special) == (0, 1, 3)
    assert v.encode("ab") == [3, 4]
    with pytest.raises(KeyError, match="U\\+00E9"):
        v.encode_char("é")
