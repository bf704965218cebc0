import itertools
import random

import pytest
from hypothesis import given, settings, strategies as st

from hipvie.metrics import (
    Tree, entity_f1, entity_tree, evaluate, f1_from_counts, format_report, grouping_f1, labeling_accuracy,
    levenshtein, match_boxes, ned, spotting_score, ted_accuracy, tree_edit_distance,
)
from oracles import all_trees, lev_recursive, ned_oracle, ted_oracle

texts = st.text(alphabet="abc", max_size=7)


def test_ned_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert ned("kitten", "sitting") == pytest.approx(3 / 7)
    assert ned("", "") == 0.0
    assert ned("abc", "") == 1.0


@given(texts, texts)
def test_ned_matches_oracle_and_is_symmetric(a, b):
    assert levenshtein(a, b) == lev_recursive(a, b)
    assert ned(a, b) == ned_oracle(a, b) == ned(b, a)
    assert 0.0 <= ned(a, b) <= 1.0


@given(texts, texts, texts)
def test_levenshtein_triangle(a, b, c):
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


def test_spotting_score_example():
    # one exact match and one ground-truth word with no prediction -> (0 + 1) / 2 NED
    gt = [((0, 0, 10, 10), "ab"), ((20, 0, 30, 10), "cd")]
    pred = [((0, 0, 10, 10), "ab")]
    assert spotting_score(pred, gt) == pytest.approx(0.5)
    assert spotting_score(gt, gt) == 1.0
    assert spotting_score([], []) == 1.0
    # spurious prediction adds 1 to the denominator and the error
    assert spotting_score(gt + [((50, 50, 60, 60), "x")], gt) == pytest.approx(2 / 3)
    # IoU 1/3 is below the threshold
    assert spotting_score([((5, 0, 15, 10), "ab")], [((0, 0, 10, 10), "ab")]) == 0.0


def test_f1_examples():
    assert f1_from_counts(2, 3, 4)[0] == pytest.approx(4 / 7)
    assert f1_from_counts(0, 0, 0) == (0.0, 0.0, 0.0)
    gt = [(0, 0, 10, 10), (20, 0, 30, 10), (40, 0, 50, 10), (60, 0, 70, 10)]
    pred = [(0, 0, 10, 10), (20, 0, 30, 10), (80, 80, 90, 90)]
    assert grouping_f1(pred, gt) == pytest.approx(4 / 7)


def test_match_boxes_one_to_one():
    gt = [(0, 0, 10, 10)]
    pred = [(0, 0, 10, 10), (0, 0, 10, 11)]
    assert match_boxes(pred, gt) == [(0, 0)]
    assert match_boxes([], gt) == []


def test_greedy_vs_hungarian():
    gt = [(0, 0, 10, 10), (4, 0, 14, 10)]
    pred = [(2, 0, 12, 10), (6, 0, 16, 10)]
    assert match_boxes(pred, gt, 0.5, "hungarian") == match_boxes(pred, gt, 0.5, "greedy") == [(0, 0), (1, 1)]
    with pytest.raises(ValueError):
        match_boxes(pred, gt, method="random")


def test_labeling_and_entity_f1():
    assert labeling_accuracy(["key", "value"], ["key", "key"]) == (0.5, True)
    assert labeling_accuracy([], []) == (0.0, False)
    with pytest.raises(ValueError):
        labeling_accuracy(["key"], [])
    pred = [("key", "name:"), ("value", "jon")]
    gt = [("key", "name:"), ("value", "john")]
    assert entity_f1(pred, gt) == pytest.approx(0.5)
    assert entity_f1([("key", "a"), ("key", "a")], [("key", "a")]) == pytest.approx(2 / 3)


def test_ted_small_examples():
    a = Tree("r", [Tree("x"), Tree("y")])
    assert tree_edit_distance(a, a) == 0
    assert tree_edit_distance(Tree("r"), a) == 2
    assert tree_edit_distance(a, Tree("r", [Tree("x"), Tree("z")])) == 1
    assert tree_edit_distance(None, a) == 3 and tree_edit_distance(None, None) == 0


def test_ted_matches_exhaustive_oracle():
    trees = all_trees(4)
    for t1, t2 in itertools.product(trees, repeat=2):
        assert tree_edit_distance(t1, t2) == ted_oracle(t1, t2)


def test_ted_accuracy():
    gt = entity_tree([("key", "name:"), ("value", "john smith")])
    assert ted_accuracy(gt, gt) == 1.0
    assert ted_accuracy(entity_tree([]), gt) == 0.0
    # dropping one word leaf: 1 - 1/5
    assert ted_accuracy(entity_tree([("key", "name:"), ("value", "john")]), gt) == pytest.approx(0.8)
    assert ted_accuracy(entity_tree([]), entity_tree([])) == 1.0


def _doc(words, entities):
    return {"words": [{"text": t, "box": list(b)} for t, b in words],
            "entities": [{"word_ids": ids, "category": c, "box": list(b)} for ids, c, b in entities]}


def _gt():
    words = [("name:", (0, 0, 30, 9)), ("john", (36, 0, 60, 9)), ("total", (0, 12, 30, 21))]
    ents = [([0], "key", (0, 0, 30, 9)), ([1], "value", (36, 0, 60, 9)), ([2], "key", (0, 12, 30, 21))]
    return _doc(words, ents)


def test_evaluate_perfect_and_empty():
    r = evaluate([_gt()], [_gt()])
    assert (r.spotting_1ned, r.grouping_f1, r.labeling_acc, r.ee_1ned, r.entity_f1, r.ted_acc) == (1, 1, 1, 1, 1, 1)
    assert r.counts["matched"] == 3 and r.documents == 1
    e = evaluate([{"words": [], "entities": []}], [_gt()])
    assert (e.spotting_1ned, e.grouping_f1, e.ee_1ned, e.entity_f1, e.ted_acc) == (0, 0, 0, 0, 0)
    assert not e.labeling_defined and "no matched entities" in format_report(e)
    with pytest.raises(ValueError):
        evaluate([], [_gt()])


def test_evaluate_wrong_category_counts_fully():
    pred = _gt()
    pred["entities"][1]["category"] = "key"
    r = evaluate([pred], [_gt()])
    assert r.grouping_f1 == 1.0
    assert r.labeling_acc == pytest.approx(2 / 3)
    assert r.ee_1ned == pytest.approx(2 / 3)


def test_format_report_protocols():
    r = evaluate([_gt()], [_gt()])
    based, free = format_report(r, "ocr-based"), format_report(r, "ocr-free")
    assert "EE 1-NED" in based and "TED" not in based
    assert "TED acc" in free and "spotting" not in free


@settings(max_examples=30)
@given(st.integers(0, 10_000))
def test_evaluate_invariant_to_list_order(seed):
    rnd = random.Random(seed)
    gt = _gt()
    perm = list(range(3))
    rnd.shuffle(perm)
    inv = {old: new for new, old in enumerate(perm)}
    shuffled = {"words": [gt["words"][i] for i in perm],
                "entities": [dict(e, word_ids=[inv[i] for i in e["word_ids"]]) for e in gt["entities"]]}
    rnd.shuffle(shuffled["entities"])
    a, b = evaluate([gt], [gt]), evaluate([shuffled], [gt])
    assert a.to_dict() == b.to_dict()
