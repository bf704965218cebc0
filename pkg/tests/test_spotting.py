import math

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from hipvie.core import CharBox, Document, Vocab, Word, point_in_box
from hipvie.spotting import (
    Backbone, MaskPlan, MIMConfig, MIMHead, SpotConfig, SpotHead, apply_mask, char_point_slots,
    combine_mim, draw_gaussian, focal_loss, gaussian_radius, intensity_bins, loss_mim, loss_mim_at, masked_count,
    mim_reconstruct, region_mask, select_masks, spot, spot_targets, word_geometry,
)

V = Vocab()


def line_doc(word_lengths, lines=None):
    words, x, y = [], 0, 0
    lines = lines or [0] * len(word_lengths)
    for n, ln in zip(word_lengths, lines):
        chars = [CharBox("a", (x + 6 * k, 12 * ln, x + 6 * k + 6, 12 * ln + 9)) for k in range(n)]
        words.append(Word(chars, ln))
        x += 6 * n + 6
    W = max(64, int(math.ceil(x / 32)) * 32)
    return Document(np.ones((12 * (max(lines) + 1) + 4, W)), words)


def test_masked_count_rule():
    assert masked_count(0.30, 100) == 30
    assert masked_count(0.15, 20) == 3
    assert masked_count(0.15, 7) == 1  # round(1.05)
    assert masked_count(0.15, 10) == 2  # 1.5 rounds half up
    assert masked_count(0.15, 1) == 1
    assert masked_count(0.3, 0) == 0


def test_char_masks_exact_count_and_caps(rng):
    doc = line_doc([10] * 10)
    plan = select_masks(doc, "char", 0.30, rng)
    assert len(plan.regions) == 30
    per_word = np.bincount([wi for wi, _ in plan.indices], minlength=10)
    assert per_word.max() <= 3


def test_word_masks_exact_count_spread_over_lines(rng):
    doc = line_doc([2] * 20, lines=[k // 5 for k in range(20)])
    plan = select_masks(doc, "word", 0.15, rng)
    assert len(plan.regions) == 3
    assert len({doc.words[i].line_id for i in plan.indices}) == 3


def test_masks_empty_doc_and_bad_ratio(rng):
    empty = Document(np.ones((32, 32)), [])
    assert select_masks(empty, "char", 0.3, rng).regions == []
    with pytest.raises(ValueError):
        select_masks(empty, "word", 0.0, rng)
    with pytest.raises(ValueError, match="kind"):
        select_masks(line_doc([3]), "line", 0.3, rng)


def test_masks_deterministic(docs):
    a = select_masks(docs[0], "char", 0.3, np.random.default_rng(5))
    b = select_masks(docs[0], "char", 0.3, np.random.default_rng(5))
    assert a.indices == b.indices


@given(st.integers(0, 2**31 - 1), st.sampled_from(["char", "word"]))
def test_mask_regions_are_annotated_boxes(seed, kind):
    from hipvie.synthdoc import generate_document

    doc = generate_document(seed=seed % 50)
    plan = select_masks(doc, kind, 0.3 if kind == "char" else 0.15, np.random.default_rng(seed))
    allowed = {c.box for c in doc.chars} if kind == "char" else {w.box for w in doc.words}
    assert all(r in allowed for r in plan.regions)
    assert len(set(plan.indices)) == len(plan.indices)


def test_apply_mask_examples():
    img = np.random.default_rng(0).uniform(size=(16, 16))
    assert np.array_equal(apply_mask(img, MaskPlan([], "char", 0.3)), img)
    full = apply_mask(img, MaskPlan([(0, 0, 16, 16)], "word", 0.15))
    assert np.all(full == 0.5)


@given(st.lists(st.tuples(st.floats(0, 15), st.floats(0, 15), st.floats(0.5, 8), st.floats(0.5, 8)), max_size=5))
def test_apply_mask_pixel_oracle(raw):
    regions = [(x, y, min(16, x + w), min(16, y + h)) for x, y, w, h in raw]
    img = np.zeros((16, 16))
    out = apply_mask(img, MaskPlan(regions, "char", 0.3))
    for i in range(16):
        for j in range(16):
            inside = any(point_in_box((j, i), r) for r in regions)
            assert out[i, j] == (0.5 if inside else 0.0)


def test_loss_mim_examples():
    assert combine_mim(2.0, 1.0) == pytest.approx(1.35)
    img = np.random.default_rng(0).uniform(size=(8, 8))
    cm = np.zeros((8, 8), bool)
    cm[:4] = True
    wm = np.zeros((8, 8), bool)
    wm[4:, :2] = True
    uniform = torch.zeros(256, 8, 8, dtype=torch.float64)
    total, lc, lw = loss_mim(uniform, img, cm, wm)
    assert float(total) == pytest.approx(0.85 * math.log(256), rel=1e-12)
    onehot = torch.nn.functional.one_hot(intensity_bins(img), 256).permute(2, 0, 1).double() * 1e6
    assert float(loss_mim(onehot, img, cm, wm)[0]) < 1e-6
    # empty region -> that term is zero
    _, lc0, lw0 = loss_mim(uniform, img, np.zeros((8, 8), bool), wm)
    assert float(lc0) == 0.0 and float(lw0) == pytest.approx(math.log(256))


def test_loss_mim_ignores_outside_and_is_monotone():
    rng = np.random.default_rng(1)
    img = rng.uniform(size=(8, 8))
    cm = np.zeros((8, 8), bool)
    cm[2:5, 2:5] = True
    logits = torch.randn(256, 8, 8, dtype=torch.float64)
    base = float(loss_mim(logits, img, cm, cm)[0])
    noisy = logits.clone()
    noisy[:, ~torch.as_tensor(cm)] += torch.randn(256, int((~cm).sum()), dtype=torch.float64)
    assert float(loss_mim(noisy, img, cm, cm)[0]) == base
    t = intensity_bins(img)
    boosted = logits.clone()
    boosted.scatter_add_(0, t[None], torch.ones(1, 8, 8, dtype=torch.float64))
    assert float(loss_mim(boosted, img, cm, cm)[0]) <= base


def test_intensity_bins():
    b = intensity_bins(np.array([0.0, 1.0, 0.5, 1 / 255]))
    assert b.tolist() == [0, 255, 128, 1]


def test_mim_head_shape_and_zero_init():
    torch.manual_seed(0)
    head = MIMHead(MIMConfig(), 256)
    out = mim_reconstruct(head, torch.randn(256, 16, 16))
    assert out.shape == (128, 128, 256)
    zhead = MIMHead(MIMConfig(layers=1, heads=2, hidden=32, mlp=64), 32, zero_init=True)
    probs = torch.softmax(mim_reconstruct(zhead, torch.zeros(32, 4, 6)), -1)
    assert torch.allclose(probs, torch.full_like(probs, 1 / 256))
    assert probs.shape == (32, 48, 256)


def test_mim_sparse_matches_dense():
    torch.manual_seed(0)
    head = MIMHead(MIMConfig(layers=1, heads=2, hidden=32, mlp=64), 32).double()
    feat = torch.randn(2, 32, 3, 4, dtype=torch.float64)
    dense = head(feat)
    rng = np.random.default_rng(0)
    cm = rng.random((2, 24, 32)) < 0.2
    wm = rng.random((2, 24, 32)) < 0.1
    img = rng.random((2, 24, 32))
    b, y, x = torch.nonzero(torch.as_tensor(cm | wm), as_tuple=True)
    sparse = head.logits_at(feat, b, y, x)
    assert torch.allclose(sparse, dense[b, :, y, x], atol=1e-12)
    got = loss_mim_at(sparse, intensity_bins(img)[b, y, x], torch.as_tensor(cm)[b, y, x], torch.as_tensor(wm)[b, y, x])
    want = loss_mim(dense, img, cm, wm)
    for g, w in zip(got, want):
        assert float(g) == pytest.approx(float(w), abs=1e-12)
    none = torch.zeros(0, dtype=torch.long)
    assert float(loss_mim_at(head.logits_at(feat, none, none, none), none, none.bool(), none.bool())[0]) == 0.0


def test_char_point_slots():
    assert char_point_slots(8, 8) == list(range(8))
    assert char_point_slots(1, 8) == [4]
    assert char_point_slots(4, 8) == [1, 3, 5, 7]
    for n in range(1, 9):
        s = char_point_slots(n, 8)
        assert len(set(s)) == n and s == sorted(s)


def test_word_geometry_and_targets():
    w = Word([CharBox("a", (10, 20, 16, 29)), CharBox("b", (16, 20, 22, 29))], 0)
    center, start, end, hh, angle = word_geometry(w)
    assert center == (16, 24.5) and start == (10, 24.5) and end == (22, 24.5)
    assert hh == 4.5 and angle == 0.0
    t = spot_targets([w], (16, 16), 4, V, 8)
    assert t["cells"].tolist() == [[6, 4]]
    assert t["heat"][6, 4] == 1.0
    assert t["chars"][0].tolist() == [0, 0, V.encode_char("a"), 0, 0, 0, V.encode_char("b"), 0]
    assert t["geom"][0, :2] == pytest.approx([0.0, 0.125])


def test_gaussian_and_focal():
    heat = np.zeros((9, 9))
    draw_gaussian(heat, 4, 4, 2)
    assert heat[4, 4] == 1.0 and heat.max() == 1.0
    assert heat[4, 6] == pytest.approx(math.exp(-4 / (2 * (5 / 6) ** 2)))
    assert gaussian_radius(10, 10) > 0
    target = torch.as_tensor(heat)
    perfect = torch.where(target == 1, torch.tensor(50.0, dtype=torch.float64), torch.tensor(-50.0, dtype=torch.float64))
    assert float(focal_loss(perfect, target)) < 1e-10
    assert float(focal_loss(torch.zeros(9, 9, dtype=torch.float64), target)) > 0


def test_spot_errors_and_blank():
    torch.manual_seed(0)
    cfg = SpotConfig(feature_channels=16, backbone_channels=(8, 8, 16), head_channels=8, rec_hidden=16)
    bb, head = Backbone(cfg), SpotHead(cfg, len(V))
    feat = bb(torch.ones(1, 1, 64, 64))[0]
    with pytest.raises(ValueError, match="K must be positive"):
        spot(head, feat, K=0)
    assert spot(head, feat, K=100, threshold=0.99, image_hw=(64, 64)) == []
    a = spot(head, feat, K=10, threshold=0.0, image_hw=(64, 64))
    b = spot(head, feat, K=10, threshold=0.0, image_hw=(64, 64))
    assert [(s.text, s.box) for s in a] == [(s.text, s.box) for s in b]
    assert all(len(s.text) <= cfg.points for s in a)
    conf = [s.confidence for s in a]
    assert conf == sorted(conf, reverse=True)


def test_spotted_points_collinear():
    torch.manual_seed(1)
    cfg = SpotConfig(feature_channels=16, backbone_channels=(8, 8, 16), head_channels=8, rec_hidden=16)
    bb, head = Backbone(cfg), SpotHead(cfg, len(V))
    for s in spot(head, bb(torch.rand(1, 1, 64, 64))[0], K=20, threshold=0.0, image_hw=(64, 64)):
        p = np.array(s.points)
        d = p[-1] - p[0]
        cross = d[0] * (p[:, 1] - p[0, 1]) - d[1] * (p[:, 0] - p[0, 0])
        assert np.abs(cross).max() < 1e-6 * max(1.0, float(np.hypot(*d))) ** 2
