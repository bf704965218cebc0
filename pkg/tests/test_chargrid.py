import numpy as np
import pytest
import torch

from hipvie.chargrid import GridConfig, GridEncoder, encode_grid, rasterize_chargrid, rasterize_ids, sample_center_features
from hipvie.core import CharBox, Vocab
from oracles import chargrid_scan

V = Vocab()


def random_chars(rng, H, W, n):
    out = []
    for _ in range(n):
        x0, y0 = rng.uniform(0, W - 1), rng.uniform(0, H - 1)
        x1, y1 = min(W, x0 + rng.uniform(0.5, 10)), min(H, y0 + rng.uniform(0.5, 10))
        out.append(CharBox(str(rng.choice(list(V.alphabet))), (x0, y0, x1, y1)))
    return out


def test_empty_document_is_pad():
    embed = torch.randn(len(V), 3)
    g = rasterize_chargrid([], embed, 4, 4, V)
    assert torch.equal(g.grid, embed[V.pad_id].expand(4, 4, 3))


def test_single_char_covers_four_pixels():
    embed = torch.randn(len(V), 3)
    g = rasterize_chargrid([CharBox("a", (0, 0, 2, 2))], embed, 4, 4, V)
    hit = (g.ids == V.encode_char("a"))
    assert hit.sum() == 4 and hit[:2, :2].all()
    assert (g.ids == V.pad_id).sum() == 12
    assert torch.equal(g.grid[0, 0], embed[V.encode_char("a")])


def test_overlap_last_writer_wins():
    chars = [CharBox("a", (0, 0, 4, 4)), CharBox("b", (2, 2, 6, 6)), CharBox("c", (5, 0, 8, 3))]
    ids = rasterize_ids(chars, 8, 8, V)
    oracle = chargrid_scan([(c.char, c.box) for c in chars], 8, 8, V.encode_char, V.pad_id)
    assert np.array_equal(ids, oracle)
    assert ids[3, 3] == V.encode_char("b")


def test_random_docs_match_pixel_scan():
    rng = np.random.default_rng(0)
    for _ in range(25):
        H, W = int(rng.integers(4, 33)), int(rng.integers(4, 33))
        chars = random_chars(rng, H, W, int(rng.integers(0, 8)))
        assert np.array_equal(rasterize_ids(chars, H, W, V),
                              chargrid_scan([(c.char, c.box) for c in chars], H, W, V.encode_char, V.pad_id))


def test_grid_vectors_come_from_table_and_idempotent():
    rng = np.random.default_rng(1)
    chars = random_chars(rng, 16, 16, 6)
    embed = torch.randn(len(V), 3)
    a = rasterize_chargrid(chars, embed, 16, 16, V)
    b = rasterize_chargrid(chars, embed, 16, 16, V)
    assert torch.equal(a.grid, b.grid)
    rows = {tuple(r.tolist()) for r in embed}
    assert all(tuple(v.tolist()) in rows for v in a.grid.reshape(-1, 3))


def test_unknown_char_names_codepoint():
    with pytest.raises(KeyError, match="U\\+0021"):
        rasterize_ids([CharBox("!", (0, 0, 1, 1))], 2, 2, V)


def small_encoder(**kw):
    cfg = GridConfig(layers=1, heads=2, hidden=16, mlp=32, feature_channels=8, out_channels=8, **kw)
    return GridEncoder(cfg, len(V))


def test_encode_grid_shape_256():
    torch.manual_seed(0)
    enc = GridEncoder(GridConfig(), len(V))
    ids = torch.zeros((1, 256, 256), dtype=torch.long)
    G = encode_grid(enc, ids, torch.zeros(1, 256, 32, 32))
    assert G.shape == (1, 256, 32, 32)


def test_encode_grid_errors():
    enc = small_encoder()
    with pytest.raises(ValueError, match="multiple of the patch size"):
        enc(enc.grid(torch.zeros((1, 40, 64), dtype=torch.long)), torch.zeros(1, 8, 5, 8))
    with pytest.raises(ValueError, match=r"\(1, 8, 8, 8\).*\(1, 8, 4, 8\)"):
        enc(enc.grid(torch.zeros((1, 64, 64), dtype=torch.long)), torch.zeros(1, 8, 4, 8))


def test_zero_inputs_zero_projection_deterministic():
    torch.manual_seed(0)
    enc = small_encoder()
    torch.nn.init.zeros_(enc.to_feature.weight)
    torch.nn.init.zeros_(enc.to_feature.bias)
    grid = torch.zeros(1, 3, 64, 64)
    feat = torch.zeros(1, 8, 8, 8)
    a, b = enc(grid, feat), enc(grid, feat)
    assert a.shape == (1, 8, 8, 8) and torch.isfinite(a).all()
    assert torch.equal(a, b)


@pytest.mark.parametrize("mode", ["bilinear", "nearest"])
def test_patch_perturbation_reaches_every_cell(mode):
    # attention is global, so one patch influences all output positions
    torch.manual_seed(0)
    enc = small_encoder(upsample=mode).double()
    grid = torch.randn(1, 3, 64, 64, dtype=torch.float64)
    feat = torch.randn(1, 8, 8, 8, dtype=torch.float64)
    base = enc(grid, feat)
    bumped = grid.clone()
    bumped[:, :, :32, :32] += 1e-3
    diff = (enc(bumped, feat) - base).abs().sum(1)[0]
    assert (diff > 0).all()


def test_sample_center_features():
    G = torch.arange(2 * 4 * 5, dtype=torch.float64).reshape(2, 4, 5)
    out = sample_center_features(G, [(8.0, 16.0)])
    assert torch.equal(out[0], G[:, 2, 1])
    assert sample_center_features(G, []).shape == (0, 2)
    rng = np.random.default_rng(0)
    pts = rng.uniform(0, 40, size=(5, 2))
    got = sample_center_features(G, pts)
    for k, (x, y) in enumerate(pts):
        cx = min(int(np.floor(x / 8 + 0.5)), 4)
        cy = min(int(np.floor(y / 8 + 0.5)), 3)
        assert torch.equal(got[k], G[:, cy, cx])
