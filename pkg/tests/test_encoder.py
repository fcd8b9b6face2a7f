"""Backbone, patch embedding, and the divided spatio-temporal encoder."""

import numpy as np
import pytest

import stmesh.autodiff as ad
from stmesh import blocks
from stmesh.encoder import (
    BackboneWeights,
    FrameBatch,
    PatchEmbedWeights,
    SteWeights,
    TokenGrid,
    backbone,
    patch_embed,
    ste_forward,
)


def make_stream(rng, t=3, h=16, w=16, ch=8, dim=8, heads=2, layers=1):
    bw = BackboneWeights.create(3, ch, rng)
    gh, gw = h // 4, w // 4
    pe = PatchEmbedWeights.create(ch, 1, gh, gw, dim, rng)
    ste = SteWeights.create(dim, heads, layers, t_max=8, rng=rng)
    frames = rng.normal(size=(t, 3, h, w))
    return bw, pe, ste, frames, (gh, gw)


class TestBackbone:
    def test_total_stride_is_four(self, rng):
        bw = BackboneWeights.create(3, 8, rng)
        assert bw.stride == 4
        feats = backbone(bw, FrameBatch(rng.normal(size=(2, 3, 16, 16))))
        ad.reset_tape()
        assert len(feats) == 2
        assert feats[0].shape == (8, 4, 4)

    def test_deterministic_given_weights(self, rng):
        bw = BackboneWeights.create(3, 8, rng)
        frames = rng.normal(size=(1, 3, 16, 16))
        a = backbone(bw, FrameBatch(frames))[0].data.copy()
        ad.reset_tape()
        b = backbone(bw, FrameBatch(frames))[0].data
        ad.reset_tape()
        np.testing.assert_array_equal(a, b)


class TestPatchEmbed:
    def test_token_count_and_cell_mapping(self, rng):
        pe = PatchEmbedWeights.create(8, 1, 4, 4, 8, rng)
        grid = patch_embed(pe, ad.tensor(rng.normal(size=(8, 4, 4))))
        ad.reset_tape()
        assert grid.tokens.shape == (16, 8)
        assert grid.token_to_cell(7) == (1, 3)
        assert grid.cell_to_token(1, 3) == 7

    def test_position_embedding_distinguishes_cells(self, rng):
        # identical feature content at every cell still yields distinct tokens
        pe = PatchEmbedWeights.create(8, 1, 4, 4, 8, rng)
        feat = np.tile(rng.normal(size=(8, 1, 1)), (1, 4, 4))
        grid = patch_embed(pe, ad.tensor(feat))
        ad.reset_tape()
        assert np.abs(grid.tokens.data[0] - grid.tokens.data[5]).max() > 1e-6


class TestDividedEncoder:
    def test_output_geometry(self, rng):
        bw, pe, ste, frames, grid = make_stream(rng)
        feats = backbone(bw, FrameBatch(frames))
        grids = [patch_embed(pe, f, i) for i, f in enumerate(feats)]
        out = ste_forward(ste, grids)
        ad.reset_tape()
        assert len(out) == 3
        assert all(g.tokens.shape == (16, 8) and g.grid == grid for g in out)

    def test_divided_attention_cost_structure(self, rng):
        # spatial pass forms T score matrices of L x L (times heads),
        # temporal pass forms L of T x T; never one (T L) x (T L) matrix
        bw, pe, ste, frames, _ = make_stream(rng, t=3, layers=2)
        t, l, h = 3, 16, 2
        feats = backbone(bw, FrameBatch(frames))
        grids = [patch_embed(pe, f, i) for i, f in enumerate(feats)]
        sink = []
        with blocks.record_attention_shapes(sink):
            ste_forward(ste, grids)
        ad.reset_tape()
        per_head = [(cnt // h, lq, lk) for cnt, lq, lk in sink]
        assert per_head == [(t, l, l), (l, t, t)] * 2
        assert (t * l, t * l) not in [(lq, lk) for _, lq, lk in sink]

    def test_temporal_mixing_occurs(self, rng):
        bw, pe, ste, frames, _ = make_stream(rng)
        feats = backbone(bw, FrameBatch(frames))
        grids = [patch_embed(pe, f, i) for i, f in enumerate(feats)]
        base = [g.tokens.data.copy() for g in ste_forward(ste, grids)]
        ad.reset_tape()
        frames2 = frames.copy()
        frames2[2] += 0.5  # only the last frame changes
        feats2 = backbone(bw, FrameBatch(frames2))
        grids2 = [patch_embed(pe, f, i) for i, f in enumerate(feats2)]
        out2 = [g.tokens.data for g in ste_forward(ste, grids2)]
        ad.reset_tape()
        # the encoder is bidirectional in time: frame 0 tokens must change
        assert np.abs(out2[0] - base[0]).max() > 1e-9

    def test_clip_longer_than_time_table_raises(self, rng):
        dim = 8
        ste = SteWeights.create(dim, 2, 1, t_max=2, rng=rng)
        grids = [
            TokenGrid(tokens=ad.tensor(rng.normal(size=(4, dim))), grid=(2, 2), frame_index=i)
            for i in range(3)
        ]
        with pytest.raises(ad.TensorError):
            ste_forward(ste, grids)
        ad.reset_tape()

    def test_inconsistent_grids_raise(self, rng):
        dim = 8
        ste = SteWeights.create(dim, 2, 1, t_max=4, rng=rng)
        grids = [
            TokenGrid(tokens=ad.tensor(rng.normal(size=(4, dim))), grid=(2, 2)),
            TokenGrid(tokens=ad.tensor(rng.normal(size=(6, dim))), grid=(2, 3)),
        ]
        with pytest.raises(ad.TensorError):
            ste_forward(ste, grids)
        ad.reset_tape()
