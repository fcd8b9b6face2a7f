"""Backbone substitute, patch embedding, and the divided spatio-temporal
encoder.

The backbone is a small trainable conv stack with total stride 4.  The
encoder alternates spatial self-attention (within each frame, batched over
frames) and temporal self-attention (across frames, batched over spatial
positions), so the score matrices formed are T of LxL plus L of TxT rather
than one (TL)x(TL).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TensorError
from .blocks import LayerNormWeights, LinearWeights, MhaWeights, multi_head_attention


@dataclass
class FrameBatch:
    frames: np.ndarray  # T x C_in x H x W
    meta: list = field(default_factory=list)

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[0] < 1:
            raise TensorError(f"FrameBatch needs T x C x H x W frames, got {self.frames.shape}")
        if not self.meta:
            self.meta = list(range(self.frames.shape[0]))


@dataclass
class TokenGrid:
    tokens: Tensor          # L x D
    grid: tuple[int, int]   # (rows, cols), rows * cols == L
    frame_index: int = 0

    def __post_init__(self):
        rows, cols = self.grid
        if rows * cols != self.tokens.shape[0]:
            raise TensorError(f"grid {self.grid} inconsistent with L={self.tokens.shape[0]}")

    @property
    def num_tokens(self):
        return self.tokens.shape[0]

    @property
    def dim(self):
        return self.tokens.shape[1]

    def token_to_cell(self, idx):
        return divmod(idx, self.grid[1])

    def cell_to_token(self, row, col):
        return row * self.grid[1] + col


@dataclass
class BackboneWeights:
    convs: list  # list of (weight Tensor, stride, pad)

    @staticmethod
    def create(c_in, channels, rng):
        # strides 2, 2, 1 -> total stride 4
        specs = [(c_in, channels // 2, 2), (channels // 2, channels, 2), (channels, channels, 1)]
        convs = []
        for ci, co, stride in specs:
            scale = 1.0 / np.sqrt(ci * 9)
            w = ad.parameter(rng.normal(0.0, scale, size=(co, ci, 3, 3)))
            convs.append((w, stride, 1))
        return BackboneWeights(convs)

    @property
    def stride(self):
        s = 1
        for _, stride, _ in self.convs:
            s *= stride
        return s


def backbone(weights: BackboneWeights, batch: FrameBatch):
    """Per-frame feature maps C x (H/s) x (W/s)."""
    t, _, h, w = batch.frames.shape
    s = weights.stride
    if h % s or w % s:
        raise TensorError(f"input extents {h}x{w} not divisible by stride {s}")
    feats = []
    for i in range(t):
        x = ad.tensor(batch.frames[i])
        for j, (cw, stride, pad) in enumerate(weights.convs):
            x = ad.conv2d(x, cw, stride=stride, pad=pad)
            if j < len(weights.convs) - 1:
                x = ad.relu(x)
        feats.append(x)
    return feats


@dataclass
class PatchEmbedWeights:
    proj: LinearWeights
    pos: Tensor  # L x D learned positional embedding
    patch: int

    @staticmethod
    def create(c, patch, rows, cols, dim, rng):
        return PatchEmbedWeights(
            proj=LinearWeights.create(patch * patch * c, dim, rng),
            pos=ad.parameter(rng.normal(0.0, 0.02, size=(rows * cols, dim))),
            patch=patch,
        )


def patch_embed(weights: PatchEmbedWeights, feat, frame_index=0):
    """Flatten B x B patches of a C x h x w feature map, project to D, add
    the positional embedding."""
    c, h, w = feat.shape
    b = weights.patch
    if h % b or w % b:
        raise TensorError(f"feature extents {h}x{w} not divisible by patch {b}")
    rows, cols = h // b, w // b
    x = feat.transpose(1, 2, 0)                     # h x w x C
    x = x.reshape(rows, b, cols, b, c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(rows * cols, b * b * c)
    tokens = weights.proj(x) + weights.pos
    return TokenGrid(tokens=tokens, grid=(rows, cols), frame_index=frame_index)


@dataclass
class SteLayerWeights:
    spatial_ln: LayerNormWeights
    spatial_mha: MhaWeights
    temporal_ln: LayerNormWeights
    temporal_mha: MhaWeights


@dataclass
class SteWeights:
    layers: list[SteLayerWeights]
    time_pos: Tensor  # T_max x D learned temporal position embedding
    use_time_pos: bool = True

    @staticmethod
    def create(dim, heads, num_layers, t_max, rng):
        layers = [
            SteLayerWeights(
                spatial_ln=LayerNormWeights.create(dim),
                spatial_mha=MhaWeights.create(dim, heads, rng),
                temporal_ln=LayerNormWeights.create(dim),
                temporal_mha=MhaWeights.create(dim, heads, rng),
            )
            for _ in range(num_layers)
        ]
        return SteWeights(layers, ad.parameter(rng.normal(0.0, 0.02, size=(t_max, dim))))


def ste_forward(weights: SteWeights, token_grids: list[TokenGrid]):
    """Divided spatio-temporal encoding over T frames of L x D tokens."""
    t = len(token_grids)
    if t < 1:
        raise TensorError("need at least one frame")
    grid = token_grids[0].grid
    dims = {(g.grid, g.dim) for g in token_grids}
    if len(dims) != 1:
        raise TensorError(f"inconsistent token grids: {dims}")

    x = ad.stack([g.tokens for g in token_grids], axis=0)  # T x L x D
    if weights.use_time_pos:
        if t > weights.time_pos.shape[0]:
            raise TensorError(f"clip length {t} exceeds temporal embedding table")
        x = x + weights.time_pos[:t].reshape(t, 1, weights.time_pos.shape[1])
    for layer in weights.layers:
        xs = layer.spatial_ln(x)
        x = x + multi_head_attention(layer.spatial_mha, xs, xs, xs)
        xt = x.transpose(1, 0, 2)  # L x T x D
        xn = layer.temporal_ln(xt)
        xt = xt + multi_head_attention(layer.temporal_mha, xn, xn, xn)
        x = xt.transpose(1, 0, 2)
    return [
        TokenGrid(tokens=x[i], grid=grid, frame_index=token_grids[i].frame_index)
        for i in range(t)
    ]
