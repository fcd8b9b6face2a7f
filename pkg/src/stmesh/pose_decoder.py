"""Spatio-temporal pose decoder with progressive query updating.

Per frame: the learned query bank is fused with the previous frame's decoded
pose tokens (concat + linear), window self-attention runs over the fused
queries, cross-attention reads the encoder tokens, and an FFN with residual
emits the frame's pose tokens.  Forward mode threads the recurrence t=1..T;
bidirectional mode additionally runs t=T..1 and averages the two streams.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TensorError
from .blocks import (
    FfnWeights,
    LayerNormWeights,
    LinearWeights,
    MhaWeights,
    ffn,
    multi_head_attention,
    window_self_attention,
)
from .encoder import TokenGrid


@dataclass
class QuerySet:
    queries: Tensor  # L x D learned embeddings
    role: str        # "pose" | "shape"

    @staticmethod
    def create(num, dim, role, rng):
        return QuerySet(ad.parameter(rng.normal(0.0, 0.02, size=(num, dim))), role)


@dataclass
class PoseTokenStream:
    frames: list[Tensor]  # T entries of L x D

    def __len__(self):
        return len(self.frames)


@dataclass
class FuseWeights:
    """concat([init, prev]) along features, projected 2D -> D."""

    proj: LinearWeights

    @staticmethod
    def create(dim, rng):
        return FuseWeights(LinearWeights.create(2 * dim, dim, rng))


def fuse_queries(w: FuseWeights, init, prev=None):
    if prev is None:
        return init
    if prev.shape != init.shape:
        raise TensorError(f"query/prev shape mismatch: {init.shape} vs {prev.shape}")
    return w.proj(ad.concat([init, prev], axis=1))


@dataclass
class StpdWeights:
    fuse: FuseWeights
    self_ln: LayerNormWeights
    self_mha: MhaWeights
    cross_ln: LayerNormWeights
    cross_mha: MhaWeights
    ffn_ln: LayerNormWeights
    ffn: FfnWeights
    window: tuple[int, int]

    @staticmethod
    def create(dim, heads, ffn_dim, window, rng):
        return StpdWeights(
            fuse=FuseWeights.create(dim, rng),
            self_ln=LayerNormWeights.create(dim),
            self_mha=MhaWeights.create(dim, heads, rng),
            cross_ln=LayerNormWeights.create(dim),
            cross_mha=MhaWeights.create(dim, heads, rng),
            ffn_ln=LayerNormWeights.create(dim),
            ffn=FfnWeights.create(dim, ffn_dim, rng),
            window=tuple(window),
        )


def stpd_step(w: StpdWeights, q_hat, tau_e: TokenGrid):
    """Window self-attention (residual), cross-attention to encoder tokens,
    FFN with residual."""
    q_tilde = window_self_attention(w.self_mha, q_hat, tau_e.grid, w.window, ln=w.self_ln)
    qn = w.cross_ln(q_tilde)
    upsilon = multi_head_attention(w.cross_mha, qn, tau_e.tokens, tau_e.tokens)
    return upsilon + ffn(w.ffn, w.ffn_ln(upsilon))


def _decode_pass(w: StpdWeights, queries: QuerySet, tau_e_stream, order, progressive):
    out = {}
    prev = None
    for t in order:
        q_hat = fuse_queries(w.fuse, queries.queries, prev if progressive else None)
        prev = stpd_step(w, q_hat, tau_e_stream[t])
        out[t] = prev
    return [out[t] for t in range(len(tau_e_stream))]


def stpd_decode(
    w: StpdWeights,
    queries: QuerySet,
    tau_e_stream: list[TokenGrid],
    direction="forward",
    progressive=True,
):
    """Decode the pose token stream frame by frame, threading the previous
    frame's tokens through the query fusion.  ``progressive=False`` decodes
    each frame from the static query bank instead."""
    t = len(tau_e_stream)
    if t < 1:
        raise TensorError("empty encoder stream")
    fwd = _decode_pass(w, queries, tau_e_stream, range(t), progressive)
    if direction == "forward" or t == 1 or not progressive:
        return PoseTokenStream(fwd)
    if direction != "bidirectional":
        raise TensorError(f"unknown direction {direction!r}")
    bwd = _decode_pass(w, queries, tau_e_stream, range(t - 1, -1, -1), progressive)
    return PoseTokenStream([(a + b) * 0.5 for a, b in zip(fwd, bwd)])
