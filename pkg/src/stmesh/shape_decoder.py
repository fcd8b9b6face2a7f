"""Spatio-temporal shape decoder: token aligning, window self-attention on
both query streams, and pose-guided attention over encoder tokens.

Pose-guided attention forms two row-stochastic L x L_e attention matrices
(one driven by pose tokens, one by shape queries), concatenates them along
the column axis, and fuses with a learned 2L_e -> L_e linear map before the
value aggregation against the encoder tokens.  With the fuse map fixed to
select the shape matrix only, the step reduces exactly to the split
pose/shape baseline decoder.

Both attention matrices use the 1/sqrt(d) score scale for numerical
consistency with the rest of the attention stack.
"""

from __future__ import annotations

import math
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
from .pose_decoder import FuseWeights, PoseTokenStream, QuerySet, fuse_queries


@dataclass
class ShapeTokenStream:
    frames: list[Tensor]  # T entries of L x D

    def __len__(self):
        return len(self.frames)


@dataclass
class TokenAlignWeights:
    ln: LayerNormWeights
    mha: MhaWeights

    @staticmethod
    def create(dim, heads, rng):
        return TokenAlignWeights(LayerNormWeights.create(dim), MhaWeights.create(dim, heads, rng))


def token_align(w: TokenAlignWeights, shape_q, pose_tokens):
    """Cross-attention with shape queries attending to pose tokens, residual
    on the shape side."""
    if shape_q.shape != pose_tokens.shape:
        raise TensorError(f"token_align shape mismatch: {shape_q.shape} vs {pose_tokens.shape}")
    return shape_q + multi_head_attention(w.mha, w.ln(shape_q), pose_tokens, pose_tokens)


@dataclass
class PgaWeights:
    fc: LinearWeights          # 2*L_e -> L_e row-wise fusion of attention maps
    ffn_ln: LayerNormWeights
    ffn: FfnWeights

    @staticmethod
    def create(dim, num_enc_tokens, ffn_dim, rng):
        return PgaWeights(
            fc=LinearWeights.create(2 * num_enc_tokens, num_enc_tokens, rng),
            ffn_ln=LayerNormWeights.create(dim),
            ffn=FfnWeights.create(dim, ffn_dim, rng),
        )

    def select_shape_only(self):
        """Freeze fc to pick the shape attention matrix unchanged."""
        l_e = self.fc.w.shape[1]
        w = np.zeros((2 * l_e, l_e))
        w[l_e:] = np.eye(l_e)
        self.fc.w.data[...] = w
        self.fc.b.data[...] = 0.0


def _attention_matrix(q, enc_tokens):
    d = q.shape[-1]
    scores = ad.matmul(q, enc_tokens.transpose(1, 0)) * (1.0 / math.sqrt(d))
    return ad.softmax(scores, axis=-1)


def pga(w: PgaWeights, shape_tilde, pose_tilde, tau_e: TokenGrid, pose_guided=True):
    """Fuse pose- and shape-driven attention over the encoder tokens, then
    aggregate values and apply the FFN with residual.

    ``pose_guided=False`` bypasses the fusion and uses the shape attention
    matrix alone (the split-baseline path).
    """
    if shape_tilde.shape[-1] != tau_e.dim:
        raise TensorError(f"token dim mismatch: {shape_tilde.shape} vs encoder D={tau_e.dim}")
    chi_shape = _attention_matrix(shape_tilde, tau_e.tokens)
    if pose_guided:
        chi_pose = _attention_matrix(pose_tilde, tau_e.tokens)
        fused = w.fc(ad.concat([chi_pose, chi_shape], axis=1))
    else:
        fused = chi_shape
    upsilon = ad.matmul(fused, tau_e.tokens)
    return upsilon + ffn(w.ffn, w.ffn_ln(upsilon))


@dataclass
class StsdWeights:
    fuse: FuseWeights
    align: TokenAlignWeights
    # one self-attention applied to both streams (the shape-query W-SSA pass
    # and the pose-token W-PSA pass share weights)
    self_ln: LayerNormWeights
    self_mha: MhaWeights
    pga: PgaWeights
    window: tuple[int, int]
    use_ta: bool = True
    use_wpsa: bool = True
    use_wssa: bool = True
    pose_guided: bool = True
    detach_pose: bool = False

    @staticmethod
    def create(dim, heads, ffn_dim, window, num_enc_tokens, rng, **flags):
        return StsdWeights(
            fuse=FuseWeights.create(dim, rng),
            align=TokenAlignWeights.create(dim, heads, rng),
            self_ln=LayerNormWeights.create(dim),
            self_mha=MhaWeights.create(dim, heads, rng),
            pga=PgaWeights.create(dim, num_enc_tokens, ffn_dim, rng),
            window=tuple(window),
            **flags,
        )


def stsd_step(w: StsdWeights, shape_q_hat, pose_tokens, tau_e: TokenGrid):
    """Window self-attention on both streams, then pose-guided attention."""
    if w.use_wssa:
        shape_tilde = window_self_attention(
            w.self_mha, shape_q_hat, tau_e.grid, w.window, ln=w.self_ln
        )
    else:
        shape_tilde = shape_q_hat
    if w.pose_guided:
        if w.use_wpsa:
            pose_tilde = window_self_attention(
                w.self_mha, pose_tokens, tau_e.grid, w.window, ln=w.self_ln
            )
        else:
            pose_tilde = pose_tokens
    else:
        pose_tilde = None
    return pga(w.pga, shape_tilde, pose_tilde, tau_e, pose_guided=w.pose_guided)


def stsd_decode(
    w: StsdWeights,
    shape_queries: QuerySet,
    pose_stream: PoseTokenStream,
    tau_e_stream: list[TokenGrid],
    direction="forward",
    progressive=True,
):
    """Decode shape tokens per frame: fuse with the previous frame's shape
    tokens, align to the frame's pose tokens, run the step."""
    t = len(tau_e_stream)
    if len(pose_stream) != t:
        raise TensorError(f"pose stream length {len(pose_stream)} != encoder stream {t}")

    def one_pass(order):
        out, prev = {}, None
        for i in order:
            pose_t = pose_stream.frames[i]
            if w.detach_pose:
                pose_t = ad.tensor(pose_t.data)
            fused = fuse_queries(w.fuse, shape_queries.queries, prev if progressive else None)
            q_hat = token_align(w.align, fused, pose_t) if w.use_ta else fused
            prev = stsd_step(w, q_hat, pose_t, tau_e_stream[i])
            out[i] = prev
        return [out[i] for i in range(t)]

    fwd = one_pass(range(t))
    if direction == "forward" or t == 1 or not progressive:
        return ShapeTokenStream(fwd)
    if direction != "bidirectional":
        raise TensorError(f"unknown direction {direction!r}")
    bwd = one_pass(range(t - 1, -1, -1))
    return ShapeTokenStream([(a + b) * 0.5 for a, b in zip(fwd, bwd)])
