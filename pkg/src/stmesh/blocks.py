"""Attention and feed-forward building blocks shared by encoder and decoders.

All functions are pure over their weight structs and accept stacked leading
batch dims.  Score-matrix shapes can be recorded via
``record_attention_shapes`` to assert the divided-attention cost structure.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, TensorError

log = logging.getLogger(__name__)

MASK_FILL = -1e30

# active sinks for (count, L_q, L_k) records of formed score matrices
_SHAPE_SINKS: list[list] = []


@contextlib.contextmanager
def record_attention_shapes(sink):
    """Append (count, L_q, L_k) to ``sink`` for every score matrix formed."""
    _SHAPE_SINKS.append(sink)
    try:
        yield sink
    finally:
        _SHAPE_SINKS.remove(sink)


def _log_scores(batch_count, l_q, l_k):
    for sink in _SHAPE_SINKS:
        sink.append((batch_count, l_q, l_k))


@dataclass
class LayerNormWeights:
    gain: Tensor
    bias: Tensor
    eps: float = 1e-5

    @staticmethod
    def create(dim):
        return LayerNormWeights(ad.parameter(np.ones(dim)), ad.parameter(np.zeros(dim)))

    def __call__(self, x):
        return ad.layer_norm(x, self.gain, self.bias, self.eps)


@dataclass
class LinearWeights:
    w: Tensor  # D_in x D_out
    b: Tensor  # D_out

    @staticmethod
    def create(d_in, d_out, rng, scale=None):
        if scale is None:
            scale = 1.0 / math.sqrt(d_in)
        return LinearWeights(
            ad.parameter(rng.normal(0.0, scale, size=(d_in, d_out))),
            ad.parameter(np.zeros(d_out)),
        )

    def __call__(self, x):
        return ad.matmul(x, self.w) + self.b


@dataclass
class MhaWeights:
    """Q/K/V projections (stored full-width; columns [i*dh:(i+1)*dh] belong to
    head i) plus the output projection."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    heads: int

    @staticmethod
    def create(dim, heads, rng):
        if dim % heads != 0:
            raise TensorError(f"embed dim {dim} not divisible by {heads} heads")
        s = 1.0 / math.sqrt(dim)

        def mat():
            return ad.parameter(rng.normal(0.0, s, size=(dim, dim)))

        return MhaWeights(mat(), mat(), mat(), mat(), heads)

    @property
    def dim(self):
        return self.wq.shape[0]


@dataclass
class FfnWeights:
    lin1: LinearWeights
    lin2: LinearWeights

    @staticmethod
    def create(dim, hidden, rng):
        if hidden < dim:
            raise TensorError(f"FFN hidden dim {hidden} < embed dim {dim}")
        return FfnWeights(LinearWeights.create(dim, hidden, rng), LinearWeights.create(hidden, dim, rng))


def attention(q, k, v, mask=None):
    """softmax(q k^T / sqrt(d)) v.  ``mask`` is a boolean array, True at
    key positions to exclude; broadcastable to the score shape."""
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape[-2] != k.shape[-2]:
        raise TensorError(f"attention dim mismatch: q{q.shape} k{k.shape} v{v.shape}")
    scores = ad.matmul(q, k.transpose(*range(k.data.ndim - 2), k.data.ndim - 1, k.data.ndim - 2))
    scores = scores * (1.0 / math.sqrt(d))
    if mask is not None:
        scores = scores + np.where(mask, MASK_FILL, 0.0)
    weights = ad.softmax(scores, axis=-1)
    batch = int(np.prod(scores.shape[:-2])) if len(scores.shape) > 2 else 1
    _log_scores(batch, scores.shape[-2], scores.shape[-1])
    return ad.matmul(weights, v)


def _split_heads(x, h):
    *lead, n, d = x.shape
    dh = d // h
    x = x.reshape(*lead, n, h, dh)
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(*order)  # (..., h, n, dh)


def _merge_heads(x):
    *lead, h, n, dh = x.shape
    order = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return x.transpose(*order).reshape(*lead, n, h * dh)


def multi_head_attention(w: MhaWeights, q, k, v, mask=None):
    """Heads computed independently on projected slices, concatenated along
    the feature axis, then output-projected."""
    if q.shape[-1] != w.dim:
        raise TensorError(f"token dim {q.shape[-1]} != weight dim {w.dim}")
    qh = _split_heads(ad.matmul(q, w.wq), w.heads)
    kh = _split_heads(ad.matmul(k, w.wk), w.heads)
    vh = _split_heads(ad.matmul(v, w.wv), w.heads)
    if mask is not None:
        mask = np.asarray(mask)[..., None, :, :] if mask.ndim > 2 else mask
    out = attention(qh, kh, vh, mask=mask)
    return ad.matmul(_merge_heads(out), w.wo)


def _window_partition(tokens, grid, window):
    """L x D tokens on an (rows, cols) grid -> (n_windows, wh*ww, D) plus a
    key mask for zero-padded cells, or None when no padding was needed."""
    rows, cols = grid
    wh, ww = window
    d = tokens.shape[-1]
    pad_r = (-rows) % wh
    pad_c = (-cols) % ww
    x = tokens.reshape(rows, cols, d)
    mask_img = np.zeros((rows + pad_r, cols + pad_c), dtype=bool)
    if pad_r or pad_c:
        zero_rows = ad.tensor(np.zeros((pad_r, cols, d)))
        x = ad.concat([x, zero_rows], axis=0) if pad_r else x
        zero_cols = ad.tensor(np.zeros((rows + pad_r, pad_c, d)))
        x = ad.concat([x, zero_cols], axis=1) if pad_c else x
        mask_img[rows:, :] = True
        mask_img[:, cols:] = True
    nr, nc = (rows + pad_r) // wh, (cols + pad_c) // ww
    x = x.reshape(nr, wh, nc, ww, d).transpose(0, 2, 1, 3, 4).reshape(nr * nc, wh * ww, d)
    if pad_r or pad_c:
        m = mask_img.reshape(nr, wh, nc, ww).transpose(0, 2, 1, 3).reshape(nr * nc, wh * ww)
        key_mask = m[:, None, :]  # masked keys, broadcast over queries
    else:
        key_mask = None
    return x, key_mask, (nr, nc, pad_r, pad_c)


def _window_merge(x, grid, window, part_info):
    rows, cols = grid
    wh, ww = window
    nr, nc, pad_r, pad_c = part_info
    d = x.shape[-1]
    x = x.reshape(nr, nc, wh, ww, d).transpose(0, 2, 1, 3, 4).reshape(nr * wh, nc * ww, d)
    if pad_r or pad_c:
        x = x[:rows, :cols]
    return x.reshape(rows * cols, d)


def window_self_attention(w: MhaWeights, tokens, grid, window, ln: LayerNormWeights | None = None):
    """Self-attention within non-overlapping windows of the token grid, with
    the residual added.  Indivisible grids are padded with zero tokens that
    are masked out of the softmax.  A window covering the whole grid (or
    larger) degenerates to global self-attention."""
    rows, cols = grid
    wh, ww = window
    x = ln(tokens) if ln is not None else tokens
    if wh >= rows and ww >= cols:
        if wh > rows or ww > cols:
            log.info("window %s exceeds grid %s; using full self-attention", window, grid)
        return tokens + multi_head_attention(w, x, x, x)
    parts, key_mask, info = _window_partition(x, grid, window)
    out = multi_head_attention(w, parts, parts, parts, mask=key_mask)
    return tokens + _window_merge(out, grid, window, info)


def ffn(w: FfnWeights, tokens):
    """Two-layer feed-forward map with a smooth (GELU) nonlinearity.  The
    residual is the caller's responsibility."""
    return w.lin2(ad.gelu(w.lin1(tokens)))
