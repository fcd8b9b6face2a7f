"""Registered finite-difference suites for every differentiable op and the
composite blocks built on them.

Each entry maps a name to a callable returning the max elementwise error
between analytic and central-difference gradients (relative for large
gradients, absolute for small ones; see autodiff.gradcheck).  The CLI
``gradcheck`` subcommand and the test suite both walk this registry.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import body as body_model
from . import heads as heads_mod
from . import losses
from .blocks import (
    FfnWeights,
    LayerNormWeights,
    MhaWeights,
    attention,
    ffn,
    multi_head_attention,
    window_self_attention,
)
from .camera import CameraIntrinsics
from .encoder import TokenGrid

DEFAULT_TOLERANCE = 1e-4

_REGISTRY = []


def register(name):
    def deco(fn):
        _REGISTRY.append((name, fn))
        return fn

    return deco


def registry():
    return list(_REGISTRY)


def run(scope="all", tolerance=DEFAULT_TOLERANCE):
    """Run matching suites; returns (all_ok, [(name, err, ok)])."""
    rows = []
    ok_all = True
    for name, fn in _REGISTRY:
        if scope != "all" and scope not in name:
            continue
        err = fn()
        ok = err <= tolerance
        ok_all = ok_all and ok
        rows.append((name, err, ok))
    return ok_all, rows


def _rng(seed=0):
    return np.random.default_rng(np.random.PCG64(seed))


def _t(rng, *shape):
    return ad.parameter(rng.normal(size=shape))


def _scalarize(x, m):
    # frozen random projection to a scalar so every output element matters
    return (x * ad.tensor(m)).sum()


# -- elementwise and reduction ops -----------------------------------------


@register("op.arithmetic")
def _check_arithmetic():
    rng = _rng(1)
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    m = rng.normal(size=(3, 4))
    fn = lambda a, b: _scalarize(a * b + a / (b * b + 3.0) - b + 2.0 * a, m)
    return ad.gradcheck(fn, [a, b])


@register("op.exp_log_sqrt")
def _check_exp_log_sqrt():
    rng = _rng(2)
    a = ad.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    m = rng.normal(size=(3, 4))
    fn = lambda a: _scalarize(ad.exp(a) + ad.log(a) + ad.sqrt(a), m)
    return ad.gradcheck(fn, [a])


@register("op.relu_gelu_sigmoid")
def _check_activations():
    rng = _rng(3)
    a = ad.parameter(rng.normal(size=(4, 5)) + 0.3)  # keep off the relu kink
    m = rng.normal(size=(4, 5))
    fn = lambda a: _scalarize(ad.relu(a) + ad.gelu(a) + ad.sigmoid(a), m)
    return ad.gradcheck(fn, [a])


@register("op.sum_mean")
def _check_reductions():
    rng = _rng(4)
    a = _t(rng, 3, 4, 2)
    m0 = rng.normal(size=(4, 2))
    m1 = rng.normal(size=(3, 4, 1))
    fn = lambda a: _scalarize(a.sum(axis=0), m0) + _scalarize(a.mean(axis=-1, keepdims=True), m1)
    return ad.gradcheck(fn, [a])


@register("op.reshape_transpose_getitem")
def _check_views():
    rng = _rng(5)
    a = _t(rng, 4, 6)
    m = rng.normal(size=(3, 2))
    fn = lambda a: _scalarize(a.reshape(6, 4).transpose(1, 0)[1:4, 2:4], m)
    return ad.gradcheck(fn, [a])


@register("op.concat_stack")
def _check_concat_stack():
    rng = _rng(6)
    a, b = _t(rng, 2, 3), _t(rng, 2, 3)
    mc = rng.normal(size=(4, 3))
    ms = rng.normal(size=(2, 2, 3))
    fn = lambda a, b: _scalarize(ad.concat([a, b], axis=0), mc) + _scalarize(
        ad.stack([a, b], axis=0), ms
    )
    return ad.gradcheck(fn, [a, b])


@register("op.matmul_batched")
def _check_matmul():
    rng = _rng(7)
    a, b = _t(rng, 2, 3, 4), _t(rng, 4, 5)
    m = rng.normal(size=(2, 3, 5))
    fn = lambda a, b: _scalarize(ad.matmul(a, b), m)
    return ad.gradcheck(fn, [a, b])


@register("op.softmax_logsumexp")
def _check_softmax():
    rng = _rng(8)
    a = _t(rng, 3, 5)
    m = rng.normal(size=(3, 5))
    m2 = rng.normal(size=(3,))
    fn = lambda a: _scalarize(ad.softmax(a, axis=-1), m) + _scalarize(
        ad.logsumexp(a, axis=-1), m2
    )
    return ad.gradcheck(fn, [a])


@register("op.layer_norm")
def _check_layer_norm():
    rng = _rng(9)
    x, g, b = _t(rng, 3, 6), _t(rng, 6), _t(rng, 6)
    m = rng.normal(size=(3, 6))
    fn = lambda x, g, b: _scalarize(ad.layer_norm(x, g, b), m)
    return ad.gradcheck(fn, [x, g, b])


@register("op.conv2d")
def _check_conv2d():
    rng = _rng(10)
    x, w = _t(rng, 2, 6, 6), _t(rng, 3, 2, 3, 3)
    m = rng.normal(size=(3, 3, 3))
    fn = lambda x, w: _scalarize(ad.conv2d(x, w, stride=2, pad=1), m)
    return ad.gradcheck(fn, [x, w])


# -- composite blocks ------------------------------------------------------


def _mha_weights(rng, dim, heads):
    return MhaWeights.create(dim, heads, rng)


@register("block.attention")
def _check_attention():
    rng = _rng(20)
    q, k, v = _t(rng, 4, 6), _t(rng, 5, 6), _t(rng, 5, 6)
    m = rng.normal(size=(4, 6))
    fn = lambda q, k, v: _scalarize(attention(q, k, v), m)
    return ad.gradcheck(fn, [q, k, v])


@register("block.multi_head_attention")
def _check_mha():
    rng = _rng(21)
    w = _mha_weights(rng, 8, 2)
    q, kv = _t(rng, 3, 8), _t(rng, 5, 8)
    m = rng.normal(size=(3, 8))
    fn = lambda q, kv, wq, wk, wv, wo: _scalarize(multi_head_attention(w, q, kv, kv), m)
    return ad.gradcheck(fn, [q, kv, w.wq, w.wk, w.wv, w.wo])


@register("block.window_attention")
def _check_window_attention():
    rng = _rng(22)
    w = _mha_weights(rng, 8, 2)
    ln = LayerNormWeights.create(8)
    tokens = _t(rng, 12, 8)  # 3 x 4 grid, 2 x 2 windows
    m = rng.normal(size=(12, 8))
    fn = lambda t, wq, wo: _scalarize(
        window_self_attention(w, t, (3, 4), (2, 2), ln=ln), m
    )
    return ad.gradcheck(fn, [tokens, w.wq, w.wo])


@register("block.ffn")
def _check_ffn():
    rng = _rng(23)
    w = FfnWeights.create(6, 12, rng)
    x = _t(rng, 4, 6)
    m = rng.normal(size=(4, 6))
    fn = lambda x, w1, b1: _scalarize(ffn(w, x), m)
    return ad.gradcheck(fn, [x, w.lin1.w, w.lin2.w])


@register("block.pga")
def _check_pga():
    from .shape_decoder import PgaWeights, pga

    rng = _rng(24)
    l, l_e, d = 6, 6, 8
    w = PgaWeights.create(d, l_e, 2 * d, rng)
    shape_t, pose_t = _t(rng, l, d), _t(rng, l, d)
    enc = _t(rng, l_e, d)
    m = rng.normal(size=(l, d))
    grid = TokenGrid(tokens=enc, grid=(2, 3))
    fn = lambda s, p, e, fc: _scalarize(
        pga(w, s, p, TokenGrid(tokens=e, grid=(2, 3))), m
    )
    return ad.gradcheck(fn, [shape_t, pose_t, enc, w.fc.w])


@register("block.stpd_step")
def _check_stpd_step():
    from .pose_decoder import StpdWeights, stpd_step

    rng = _rng(25)
    d = 8
    w = StpdWeights.create(d, 2, 2 * d, (2, 2), rng)
    q = _t(rng, 6, d)
    enc = _t(rng, 6, d)
    m = rng.normal(size=(6, d))
    fn = lambda q, e, wq, fw: _scalarize(
        stpd_step(w, q, TokenGrid(tokens=e, grid=(2, 3))), m
    )
    return ad.gradcheck(fn, [q, enc, w.cross_mha.wq, w.ffn.lin1.w])


@register("block.stsd_step")
def _check_stsd_step():
    from .shape_decoder import StsdWeights, stsd_step

    rng = _rng(26)
    d = 8
    w = StsdWeights.create(d, 2, 2 * d, (2, 2), 6, rng)
    sq = _t(rng, 6, d)
    pt = _t(rng, 6, d)
    enc = _t(rng, 6, d)
    m = rng.normal(size=(6, d))
    fn = lambda s, p, e, fc: _scalarize(
        stsd_step(w, s, p, TokenGrid(tokens=e, grid=(2, 3))), m
    )
    return ad.gradcheck(fn, [sq, pt, enc, w.pga.fc.w])


@register("block.body_forward")
def _check_body_forward():
    rng = _rng(27)
    template = body_model.build_default_template(num_vertices=140, seed=0)
    vec = ad.parameter(
        np.concatenate([
            body_model.identity_rot6d().reshape(-1) + 0.05 * rng.normal(size=132),
            0.5 * rng.normal(size=10),
            [0.4],
        ])
    )
    m_mesh = rng.normal(size=(template.num_vertices, 3))
    trans = np.array([0.1, -0.2, 3.0])

    def fn(vec):
        mesh, joints = body_model.forward_flat(template, vec, trans)
        return _scalarize(mesh, m_mesh)

    return ad.gradcheck(fn, [vec], h=1e-6)


@register("block.total_loss")
def _check_total_loss():
    rng = _rng(28)
    template = body_model.build_default_template(num_vertices=140, seed=0)
    cam = CameraIntrinsics.default_for_image(32, 32)
    k, gh, gw = body_model.NUM_JOINTS, 4, 4
    params = body_model.BodyParams(
        theta=body_model.identity_rot6d() + 0.05 * rng.normal(size=(k, 6)),
        beta=0.5 * rng.normal(size=10),
        alpha=0.0,
        trans=np.array([0.0, 0.0, 3.0]),
    )
    _, joints = body_model.forward(template, params)
    person = losses.GroundTruthPerson(params=params, joints=joints.data)
    gt = losses.render_targets([person], (gh, gw), cam, cell_px=8.0)
    assert gt.persons, "GT person fell off the toy grid"

    m2d = ad.parameter(rng.uniform(0.1, 0.9, size=(k, gh, gw)))
    mo = ad.parameter(0.1 * rng.normal(size=(3, k, gh, gw)))
    md = ad.parameter(3.0 + 0.1 * rng.normal(size=(1, gh, gw)))
    ms = ad.parameter(gt.ms + 0.05 * rng.normal(size=gt.ms.shape))

    def fn(m2d, mo, md, ms):
        maps = heads_mod.MapSet(m2d=m2d, mo=mo, md=md, ms=ms)
        total, _ = losses.total_loss(
            maps, gt, losses.LossWeights(), template, cam, cell_px=8.0
        )
        return total

    return ad.gradcheck(fn, [m2d, mo, md, ms], h=1e-6)
