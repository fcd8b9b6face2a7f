"""Full network assembly: backbone, encoder, decoder variant, map heads.

Four decoder variants cover the architecture ablation axis:
  conv            heads applied directly to the encoded tokens (no query
                  decoders at all)
  split_posh      independent pose/shape query decoders, vanilla attention
                  path: no recurrence, no token aligning, no pose guidance
  pga             pose-guided shape decoding, still per-frame (no recurrence)
  progressive_pga full model: recurrent query fusion plus pose guidance

The parameter registry enumerates exactly the weights a variant can train,
in a fixed order, so optimizer state, checkpoints, and parameter counts all
agree.
"""

from __future__ import annotations

from dataclasses import dataclass, fields, is_dataclass

import numpy as np

from . import autodiff as ad
from . import body as body_model
from . import heads as heads_mod
from .autodiff import Tensor, TensorError
from .config import ModelConfig
from .encoder import (
    BackboneWeights,
    FrameBatch,
    PatchEmbedWeights,
    SteWeights,
    TokenGrid,
    backbone,
    patch_embed,
    ste_forward,
)
from .pose_decoder import QuerySet, StpdWeights, stpd_decode
from .shape_decoder import ShapeTokenStream, StsdWeights, stsd_decode


def _collect(prefix, obj, out):
    if isinstance(obj, Tensor):
        if obj.requires_grad:
            out[prefix] = obj
        return
    if is_dataclass(obj):
        for f in fields(obj):
            _collect(f"{prefix}.{f.name}" if prefix else f.name, getattr(obj, f.name), out)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            _collect(f"{prefix}.{i}", item, out)


def named_parameters(weight_struct, prefix=""):
    """Deterministically ordered name -> Tensor map of trainable leaves."""
    out = {}
    _collect(prefix, weight_struct, out)
    return out


@dataclass
class ModelOutput:
    tau_e: list[TokenGrid]
    pose_tokens: list[Tensor]   # T of L x D
    shape_tokens: list[Tensor]
    maps: list[heads_mod.MapSet]


class Model:
    """Config-driven weight container with a clip-level forward."""

    def __init__(self, cfg: ModelConfig, seed=0):
        self.cfg = cfg
        rng = np.random.default_rng(np.random.PCG64(seed))
        gh, gw = cfg.grid
        dim, h, ffn_dim = cfg.dim, cfg.heads, cfg.ffn_mult * cfg.dim
        window = (cfg.window, cfg.window)

        self.backbone = BackboneWeights.create(cfg.in_channels, cfg.backbone_channels, rng)
        self.patch_embed = PatchEmbedWeights.create(
            cfg.backbone_channels, cfg.patch, gh, gw, dim, rng
        )
        self.ste = SteWeights.create(dim, h, cfg.enc_layers, cfg.t_max, rng)

        if cfg.variant == "conv":
            self.pose_queries = self.shape_queries = None
            self.stpd = self.stsd = None
        else:
            self.pose_queries = QuerySet.create(cfg.num_tokens, dim, "pose", rng)
            self.shape_queries = QuerySet.create(cfg.num_tokens, dim, "shape", rng)
            self.stpd = StpdWeights.create(dim, h, ffn_dim, window, rng)
            pose_guided = cfg.variant in ("pga", "progressive_pga")
            self.stsd = StsdWeights.create(
                dim, h, ffn_dim, window, cfg.num_tokens, rng,
                use_ta=cfg.use_ta and pose_guided,
                use_wpsa=cfg.use_wpsa,
                use_wssa=cfg.use_wssa,
                pose_guided=pose_guided,
                detach_pose=cfg.detach_pose,
            )
        self.heads = heads_mod.HeadWeights.create(dim, cfg.head_hidden, rng)
        self.template = body_model.build_default_template(
            num_vertices=cfg.num_vertices, seed=cfg.template_seed
        )
        self._params = self._build_registry()

    def _build_registry(self):
        out = {}
        out.update(named_parameters(self.backbone, "backbone"))
        out.update(named_parameters(self.patch_embed, "patch_embed"))
        out.update(named_parameters(self.ste, "ste"))
        if self.cfg.variant != "conv":
            out.update(named_parameters(self.pose_queries.queries, "pose_queries"))
            out.update(named_parameters(self.shape_queries.queries, "shape_queries"))
            stpd = named_parameters(self.stpd, "stpd")
            stsd = named_parameters(self.stsd, "stsd")
            if not self.cfg.progressive:
                # non-recurrent variants never evaluate the query fusion
                stpd = {k: v for k, v in stpd.items() if not k.startswith("stpd.fuse")}
                stsd = {k: v for k, v in stsd.items() if not k.startswith("stsd.fuse")}
            if not self.stsd.pose_guided:
                stsd = {k: v for k, v in stsd.items() if not k.startswith("stsd.pga.fc")}
            if not self.stsd.use_ta:
                stsd = {k: v for k, v in stsd.items() if not k.startswith("stsd.align")}
            if not (self.stsd.use_wssa or (self.stsd.pose_guided and self.stsd.use_wpsa)):
                stsd = {k: v for k, v in stsd.items()
                        if not (k.startswith("stsd.self_ln") or k.startswith("stsd.self_mha"))}
            out.update(stpd)
            out.update(stsd)
        out.update(named_parameters(self.heads, "heads"))
        return out

    def parameters(self):
        return self._params

    def count_params(self):
        return sum(int(np.prod(t.shape)) for t in self._params.values())

    @property
    def cell_px(self):
        return float(self.cfg.stride)

    def forward(self, frames: np.ndarray) -> ModelOutput:
        """frames: T x C x H x W -> per-frame maps on the token grid."""
        cfg = self.cfg
        t, c, h, w = frames.shape
        if (c, h, w) != (cfg.in_channels, cfg.image_h, cfg.image_w):
            raise TensorError(
                f"clip geometry {frames.shape[1:]} does not match config "
                f"({cfg.in_channels}, {cfg.image_h}, {cfg.image_w})"
            )
        if t > cfg.t_max:
            raise TensorError(f"clip length {t} exceeds t_max {cfg.t_max}")
        feats = backbone(self.backbone, FrameBatch(frames))
        grids = [patch_embed(self.patch_embed, f, i) for i, f in enumerate(feats)]
        tau_e = ste_forward(self.ste, grids)

        if cfg.variant == "conv":
            pose_tokens = [g.tokens for g in tau_e]
            shape_tokens = pose_tokens
        else:
            pose_stream = stpd_decode(
                self.stpd, self.pose_queries, tau_e,
                direction=cfg.direction, progressive=cfg.progressive,
            )
            shape_stream = stsd_decode(
                self.stsd, self.shape_queries, pose_stream, tau_e,
                direction=cfg.direction, progressive=cfg.progressive,
            )
            pose_tokens = pose_stream.frames
            shape_tokens = shape_stream.frames

        maps = [
            heads_mod.regress_maps(self.heads, pose_tokens[i], shape_tokens[i], cfg.grid)
            for i in range(t)
        ]
        return ModelOutput(tau_e=tau_e, pose_tokens=pose_tokens,
                           shape_tokens=shape_tokens, maps=maps)

    def detect(self, maps: heads_mod.MapSet, cam):
        """Top-N detections with decoded meshes for one frame's maps."""
        dets = heads_mod.top_n_centers(maps, self.cfg.n_max, self.cfg.score_thresh)
        decoded = []
        for det in dets:
            mesh, joints = heads_mod.decode_detection(
                det, self.template, cam, self.cell_px, maps=maps
            )
            decoded.append((det, mesh, joints))
        return decoded
