"""Full perception model: dual backbone, cross-branch fusion, pyramid, heads."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .backbone import Backbone, BackboneConfig, PointSet
from .fusion import IrcUnit, RimUnit
from .heads import DetHead, SegHead
from .neck import FpnNeck, PyramidFeatures
from .nn import Module
from .rng import Rng
from .tensor import Tensor, reshape

TOGGLE_NAMES = ("rim", "irc", "neck_fusion", "decoupled_head", "prior_attention",
                "multi_frame", "coc_fpn")


@dataclass
class ModelConfig:
    image_size: int = 64
    n_classes: int = 3  # object classes; seg raster adds background + drivable
    n_frames: int = 3
    dims: tuple = (16, 32, 64, 128)
    strides: tuple = (4, 2, 2, 2)
    blocks: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 2, 4, 4)
    center_grids: tuple = (8, 4, 2, 2)
    neck_dim: int = 64
    seed: int = 0
    # ablation toggles
    rim: bool = True
    irc: bool = True
    neck_fusion: bool = True
    decoupled_head: bool = True
    prior_attention: bool = True
    multi_frame: bool = True
    coc_fpn: bool = True

    def __post_init__(self):
        n = self.image_size
        if n < 32 or (n & (n - 1)) != 0:
            raise ValueError(f"image_size must be a power of two >= 32, got {n}")

    @property
    def seg_channels(self) -> int:
        return self.n_classes + 2  # background + objects + drivable

    @property
    def revp_frames(self) -> int:
        return self.n_frames if self.multi_frame else 1

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.dims, self.strides, self.blocks, self.heads,
                              self.center_grids, prior_attention=self.prior_attention)


def desk_config(**overrides) -> ModelConfig:
    return replace(ModelConfig(), **overrides) if overrides else ModelConfig()


def paper_config(**overrides) -> ModelConfig:
    base = ModelConfig(image_size=320, blocks=(2, 2, 6, 2))
    return replace(base, **overrides) if overrides else base


@dataclass
class ModelOutput:
    seg_logits: Tensor  # (n_classes + 2, H, W)
    det_levels: list  # 3 DetLevel entries
    pyramid: PyramidFeatures
    stages: list


class _StageFusion(Module):
    """Per-stage cross-branch hook; both units read the pre-fusion pair."""

    def __init__(self, channels: int, rng: Rng, use_irc: bool, use_rim: bool):
        self.irc = IrcUnit(channels, rng.child(1)) if use_irc else None
        self.rim = RimUnit(channels) if use_rim else None

    def __call__(self, vision: PointSet, radar: PointSet):
        if self.irc is None and self.rim is None:
            return vision, radar
        vmap, rmap = vision.as_map(), radar.as_map()
        new_v, new_r = vision, radar
        if self.rim is not None:
            out = self.rim(vmap, rmap)
            new_v = PointSet(reshape(out, vision.features.shape), vision.positions,
                             vision.height, vision.width)
        if self.irc is not None:
            out = self.irc(vmap, rmap)
            new_r = PointSet(reshape(out, radar.features.shape), radar.positions,
                             radar.height, radar.width)
        return new_v, new_r


class PerceptionModel(Module):
    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = Rng(cfg.seed)
        self.backbone = Backbone(cfg.backbone_config(), cfg.image_size, rng.child(1))
        self.stage_fusion = [
            _StageFusion(cfg.dims[i], rng.child(10 + i), cfg.irc, cfg.rim)
            for i in range(4)]
        self.neck = FpnNeck(cfg.dims, cfg.neck_dim, cfg.image_size, rng.child(2),
                            coc_units=cfg.coc_fpn, neck_fusion=cfg.neck_fusion)
        self.seg_head = SegHead(cfg.neck_dim, cfg.seg_channels, rng.child(3))
        self.det_head = DetHead(cfg.neck_dim, cfg.n_classes, rng.child(4),
                                decoupled=cfg.decoupled_head)

    def __call__(self, image: Tensor, revp: Tensor) -> ModelOutput:
        stages = self.backbone(image, revp, fusion_hooks=self.stage_fusion)
        pyramid = self.neck(stages)
        seg_logits = self.seg_head(pyramid.vision[0])
        det_levels = self.det_head(pyramid.radar)
        return ModelOutput(seg_logits, det_levels, pyramid, stages)


def build_model(cfg: ModelConfig) -> PerceptionModel:
    return PerceptionModel(cfg)
