"""Dual top-down pyramid over the last three backbone stages.

Both branches run the same merge recipe (lateral 1x1, nearest upsample, add,
one clustering unit). The vision levels then pass a small dilated-conv
pyramid with a lateral skip, and each radar level can absorb its vision
counterpart through an IRC unit. Detection reads the radar pyramid,
segmentation the vision pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import CocBlock, PointSet, grid_positions
from .fusion import IrcUnit
from .nn import Conv1x1, Conv2d, Module
from .rng import Rng
from .tensor import Tensor, add, concat, gelu, group_norm, reshape, upsample_nearest

PYRAMID_STRIDES = (8, 16, 32)


@dataclass
class PyramidFeatures:
    vision: list  # 3 maps, neck_dim channels, extents size/8, size/16, size/32
    radar: list

    @property
    def strides(self) -> tuple:
        return PYRAMID_STRIDES


class ConvUnit(Module):
    """3x3 conv + group norm + GELU; the non-clustering merge unit."""

    def __init__(self, channels: int, rng: Rng, extent: int, norm_groups: int = 4):
        self.conv = Conv2d(channels, channels, 3, rng, padding=1)
        self.norm_groups = min(norm_groups, channels)

    def __call__(self, x: Tensor) -> Tensor:
        return gelu(group_norm(self.conv(x), self.norm_groups))


class CocUnit(Module):
    """One clustering block applied to a (c, h, w) map of a known extent."""

    def __init__(self, channels: int, rng: Rng, extent: int, heads: int = 4):
        self.extent = extent
        grid = 2 if extent % 2 == 0 else 1
        self.block = CocBlock(channels, heads, grid, rng)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if h != self.extent or w != self.extent:
            raise ValueError(f"unit built for extent {self.extent}, got {h}x{w}")
        pts = PointSet(reshape(x, (c, h * w)), grid_positions(h, w), h, w)
        return self.block(pts).as_map()


class Aspp(Module):
    """Parallel dilated 3x3 convs (rates 1, 2, 4), concat, 1x1 fuse.

    Dilated taps start as center-pass identities and the fuse averages the
    three rails, so the module opens as the identity map.
    """

    def __init__(self, channels: int, rng: Rng, rates: tuple = (1, 2, 4)):
        self.rates = rates
        self.convs = [Conv2d(channels, channels, 3, rng.child(r), padding=r, dilation=r,
                             init="center_identity") for r in rates]
        self.fuse = Conv1x1(len(rates) * channels, channels, init="zero")
        eye = np.eye(channels)
        self.fuse.inner.weight.data[:] = np.concatenate([eye] * len(rates), axis=1) / len(rates)

    def __call__(self, x: Tensor) -> Tensor:
        return self.fuse(concat([conv(x) for conv in self.convs], axis=0))


class FpnNeck(Module):
    """Laterals + top-down merge per branch, vision ASPP, optional radar fusion."""

    def __init__(self, stage_dims: tuple, neck_dim: int, size: int, rng: Rng,
                 coc_units: bool = True, neck_fusion: bool = True,
                 irc_groups: int = 2):
        in_dims = stage_dims[1:]  # pyramid reads the stride 8, 16, 32 stages
        extents = [size // s for s in PYRAMID_STRIDES]
        self.neck_dim = neck_dim
        self.vision_lateral = [Conv1x1(d, neck_dim, rng.child(10 + i))
                               for i, d in enumerate(in_dims)]
        self.radar_lateral = [Conv1x1(d, neck_dim, rng.child(20 + i))
                              for i, d in enumerate(in_dims)]
        unit = CocUnit if coc_units else ConvUnit
        self.vision_units = [unit(neck_dim, rng.child(30 + i), extents[i]) for i in range(3)]
        self.radar_units = [unit(neck_dim, rng.child(40 + i), extents[i]) for i in range(3)]
        self.aspp = [Aspp(neck_dim, rng.child(50 + i)) for i in range(3)]
        self.irc = ([IrcUnit(neck_dim, rng.child(60 + i), irc_groups) for i in range(3)]
                    if neck_fusion else None)

    def _top_down(self, maps: list, laterals: list, units: list):
        lats = [lat(m) for lat, m in zip(laterals, maps)]
        p2 = units[2](lats[2])
        p1 = units[1](add(lats[1], upsample_nearest(p2, 2)))
        p0 = units[0](add(lats[0], upsample_nearest(p1, 2)))
        return [p0, p1, p2], lats

    def __call__(self, stages: list) -> PyramidFeatures:
        vmaps = [s.vision.as_map() for s in stages[1:]]
        rmaps = [s.radar.as_map() for s in stages[1:]]
        vis_td, vis_lats = self._top_down(vmaps, self.vision_lateral, self.vision_units)
        rad_td, _ = self._top_down(rmaps, self.radar_lateral, self.radar_units)
        vision = [add(self.aspp[i](vis_td[i]), vis_lats[i]) for i in range(3)]
        if self.irc is not None:
            radar = [self.irc[i](vision[i], rad_td[i]) for i in range(3)]
        else:
            radar = rad_td
        return PyramidFeatures(vision, radar)
