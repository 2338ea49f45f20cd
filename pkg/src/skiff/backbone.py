"""Dual-branch clustering backbone.

Both the image and the radar raster are treated as point sets: every pixel
becomes a feature vector with its normalized (row, col) coordinate attached.
Each stage reduces the grid with a patch-concat linear projection, then runs
blocks that group points around grid-proposed centers by cosine similarity,
aggregate member values into each center, and dispatch the aggregate back to
the members. The radar branch opens with a channel + deformable-spatial gate
so sparse returns are re-weighted before any mixing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import Conv1d, Conv2d, Linear, Module, Scalar
from .rng import Rng
from .tensor import (Tensor, add, avg_pool_grid, bilinear_sample, concat,
                     cosine_pairwise, discrete_choice, div, gather, gelu,
                     global_avg_pool, mul, permute, reduce_sum, reshape,
                     scatter_add, sigmoid, split)


@dataclass
class PointSet:
    """A feature map flattened to columns, with per-point normalized coords."""

    features: Tensor  # (d, n)
    positions: np.ndarray  # (2, n), constant
    height: int
    width: int

    def as_map(self) -> Tensor:
        d = self.features.shape[0]
        return reshape(self.features, (d, self.height, self.width))


def grid_positions(height: int, width: int) -> np.ndarray:
    """(2, h*w) with point (i, j) at (i/w - 0.5, j/h - 0.5)."""
    i, j = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    return np.stack([i / width - 0.5, j / height - 0.5]).reshape(2, height * width)


def attach_positions(map_t: Tensor) -> PointSet:
    """(C, H, W) -> point set whose features carry the 2 coord channels."""
    c, h, w = map_t.shape
    pos = grid_positions(h, w)
    feats = concat([reshape(map_t, (c, h * w)), Tensor(pos)], axis=0)
    return PointSet(feats, pos, h, w)


def with_positions(points: PointSet) -> Tensor:
    """(d, n) -> (d+2, n) by appending the coordinate rows."""
    return concat([points.features, Tensor(points.positions)], axis=0)


def propose_centers(features: Tensor, height: int, width: int, grid: int) -> Tensor:
    """(d, h*w) -> (d, grid*grid) cell means, row-major cell order."""
    d = features.shape[0]
    pooled = avg_pool_grid(reshape(features, (d, height, width)), grid)
    return reshape(pooled, (d, grid * grid))


def aggregate_members(vcenters: Tensor, values: Tensor, weights: Tensor,
                      assign: np.ndarray) -> Tensor:
    """Weighted pull of member values into their assigned centers.

    f_c = (v_c + sum_i w_i v_i) / (1 + sum_i w_i) over the members assigned to
    each center. With weights in [0, 1] every output column is a convex
    combination of the center value and its member values, so it stays inside
    their coordinate-wise hull. Centers with no members pass through
    unchanged.

    vcenters (d, m), values (d, n), weights (1, n), assign (n,) of center ids.
    """
    d, m = vcenters.shape
    agg = scatter_add(Tensor(np.zeros((d, m))), assign, mul(values, weights), axis=1)
    wsum = scatter_add(Tensor(np.zeros((1, m))), assign, weights, axis=1)
    return div(add(vcenters, agg), add(wsum, 1.0))


class PointReducer(Module):
    """Non-overlapping s x s patch merge: member-major concat, then a linear map.

    Flattened patch layout is (member_row*s + member_col)*d + channel, so a
    block-identity projection reproduces the raw patch concat.
    """

    def __init__(self, d_in: int, d_out: int, stride: int, rng: Rng):
        self.stride = stride
        self.d_in = d_in
        self.d_out = d_out
        self.proj = Linear(d_in * stride * stride, d_out, rng)

    def __call__(self, feats: Tensor, height: int, width: int) -> PointSet:
        s = self.stride
        d = feats.shape[0]
        if d != self.d_in:
            raise ValueError(f"point reducer expects {self.d_in} channels, got {d}")
        if height % s or width % s:
            raise ValueError(f"extent {height}x{width} not divisible by stride {s}")
        ho, wo = height // s, width // s
        x = reshape(feats, (d, ho, s, wo, s))
        x = permute(x, (2, 4, 0, 1, 3))  # (s, s, d, ho, wo): member-major, channel minor
        x = reshape(x, (s * s * d, ho * wo))
        return PointSet(self.proj(x), grid_positions(ho, wo), ho, wo)


class CocBlock(Module):
    """Cluster, aggregate, dispatch; exact identity at init (zeroed second FF)."""

    def __init__(self, dim: int, heads: int, grid: int, rng: Rng):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.grid = grid
        self.alpha = Scalar(1.0)
        self.beta = Scalar(0.0)
        self.value_proj = Linear(dim, dim, rng.child(1))
        self.head_mats = [Linear(dim // heads, dim // heads, bias=False, init="identity")
                          for _ in range(heads)]
        self.ff1 = Linear(dim, dim, rng.child(2))
        self.ff2 = Linear(dim, dim, init="zero")
        self.out_proj = Linear(dim, dim, bias=False, init="identity")

    def __call__(self, points: PointSet) -> PointSet:
        feats = points.features
        d, n = feats.shape
        h, w, g = points.height, points.width, self.grid
        m = g * g
        centers = propose_centers(feats, h, w, g)
        value = self.value_proj(feats)
        vcenters = propose_centers(value, h, w, g)

        f_heads = split(feats, self.heads, axis=0)
        c_heads = split(centers, self.heads, axis=0)
        v_heads = split(value, self.heads, axis=0)
        vc_heads = split(vcenters, self.heads, axis=0)
        col = np.arange(n)
        outs = []
        for head in range(self.heads):
            sims = cosine_pairwise(c_heads[head], f_heads[head])  # (m, n)
            assign = discrete_choice(lambda s=sims: np.argmax(s.data, axis=0))
            s_i = gather(reshape(sims, (m * n,)), assign * n + col)  # (n,)
            w_i = sigmoid(add(mul(self.alpha(), s_i), self.beta()))
            w_row = reshape(w_i, (1, n))
            f_c = aggregate_members(vc_heads[head], v_heads[head], w_row, assign)
            f_i = gather(f_c, assign, axis=1)  # (dh, n)
            outs.append(self.head_mats[head](mul(f_i, w_row)))

        msg = concat(outs, axis=0)
        upd = self.out_proj(self.ff2(gelu(self.ff1(msg))))
        return PointSet(add(feats, upd), points.positions, h, w)


class RadarPriorAttention(Module):
    """Channel gate (pooled 1-D conv) then deformable 3x3 spatial gate.

    All gate weights start at zero; with compensation on, each sigmoid gate is
    doubled so the module opens as the identity.
    """

    def __init__(self, rng: Rng, channels: int = 4, compensate: bool = True):
        self.channels = channels
        self.compensate = compensate
        self.eca = Conv1d(3, padding=1, init="zero")
        self.offset_conv = Conv2d(channels, 18, 3, padding=1, init="zero")
        # single attention channel built from 9 bilinear taps of the 3x3 support
        self.att_weight = Tensor(np.zeros((channels, 3, 3)), requires_grad=True)
        self.att_bias = Tensor(np.zeros(()), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        c, h, w = x.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        pooled = reshape(global_avg_pool(x), (c,))
        ch_gate = sigmoid(self.eca(pooled))
        if self.compensate:
            ch_gate = mul(ch_gate, 2.0)
        x = mul(x, reshape(ch_gate, (c, 1, 1)))

        offsets = self.offset_conv(x)  # (18, h, w): (dy, dx) per tap, taps row-major
        n = h * w
        base_y, base_x = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
        tap_offs = split(reshape(offsets, (9, 2, n)), 9, axis=0)
        w_flat = reshape(self.att_weight, (c, 9))
        att = None
        for t in range(9):
            ky, kx = divmod(t, 3)
            dy, dx = split(tap_offs[t], 2, axis=1)
            ys = add(reshape(dy, (n, 1)), (base_y.reshape(-1, 1) + ky - 1).astype(np.float64))
            xs = add(reshape(dx, (n, 1)), (base_x.reshape(-1, 1) + kx - 1).astype(np.float64))
            sampled = bilinear_sample(x, concat([xs, ys], axis=1))  # (c, n)
            tap = mul(sampled, reshape(gather(w_flat, [t], axis=1), (c, 1)))
            att = tap if att is None else add(att, tap)
        att = add(reduce_sum(att, axis=0), self.att_bias)  # (n,)
        sp_gate = sigmoid(reshape(att, (1, h, w)))
        if self.compensate:
            sp_gate = mul(sp_gate, 2.0)
        return mul(x, sp_gate)


@dataclass
class BackboneConfig:
    dims: tuple = (16, 32, 64, 128)
    strides: tuple = (4, 2, 2, 2)
    blocks: tuple = (1, 1, 2, 1)
    heads: tuple = (2, 2, 4, 4)
    center_grids: tuple = (8, 4, 2, 2)
    prior_attention: bool = True
    image_channels: int = 3
    radar_channels: int = 4

    def __post_init__(self):
        lens = {len(self.dims), len(self.strides), len(self.blocks), len(self.heads),
                len(self.center_grids)}
        if lens != {4}:
            raise ValueError(f"stage lists must all have length 4, got {lens}")
        for d, h in zip(self.dims, self.heads):
            if d % h:
                raise ValueError(f"dim {d} not divisible by heads {h}")

    def stage_extents(self, size: int) -> list[int]:
        out = []
        for s in self.strides:
            if size % s:
                raise ValueError(f"extent {size} not divisible by stride {s}")
            size //= s
            out.append(size)
        return out

    def stage_grid(self, stage: int, extent: int) -> int:
        # clamp the proposal grid on tiny maps; it must still tile the extent
        g = min(self.center_grids[stage], extent)
        if extent % g:
            raise ValueError(f"extent {extent} not divisible by center grid {g}")
        return g


@dataclass
class StagePair:
    vision: PointSet
    radar: PointSet


class _Branch(Module):
    def __init__(self, cfg: BackboneConfig, in_channels: int, size: int, rng: Rng):
        extents = cfg.stage_extents(size)
        self.reducers = []
        self.stage_blocks = []
        d_prev = in_channels
        for s, (d, stride, n_blocks, heads) in enumerate(
                zip(cfg.dims, cfg.strides, cfg.blocks, cfg.heads)):
            # +2: coordinate rows are appended at every reducer input
            self.reducers.append(PointReducer(d_prev + 2, d, stride, rng.child(10 + s)))
            grid = cfg.stage_grid(s, extents[s])
            self.stage_blocks.append(
                [CocBlock(d, heads, grid, rng.child(100 * (s + 1) + b)) for b in range(n_blocks)])
            d_prev = d

    def run_stage(self, stage: int, points: PointSet) -> PointSet:
        out = self.reducers[stage](with_positions(points), points.height, points.width)
        for block in self.stage_blocks[stage]:
            out = block(out)
        return out


class Backbone(Module):
    """Two point-cluster branches with per-stage cross-branch hooks."""

    def __init__(self, cfg: BackboneConfig, size: int, rng: Rng):
        self.cfg = cfg
        self.size = size
        self.prior = (RadarPriorAttention(rng.child(1), cfg.radar_channels)
                      if cfg.prior_attention else None)
        self.vision = _Branch(cfg, cfg.image_channels, size, rng.child(2))
        self.radar = _Branch(cfg, cfg.radar_channels, size, rng.child(3))

    def __call__(self, image: Tensor, revp: Tensor, fusion_hooks=None) -> list[StagePair]:
        if image.shape[1] != self.size or image.shape[1] != image.shape[2]:
            raise ValueError(f"expected square {self.size} input, got {image.shape}")
        if revp.shape[1:] != image.shape[1:]:
            raise ValueError(f"image {image.shape} vs radar {revp.shape} extent mismatch")
        if self.prior is not None:
            revp = self.prior(revp)
        n = self.size * self.size
        pos = grid_positions(self.size, self.size)
        vp = PointSet(reshape(image, (image.shape[0], n)), pos, self.size, self.size)
        rp = PointSet(reshape(revp, (revp.shape[0], n)), pos, self.size, self.size)
        pairs = []
        for stage in range(4):
            vp = self.vision.run_stage(stage, vp)
            rp = self.radar.run_stage(stage, rp)
            if fusion_hooks is not None and fusion_hooks[stage] is not None:
                vp, rp = fusion_hooks[stage](vp, rp)
            pairs.append(StagePair(vp, rp))
        return pairs
