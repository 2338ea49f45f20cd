"""Asymmetric cross-branch fusion.

Two one-way couplers with different jobs: the radar branch absorbs attended
vision features through a grouped channel/spatial gate stack (detection cares
about appearance), while the vision branch is modulated by normalized radar
features as a per-pixel gain and bias (segmentation cares about contrast).
Both start as exact identities so either can be toggled without disturbing
the other branch at initialization.
"""

from __future__ import annotations

import numpy as np

from .nn import Conv1x1, Linear, Module, Scalar
from .rng import Rng
from .tensor import (Tensor, add, concat, gather, global_avg_pool, group_norm,
                     instance_norm, mul, reshape, sigmoid, split)


def shuffle_order(channels: int, groups: int) -> np.ndarray:
    return np.arange(channels).reshape(groups, -1).T.ravel()


def channel_shuffle(f: Tensor, groups: int) -> Tensor:
    """Fixed channel permutation: reshape (g, c/g), transpose, flatten."""
    c = f.shape[0]
    if c % groups:
        raise ValueError(f"{c} channels not divisible by {groups} shuffle groups")
    return gather(f, shuffle_order(c, groups), axis=0)


class IrcUnit(Module):
    """Vision -> radar coupler: grouped gates, shuffle, fuse, residual.

    The vision map is split into ``groups`` channel groups and each group is
    halved: the first half gets a pooled channel gate, the second a per-pixel
    gate computed on the group-normalized half. The gated map is concatenated
    with the radar map, shuffled across the two modality halves, fused back to
    c channels, and added to the radar input. Zero-init fuse weights make the
    unit open as the identity on the radar branch.
    """

    def __init__(self, channels: int, rng: Rng, groups: int = 2):
        if channels % (2 * groups):
            raise ValueError(f"{channels} channels not divisible by 2*groups={2 * groups}")
        self.channels = channels
        self.groups = groups
        half = channels // (2 * groups)
        self.channel_att = [Linear(half, half, rng.child(10 + g)) for g in range(groups)]
        self.spatial_att = [Conv1x1(half, half, rng.child(20 + g)) for g in range(groups)]
        self.fuse = Conv1x1(2 * channels, channels, init="zero")

    def __call__(self, f_img: Tensor, f_rad: Tensor) -> Tensor:
        if f_img.shape != f_rad.shape:
            raise ValueError(f"shape mismatch: vision {f_img.shape} vs radar {f_rad.shape}")
        c, h, w = f_img.shape
        if c != self.channels:
            raise ValueError(f"expected {self.channels} channels, got {c}")
        gated = []
        for g, grp in enumerate(split(f_img, self.groups, axis=0)):
            ch_half, sp_half = split(grp, 2, axis=0)
            pooled = reshape(global_avg_pool(ch_half), (ch_half.shape[0], 1))
            gate_c = sigmoid(self.channel_att[g](pooled))  # (half, 1)
            gated.append(mul(ch_half, reshape(gate_c, (ch_half.shape[0], 1, 1))))
            gate_s = sigmoid(self.spatial_att[g](group_norm(sp_half, groups=1)))
            gated.append(mul(sp_half, gate_s))
        f_sc = concat(gated, axis=0)  # (c, h, w)
        both = channel_shuffle(concat([f_sc, f_rad], axis=0), groups=2)
        return add(self.fuse(both), f_rad)


def rim_modulate(f_img: Tensor, f_hat: Tensor, gamma: Tensor) -> Tensor:
    """out = (1 + f_hat) * f_img + gamma * f_hat: gain plus scaled bias."""
    return add(mul(add(f_hat, 1.0), f_img), mul(gamma, f_hat))


class RimUnit(Module):
    """Radar -> vision coupler: normalized radar map drives gain and bias.

    f_hat = InstanceNorm(W f_rad + b); zero-init projection and gamma make the
    unit the exact identity on the vision branch at initialization.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels = channels
        self.eps = eps
        self.proj = Conv1x1(channels, channels, init="zero")
        self.gamma = Scalar(0.0)

    def __call__(self, f_img: Tensor, f_rad: Tensor) -> Tensor:
        if f_img.shape != f_rad.shape:
            raise ValueError(f"shape mismatch: vision {f_img.shape} vs radar {f_rad.shape}")
        f_hat = instance_norm(self.proj(f_rad), eps=self.eps)
        return rim_modulate(f_img, f_hat, self.gamma())
