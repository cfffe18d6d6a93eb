"""U-shaped decoder branches with skip connections and the upsampling heads."""
from __future__ import annotations

from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import RasterError
from .encoder import FeaturePyramid, SwinBlock, to_map, to_tokens


class BranchId(str, Enum):
    HAND = "hand"
    LEFT_OBJ = "left_obj"
    RIGHT_OBJ = "right_obj"
    CONTACT_BOUNDARY = "contact_boundary"


class PatchExpand(nn.Module):
    """Linear channel expansion followed by a depth-to-space rearrangement."""

    def __init__(self, dim: int, scale: int = 2, out_dim: int | None = None):
        super().__init__()
        self.scale = scale
        self.out_dim = out_dim if out_dim is not None else dim // scale
        self.expand = nn.Linear(dim, self.out_dim * scale * scale, bias=False)
        self.norm = nn.LayerNorm(self.out_dim)

    def forward(self, x):
        # x: (B, H, W, C)
        B, H, W, _ = x.shape
        s = self.scale
        x = self.expand(x).view(B, H, W, s, s, self.out_dim)
        x = x.permute(0, 1, 3, 2, 4, 5).reshape(B, H * s, W * s, self.out_dim)
        return self.norm(x)


class UpStage(nn.Module):
    def __init__(self, dim, depth, num_heads, window_size, mlp_ratio, upsample: bool):
        super().__init__()
        self.concat_back = nn.Linear(2 * dim, dim)
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size, 0 if i % 2 == 0 else window_size // 2, mlp_ratio)
            for i in range(depth)
        )
        self.up = PatchExpand(dim) if upsample else nn.LayerNorm(dim)

    def forward(self, d, skip):
        x = self.concat_back(torch.cat([d, skip], dim=-1))
        for blk in self.blocks:
            x = blk(x)
        return self.up(x)


class DecoderBranch(nn.Module):
    """One decoding path from the bottleneck back to 1/patch resolution.

    ``D_0`` expands the bottleneck map 2x. Each following stage concatenates
    the running map with the encoder map of the same resolution, mixes them
    and expands 2x again; the last stage consumes ``F_0`` and keeps its size.
    """

    def __init__(self, stage_dims, depths, num_heads, window_size, mlp_ratio=4.0):
        super().__init__()
        n = len(stage_dims)
        self.expand0 = PatchExpand(2 * stage_dims[-1])
        stages = []
        for i in range(n):
            level = n - 1 - i  # encoder map consumed by this stage
            stages.append(
                UpStage(stage_dims[level], depths[level], num_heads[level], window_size,
                        mlp_ratio, upsample=level > 0)
            )
        self.stage = nn.ModuleList(stages)

    def forward(self, pyramid: FeaturePyramid) -> torch.Tensor:
        maps = pyramid.maps
        d = self.expand0(to_tokens(pyramid.f_ehc))
        for i, st in enumerate(self.stage):
            skip = maps[len(maps) - 1 - i]
            if d.shape[1:3] != skip.shape[2:] or d.shape[-1] != skip.shape[1]:
                raise RasterError(
                    f"decoder stage{i}: running map {tuple(d.shape[1:])} (H, W, C) does not match "
                    f"skip F_{len(maps) - 1 - i} {tuple(skip.shape[1:])} (C, H, W)"
                )
            d = st(d, to_tokens(skip))
        return to_map(d)


class SegHead(nn.Module):
    """Upsampling classifier: per-token linear map to ``scale**2`` logits per
    class, rearranged depth-to-space to the input resolution."""

    def __init__(self, dim: int, out_channels: int, scale: int = 4):
        super().__init__()
        self.scale = scale
        self.out_channels = out_channels
        self.norm = nn.LayerNorm(dim)
        self.expand = nn.Linear(dim, out_channels * scale * scale)

    def forward(self, d: torch.Tensor) -> torch.Tensor:
        x = self.expand(self.norm(to_tokens(d)))
        return F.pixel_shuffle(to_map(x), self.scale)
