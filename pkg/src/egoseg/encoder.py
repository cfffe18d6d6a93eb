"""Hierarchical image encoders and the bottleneck.

``SwinEncoder`` is a windowed-attention backbone (patch embedding, shifted
window blocks, patch merging). ``ConvEncoder`` is a plain strided
convolution stack with the same pyramid contract, for quick runs.

Feature maps travel between modules as (B, C, H, W) tensors.
"""
from __future__ import annotations

import functools
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import RasterError


@dataclass
class EncoderConfig:
    kind: str = "swin"  # "swin" or "conv"
    patch_size: int = 4
    window_size: int = 4
    embed_dim: int = 32
    depths: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    num_heads: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    bottleneck_depth: int = 2
    mlp_ratio: float = 4.0
    # learned absolute position embedding on the patch grid (0 = off); resized
    # bicubically when the input grid differs. Without it the backbone is
    # nearly translation-equivariant and cannot tell the hands apart from
    # scratch; a pretrained backbone would not need it.
    pos_embed_grid: int = 32

    @property
    def n_stages(self) -> int:
        return len(self.depths)

    @property
    def size_factor(self) -> int:
        # patchify, N downsamplings inside the encoder, one more in the bottleneck
        return self.patch_size * 2 ** self.n_stages

    def stage_dims(self) -> list[int]:
        return [self.embed_dim * 2**i for i in range(self.n_stages)]

    @property
    def bottleneck_dim(self) -> int:
        return self.embed_dim * 2**self.n_stages

    def validate(self) -> None:
        if self.kind not in ("swin", "conv"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if len(self.num_heads) != self.n_stages:
            raise ValueError("num_heads must list one head count per stage")
        for dim, heads in zip(self.stage_dims(), self.num_heads):
            if dim % heads:
                raise ValueError(f"stage width {dim} not divisible by {heads} heads")
        if self.bottleneck_dim % self.num_heads[-1]:
            raise ValueError("bottleneck width not divisible by the last stage head count")
        if self.patch_size < 1 or self.window_size < 1:
            raise ValueError("patch_size and window_size must be positive")
        if self.pos_embed_grid < 0:
            raise ValueError("pos_embed_grid must be >= 0")

    def check_input(self, height: int, width: int) -> None:
        self.validate()
        if height % self.size_factor or width % self.size_factor:
            raise RasterError(
                f"input {height}x{width} incompatible with encoder: both sides must be "
                f"divisible by patch_size * 2**n_stages = {self.size_factor}"
            )


@dataclass
class FeaturePyramid:
    maps: list[torch.Tensor]  # F_0 .. F_N
    f_ehc: torch.Tensor


def trunc_normal_init(module: nn.Module) -> None:
    if isinstance(module, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def to_tokens(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 2, 3, 1)  # (B, H, W, C)


def to_map(x: torch.Tensor) -> torch.Tensor:
    return x.permute(0, 3, 1, 2).contiguous()


def window_partition(x: torch.Tensor, ws: int) -> torch.Tensor:
    B, H, W, C = x.shape
    x = x.view(B, H // ws, ws, W // ws, ws, C)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, C)


def window_reverse(windows: torch.Tensor, ws: int, H: int, W: int) -> torch.Tensor:
    B = windows.shape[0] // ((H // ws) * (W // ws))
    x = windows.view(B, H // ws, W // ws, ws, ws, -1)
    return x.permute(0, 1, 3, 2, 4, 5).reshape(B, H, W, -1)


class Mlp(nn.Module):
    def __init__(self, dim, hidden):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class WindowAttention(nn.Module):
    """Multi-head self-attention inside square windows, relative position bias."""

    def __init__(self, dim: int, window_size: int, num_heads: int):
        super().__init__()
        self.dim = dim
        self.window_size = window_size
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.relative_position_bias_table = nn.Parameter(
            torch.zeros((2 * window_size - 1) ** 2, num_heads)
        )
        coords = torch.stack(
            torch.meshgrid(torch.arange(window_size), torch.arange(window_size), indexing="ij")
        ).flatten(1)
        rel = (coords[:, :, None] - coords[:, None, :]).permute(1, 2, 0) + (window_size - 1)
        index = rel[..., 0] * (2 * window_size - 1) + rel[..., 1]
        self.register_buffer("relative_position_index", index, persistent=False)
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)
        self.keep_attention = False
        self.last_attention: torch.Tensor | None = None

    def forward(self, x: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
        Bw, N, C = x.shape
        ws = round(N**0.5)
        qkv = self.qkv(x).reshape(Bw, N, 3, self.num_heads, C // self.num_heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = (q * self.scale) @ k.transpose(-2, -1)
        index = self.relative_position_index
        if ws != self.window_size:
            # feature map smaller than the window: crop the bias to the used extent
            full = self.window_size
            index = index.view(full, full, full, full)[:ws, :ws, :ws, :ws]
        bias = self.relative_position_bias_table[index.reshape(-1)]
        attn = attn + bias.view(N, N, -1).permute(2, 0, 1).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            attn = attn.view(Bw // nw, nw, self.num_heads, N, N) + mask[None, :, None]
            attn = attn.view(Bw, self.num_heads, N, N)
        attn = attn.softmax(dim=-1)
        if self.keep_attention:
            self.last_attention = attn.detach()
        out = (attn @ v).transpose(1, 2).reshape(Bw, N, C)
        return self.proj(out)


class SwinBlock(nn.Module):
    def __init__(self, dim, num_heads, window_size, shift, mlp_ratio=4.0):
        super().__init__()
        self.window_size = window_size
        self.shift = shift
        self.norm1 = nn.LayerNorm(dim)
        self.attn = WindowAttention(dim, window_size, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, int(dim * mlp_ratio))

    @staticmethod
    @functools.lru_cache(maxsize=32)
    def _mask(Hp, Wp, ws, shift, device):
        img = torch.zeros(1, Hp, Wp, 1, device=device)
        cnt = 0
        for hs in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
            for wsl in (slice(0, -ws), slice(-ws, -shift), slice(-shift, None)):
                img[:, hs, wsl, :] = cnt
                cnt += 1
        win = window_partition(img, ws).squeeze(-1)
        mask = win[:, None, :] - win[:, :, None]
        return mask.masked_fill(mask != 0, -100.0).masked_fill(mask == 0, 0.0)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, H, W, C)
        B, H, W, C = x.shape
        ws = min(self.window_size, H, W)
        shift = self.shift if min(H, W) > self.window_size else 0
        shortcut = x
        x = self.norm1(x)
        pad_b, pad_r = (-H) % ws, (-W) % ws
        if pad_b or pad_r:
            x = F.pad(x, (0, 0, 0, pad_r, 0, pad_b))
        Hp, Wp = H + pad_b, W + pad_r
        mask = None
        if shift:
            x = torch.roll(x, (-shift, -shift), dims=(1, 2))
            mask = self._mask(Hp, Wp, ws, shift, x.device).to(x.dtype)
        attn_out = self.attn(window_partition(x, ws), mask)
        x = window_reverse(attn_out, ws, Hp, Wp)
        if shift:
            x = torch.roll(x, (shift, shift), dims=(1, 2))
        x = x[:, :H, :W, :]
        x = shortcut + x
        return x + self.mlp(self.norm2(x))


class PatchEmbed(nn.Module):
    def __init__(self, patch_size, in_ch, dim, pos_grid=0):
        super().__init__()
        self.proj = nn.Conv2d(in_ch, dim, patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(dim)
        self.pos_embed = None
        if pos_grid:
            self.pos_embed = nn.Parameter(torch.empty(1, dim, pos_grid, pos_grid))
            nn.init.trunc_normal_(self.pos_embed, std=0.02)

    def forward(self, x):
        x = self.norm(to_tokens(self.proj(x)))
        if self.pos_embed is not None:
            pos = self.pos_embed
            if pos.shape[-2:] != x.shape[1:3]:
                pos = F.interpolate(pos, size=x.shape[1:3], mode="bicubic", align_corners=False)
            x = x + to_tokens(pos)
        return x


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat then linear 4C -> 2C."""

    def __init__(self, dim):
        super().__init__()
        self.norm = nn.LayerNorm(4 * dim)
        self.reduction = nn.Linear(4 * dim, 2 * dim, bias=False)

    def forward(self, x):
        B, H, W, C = x.shape
        if H % 2 or W % 2:
            raise RasterError(f"patch merging needs even spatial dims, got {H}x{W}")
        x = torch.cat([x[:, 0::2, 0::2], x[:, 1::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 1::2]], -1)
        return self.reduction(self.norm(x))


class SwinStage(nn.Module):
    def __init__(self, dim, depth, num_heads, window_size, mlp_ratio, downsample):
        super().__init__()
        self.downsample = downsample
        self.blocks = nn.ModuleList(
            SwinBlock(dim, num_heads, window_size, 0 if i % 2 == 0 else window_size // 2, mlp_ratio)
            for i in range(depth)
        )
        self.norm = nn.LayerNorm(dim)

    def forward(self, x):
        x = self.downsample(x)
        for blk in self.blocks:
            x = blk(x)
        return x


class SwinEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig, in_ch: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = cfg.stage_dims()
        stages = []
        for i, (dim, depth, heads) in enumerate(zip(dims, cfg.depths, cfg.num_heads)):
            down = PatchEmbed(cfg.patch_size, in_ch, dim, cfg.pos_embed_grid) if i == 0 else PatchMerging(dims[i - 1])
            stages.append(SwinStage(dim, depth, heads, cfg.window_size, cfg.mlp_ratio, down))
        self.stage = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        feats = []
        x = image
        for st in self.stage:
            x = st(x)
            feats.append(to_map(st.norm(x)))
        return feats


class ConvEncoder(nn.Module):
    """Strided-convolution stand-in with the same pyramid shapes."""

    def __init__(self, cfg: EncoderConfig, in_ch: int = 3):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        dims = cfg.stage_dims()
        stages = []
        for i, dim in enumerate(dims):
            if i == 0:
                down = nn.Conv2d(in_ch, dim, cfg.patch_size, stride=cfg.patch_size)
            else:
                down = nn.Conv2d(dims[i - 1], dim, 2, stride=2)
            layers = [down, nn.GroupNorm(1, dim), nn.GELU()]
            for _ in range(cfg.depths[i]):
                layers += [nn.Conv2d(dim, dim, 3, padding=1), nn.GroupNorm(1, dim), nn.GELU()]
            stages.append(nn.Sequential(*layers))
        self.stage = nn.ModuleList(stages)

    def forward(self, image):
        feats = []
        x = image
        for st in self.stage:
            x = st(x)
            feats.append(x)
        return feats


class Bottleneck(nn.Module):
    """Patch merging followed by windowed attention blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        dim = cfg.stage_dims()[-1]
        self.merge = PatchMerging(dim)
        self.blocks = nn.ModuleList(
            SwinBlock(2 * dim, cfg.num_heads[-1], cfg.window_size,
                      0 if i % 2 == 0 else cfg.window_size // 2, cfg.mlp_ratio)
            for i in range(cfg.bottleneck_depth)
        )

    def forward(self, f_n: torch.Tensor) -> torch.Tensor:
        H, W = f_n.shape[-2:]
        if H % 2 or W % 2:
            raise RasterError(f"bottleneck input must have even spatial dims, got {H}x{W}")
        x = self.merge(to_tokens(f_n))
        for blk in self.blocks:
            x = blk(x)
        return to_map(x)


def build_encoder(cfg: EncoderConfig, in_ch: int = 3) -> nn.Module:
    cfg.validate()
    return SwinEncoder(cfg, in_ch) if cfg.kind == "swin" else ConvEncoder(cfg, in_ch)


def attention_modules(module: nn.Module) -> list[WindowAttention]:
    return [m for m in module.modules() if isinstance(m, WindowAttention)]
