"""Hand-guided object feature enhancer.

Queries come from the hand branch, keys and values from an object branch.
The attended object features pass through an output convolution, the hand
features are added back, and the result is added onto the object features::

    Q = conv(conv(ln(d_hand)))          K, V = conv(conv(ln(d_obj)))
    A = softmax(norm(Q)^T norm(K))      rows: hand positions, cols: object positions
    out = d_obj + (conv_out(V A^T) + d_hand)
"""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

NORM_MODES = ("l2", "none")


class HandGuidedEnhancer(nn.Module):
    def __init__(
        self,
        dim: int,
        norm: str = "l2",
        inner_activation: bool = False,
        out_kernel: int = 3,
        max_positions: int = 4096,
    ):
        super().__init__()
        if norm not in NORM_MODES:
            raise ValueError(f"norm must be one of {NORM_MODES}, got {norm!r}")
        self.dim = dim
        self.norm = norm
        self.max_positions = max_positions
        self.ln_hand = nn.LayerNorm(dim)
        self.ln_obj = nn.LayerNorm(dim)
        # 1x1 convolutions, applied in token layout as linear maps
        self.q_conv1 = nn.Linear(dim, dim)
        self.q_conv2 = nn.Linear(dim, dim)
        self.kv_conv1 = nn.Linear(dim, dim)
        self.kv_conv2 = nn.Linear(dim, 2 * dim)
        self.act = nn.GELU() if inner_activation else nn.Identity()
        self.out_conv = nn.Conv2d(dim, dim, out_kernel, padding=out_kernel // 2)
        if norm == "l2":
            self.temperature = nn.Parameter(torch.ones(1))

    def _check(self, d_hand, d_obj):
        if d_hand.shape != d_obj.shape:
            raise ValueError(f"hand/object feature shapes differ: {tuple(d_hand.shape)} vs {tuple(d_obj.shape)}")
        if d_hand.ndim != 4 or d_hand.shape[1] != self.dim:
            raise ValueError(f"expected (B, {self.dim}, H, W) features, got {tuple(d_hand.shape)}")
        n = d_hand.shape[2] * d_hand.shape[3]
        if n > self.max_positions:
            raise ValueError(
                f"dense hand-object attention over {n} positions exceeds the cap of "
                f"{self.max_positions}; pool the decoder features first or raise max_positions"
            )

    @staticmethod
    def _raise_non_finite(stages: dict[str, torch.Tensor]) -> None:
        for name, x in stages.items():
            if not torch.isfinite(x).all():
                raise FloatingPointError(f"HOFE: non-finite activations after {name}")

    def project(self, d_hand, d_obj):
        """Query, key and value as (B, H*W, C) token tensors."""
        hand = d_hand.flatten(2).transpose(1, 2)
        obj = d_obj.flatten(2).transpose(1, 2)
        q = self.q_conv2(self.act(self.q_conv1(self.ln_hand(hand))))
        k, v = self.kv_conv2(self.act(self.kv_conv1(self.ln_obj(obj)))).chunk(2, dim=-1)
        return q, k, v

    def scores(self, q, k):
        if self.norm == "l2":
            s = F.normalize(q, dim=-1) @ F.normalize(k, dim=-1).transpose(1, 2)
            return s * self.temperature
        return (q @ k.transpose(1, 2)) / math.sqrt(self.dim)

    def attention_map(self, d_hand: torch.Tensor, d_obj: torch.Tensor) -> torch.Tensor:
        """Row-stochastic (B, HW_hand, HW_obj) attention matrix."""
        self._check(d_hand, d_obj)
        q, k, v = self.project(d_hand, d_obj)
        attn = self.scores(q, k).softmax(dim=-1)
        if attn.device.type != "meta" and not torch.isfinite(attn).all():
            self._raise_non_finite({"query": q, "key": k, "softmax": attn})
        return attn

    def forward(self, d_hand: torch.Tensor, d_obj: torch.Tensor, return_attention: bool = False):
        self._check(d_hand, d_obj)
        q, k, v = self.project(d_hand, d_obj)
        attn = self.scores(q, k).softmax(dim=-1)
        B, C, H, W = d_obj.shape
        attended = (attn @ v).transpose(1, 2).reshape(B, C, H, W)
        f_o = self.out_conv(attended)
        out = d_obj + (f_o + d_hand)
        # one check on the result; walk the intermediates only to name the culprit
        if out.device.type != "meta" and not torch.isfinite(out).all():
            self._raise_non_finite(
                {"query": q, "key": k, "value": v, "softmax": attn, "output conv": f_o, "fusion": out}
            )
        return (out, attn) if return_attention else out

