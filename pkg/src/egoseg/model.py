"""Full segmentation network: shared encoder, decoder branches, HOFE, heads.

Two object configurations exist:

* decoupled (``use_cods``): ``left_obj`` and ``right_obj`` branches with
  single-channel heads predicting everything each hand touches;
* direct (basic): one ``objects`` branch with a 4-way head
  (none / left / right / two-hand).

``use_hofe`` inserts a hand-guided enhancer in front of every object head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .decoder import DecoderBranch, SegHead
from .encoder import Bottleneck, EncoderConfig, FeaturePyramid, build_encoder, trunc_normal_init
from .hofe import HandGuidedEnhancer

VARIANTS = {
    "basic": (False, False),
    "+cods": (True, False),
    "+hofe": (False, True),
    "+cods+hofe": (True, True),
}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder_depths: list[int] = field(default_factory=lambda: [1, 1, 1, 1])
    use_cods: bool = True
    use_hofe: bool = True
    hofe_norm: str = "l2"
    hofe_inner_activation: bool = False
    hofe_out_kernel: int = 3
    hofe_max_positions: int = 4096

    @classmethod
    def for_variant(cls, variant: str, **kwargs) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; choose from {list(VARIANTS)}")
        use_cods, use_hofe = VARIANTS[variant]
        return cls(use_cods=use_cods, use_hofe=use_hofe, **kwargs)

    @property
    def variant(self) -> str:
        for name, flags in VARIANTS.items():
            if flags == (self.use_cods, self.use_hofe):
                return name
        raise AssertionError("unreachable")

    @property
    def object_branches(self) -> tuple[str, ...]:
        return ("left_obj", "right_obj") if self.use_cods else ("objects",)


class EgoHOSegNet(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or ModelConfig()
        enc = cfg.encoder
        enc.validate()
        if len(cfg.decoder_depths) != enc.n_stages:
            raise ValueError("decoder_depths must list one depth per encoder stage")
        dims = enc.stage_dims()
        self.encoder = build_encoder(enc)
        self.bottleneck = Bottleneck(enc)

        def branch():
            return DecoderBranch(dims, cfg.decoder_depths, enc.num_heads, enc.window_size, enc.mlp_ratio)

        names = ("hand", *cfg.object_branches, "contact_boundary")
        self.decoder = nn.ModuleDict({name: branch() for name in names})
        out_ch = {"hand": 3, "left_obj": 1, "right_obj": 1, "objects": 4, "contact_boundary": 1}
        self.head = nn.ModuleDict(
            {name: SegHead(dims[0], out_ch[name], enc.patch_size) for name in names}
        )
        hofe_names = {"left_obj": "left", "right_obj": "right", "objects": "objects"}
        self.hofe = nn.ModuleDict(
            {
                hofe_names[name]: HandGuidedEnhancer(
                    dims[0], cfg.hofe_norm, cfg.hofe_inner_activation,
                    cfg.hofe_out_kernel, cfg.hofe_max_positions,
                )
                for name in cfg.object_branches
            }
            if cfg.use_hofe
            else {}
        )
        self.apply(trunc_normal_init)

    def encode(self, image: torch.Tensor) -> FeaturePyramid:
        self.cfg.encoder.check_input(*image.shape[-2:])
        maps = self.encoder(image)
        return FeaturePyramid(maps=maps, f_ehc=self.bottleneck(maps[-1]))

    def decode_features(self, pyramid: FeaturePyramid) -> dict[str, torch.Tensor]:
        """Per-branch ``D_{N+1}`` maps; object maps are HOFE-enhanced when enabled."""
        feats = {name: branch(pyramid) for name, branch in self.decoder.items()}
        if self.cfg.use_hofe:
            d_hand = feats["hand"]
            for name in self.cfg.object_branches:
                key = {"left_obj": "left", "right_obj": "right"}.get(name, name)
                feats[name] = self.hofe[key](d_hand, feats[name])
        return feats

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        feats = self.decode_features(self.encode(image))
        return {name: self.head[name](d) for name, d in feats.items()}


def build_model(cfg: ModelConfig | None = None, seed: int | None = None) -> EgoHOSegNet:
    if seed is not None:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            return EgoHOSegNet(cfg)
    return EgoHOSegNet(cfg)
