"""Fixed random multi-scale feature extractor.

A small strided conv stack with frozen, seeded random weights. It serves two
jobs that must share one embedding space: the perceptual reconstruction loss
and the feature statistics behind the Frechet distance. Random fixed
projections preserve the multi-scale comparison structure without depending
on any pretrained backbone.
"""

from __future__ import annotations

from functools import lru_cache

import torch
from torch import nn

FEATURE_CHANNELS = (16, 32, 64, 80)
EMBED_DIM = sum(FEATURE_CHANNELS)  # 192


class FeatureExtractor(nn.Module):
    """Four stride-2 conv stages; frozen after seeded init."""

    def __init__(self, in_channels: int = 3, seed: int = 0):
        super().__init__()
        stages = []
        ch_in = in_channels
        for ch in FEATURE_CHANNELS:
            stages.append(nn.Sequential(
                nn.Conv2d(ch_in, ch, 3, stride=2, padding=1),
                nn.LeakyReLU(0.2, inplace=True)))
            ch_in = ch
        self.stages = nn.ModuleList(stages)

        gen = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            for stage in self.stages:
                conv = stage[0]
                conv.weight.normal_(0.0, 0.2, generator=gen)
                conv.bias.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def features(self, x: torch.Tensor) -> list[torch.Tensor]:
        """Feature maps at every scale, coarse last."""
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return feats

    def embed(self, x: torch.Tensor) -> torch.Tensor:
        """Global-average-pooled features of all scales, shape (N, 192)."""
        pooled = [f.mean(dim=(2, 3)) for f in self.features(x)]
        return torch.cat(pooled, dim=1)


@lru_cache(maxsize=4)
def default_feature_extractor(in_channels: int = 3,
                              seed: int = 0) -> FeatureExtractor:
    return FeatureExtractor(in_channels=in_channels, seed=seed)
