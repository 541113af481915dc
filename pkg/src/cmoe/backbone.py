"""Residual convolutional backbone with attention pooling.

Stem: 7x7/2 conv -> BN -> ReLU -> 3x3/2 max pool. Four stages of two basic
blocks each on the channel plan 64-64-128-256-512; the first block of stages
2-4 downsamples with stride 2 and a 1x1 projection skip. Attention pooling
over the final feature map yields a 512-dim representation per sample
regardless of input spectrogram size.
"""

from __future__ import annotations

import numpy as np

from cmoe import nn
from cmoe.errors import ShapeError
from cmoe.tensor import Tensor, relu

MIN_INPUT = 32
REPR_DIM = 512


class BasicBlock(nn.Module):
    """y = ReLU(BN2(conv2(ReLU(BN1(conv1(x))))) + skip(x))."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, rng, stride=stride, pad=1, bias=False)
        self.bn1 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, rng, stride=1, pad=1, bias=False)
        self.bn2 = nn.BatchNorm2d(out_ch)
        if stride != 1 or in_ch != out_ch:
            self.proj = nn.Conv2d(in_ch, out_ch, 1, rng, stride=stride, pad=0, bias=False)
            self.proj_bn = nn.BatchNorm2d(out_ch)
        else:
            self.proj = None
            self.proj_bn = None

    def forward(self, x: Tensor) -> Tensor:
        h = relu(self.bn1(self.conv1(x)))
        h = self.bn2(self.conv2(h))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return relu(h + skip)


class _Stage(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, stride: int):
        super().__init__()
        self.block0 = BasicBlock(in_ch, out_ch, rng, stride=stride)
        self.block1 = BasicBlock(out_ch, out_ch, rng, stride=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.block1(self.block0(x))


class Backbone(nn.Module):
    def __init__(self, rng: np.random.Generator, attn_heads: int = 4):
        super().__init__()
        self.stem_conv = nn.Conv2d(1, 64, 7, rng, stride=2, pad=3, bias=False)
        self.stem_bn = nn.BatchNorm2d(64)
        self.stem_pool = nn.MaxPool2d(3, 2, 1)
        self.layer1 = _Stage(64, 64, rng, stride=1)
        self.layer2 = _Stage(64, 128, rng, stride=2)
        self.layer3 = _Stage(128, 256, rng, stride=2)
        self.layer4 = _Stage(256, 512, rng, stride=2)
        self.attn_pool = nn.AttentionPool(REPR_DIM, attn_heads, rng)

    def forward(self, x: Tensor, min_size: int | None = MIN_INPUT) -> Tensor:
        """[N, 1, T, Fq] -> [N, 512].

        min_size guards against spectrograms the strided stack would collapse
        to nothing; pass None to admit tiny inputs (gradient checks).
        """
        if x.ndim != 4:
            raise ShapeError(f"backbone expects a 4-D batch, got {x.ndim}-D")
        n, c, t, fq = x.shape
        if c != 1:
            raise ShapeError(f"backbone expects a single input channel, got {c}")
        if min_size is not None and (t < min_size or fq < min_size):
            raise ShapeError(f"input {t}x{fq} below the {min_size}x{min_size} minimum")
        h = self.stem_pool(relu(self.stem_bn(self.stem_conv(x))))
        h = self.layer4(self.layer3(self.layer2(self.layer1(h))))
        return self.attn_pool(h)

    def describe(self) -> dict:
        """Parameter counts per section; 'trunk' covers stem plus stages."""
        counts = {}
        for section in ("stem_conv", "stem_bn", "layer1", "layer2", "layer3", "layer4", "attn_pool"):
            mod = getattr(self, section)
            counts[section] = sum(p.size for _, p in mod.named_parameters())
        counts["trunk"] = sum(
            counts[s] for s in ("stem_conv", "stem_bn", "layer1", "layer2", "layer3", "layer4")
        )
        counts["total"] = counts["trunk"] + counts["attn_pool"]
        return counts
