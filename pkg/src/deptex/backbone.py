"""Residual convolutional feature extractor and external feature ingestion."""
from dataclasses import asdict, dataclass, field

import numpy as np

from . import serialization
from . import tensor as T
from .errors import DataError, DimensionError
from .nn import BatchNorm, Conv2d, Module
from .tensor import Tensor


@dataclass
class BackboneConfig:
    """Stage widths/blocks plus the stem. ``stem_channels=0`` disables the stem."""

    widths: list = field(default_factory=lambda: [8, 16, 32, 64])
    blocks: list = field(default_factory=lambda: [1, 1, 1, 1])
    input_size: tuple = (64, 64)
    in_channels: int = 3
    stem_channels: int = None
    stem_kernel: int = 3
    stem_stride: int = 2
    stem_pool: bool = False

    def __post_init__(self):
        self.widths = list(self.widths)
        self.blocks = list(self.blocks)
        self.input_size = tuple(self.input_size)
        if self.stem_channels is None:
            self.stem_channels = self.widths[0] if self.widths else 0
        if len(self.widths) != len(self.blocks):
            raise DimensionError(f"widths {self.widths} and blocks {self.blocks} differ in length")
        if any(w < 1 for w in self.widths) or any(b < 1 for b in self.blocks):
            raise DimensionError("stage widths and block counts must be positive")

    @classmethod
    def paper(cls):
        """The 18-layer layout: 7x7/2 stem, 3x3/2 max pool, four stages of two blocks."""
        return cls(
            widths=[64, 128, 256, 512],
            blocks=[2, 2, 2, 2],
            input_size=(224, 224),
            stem_channels=64,
            stem_kernel=7,
            stem_stride=2,
            stem_pool=True,
        )

    @classmethod
    def mini(cls, input_size=(64, 64)):
        return cls(widths=[8, 16, 32, 64], blocks=[1, 1, 1, 1], input_size=input_size)

    @classmethod
    def identity(cls, channels=3, input_size=(8, 8)):
        return cls(widths=[], blocks=[], input_size=input_size, in_channels=channels, stem_channels=0)

    @property
    def out_channels(self):
        if self.widths:
            return self.widths[-1]
        return self.stem_channels or self.in_channels

    def stage_shapes(self, input_size=None):
        """(name, C, H, W) after the stem, pool and every stage, by stride arithmetic."""
        h, w = input_size or self.input_size
        shapes = []
        c = self.in_channels
        if self.stem_channels:
            k, s = self.stem_kernel, self.stem_stride
            h = (h + 2 * (k // 2) - k) // s + 1
            w = (w + 2 * (k // 2) - k) // s + 1
            c = self.stem_channels
            shapes.append(("conv1", c, h, w))
            if self.stem_pool:
                h = (h + 2 - 3) // 2 + 1
                w = (w + 2 - 3) // 2 + 1
                shapes.append(("pool1", c, h, w))
        for i, width in enumerate(self.widths):
            if i > 0:
                h = (h + 2 - 3) // 2 + 1
                w = (w + 2 - 3) // 2 + 1
            c = width
            shapes.append((f"conv{i + 2}_x", c, h, w))
        if h < 1 or w < 1:
            raise DimensionError(f"input {input_size or self.input_size} collapses to {h}x{w}")
        return shapes

    def output_shape(self, input_size=None):
        shapes = self.stage_shapes(input_size)
        if shapes:
            return shapes[-1][1:]
        h, w = input_size or self.input_size
        return (self.in_channels, h, w)

    def to_dict(self):
        return asdict(self)


class BasicBlock(Module):
    """Two 3x3 conv-BN layers with an identity or 1x1 projection skip."""

    def __init__(self, c_in, c_out, stride, rng):
        self.conv1 = Conv2d(c_in, c_out, 3, rng, stride=stride, pad=1)
        self.bn1 = BatchNorm(c_out)
        self.conv2 = Conv2d(c_out, c_out, 3, rng, stride=1, pad=1)
        self.bn2 = BatchNorm(c_out)
        if stride != 1 or c_in != c_out:
            self.proj = Conv2d(c_in, c_out, 1, rng, stride=stride)
            self.proj_bn = BatchNorm(c_out)
        else:
            self.proj = None

    def forward(self, x):
        out = T.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        skip = x if self.proj is None else self.proj_bn(self.proj(x))
        return T.relu(T.add(out, skip))


class Backbone(Module):
    def __init__(self, cfg: BackboneConfig, rng):
        self._cfg = cfg
        c = cfg.in_channels
        if cfg.stem_channels:
            self.stem = Conv2d(c, cfg.stem_channels, cfg.stem_kernel, rng, stride=cfg.stem_stride, pad=cfg.stem_kernel // 2)
            self.stem_bn = BatchNorm(cfg.stem_channels)
            c = cfg.stem_channels
        else:
            self.stem = None
        self.blocks = []
        for i, (width, count) in enumerate(zip(cfg.widths, cfg.blocks)):
            for j in range(count):
                stride = 2 if (i > 0 and j == 0) else 1
                self.blocks.append(BasicBlock(c, width, stride, rng))
                c = width

    @property
    def config(self):
        return self._cfg

    def forward(self, images, trace=None):
        """Feature maps before any global pooling.

        ``trace``, if a list, receives ``(layer name, shape)`` after the stem,
        the pool and each stage.
        """
        cfg = self._cfg
        if images.ndim != 4 or images.shape[1] != cfg.in_channels:
            raise DimensionError(f"backbone expects B x {cfg.in_channels} x H x W, got {images.shape}")
        cfg.stage_shapes(images.shape[2:])
        x = images
        if self.stem is not None:
            x = T.relu(self.stem_bn(self.stem(x)))
            if trace is not None:
                trace.append(("conv1", x.shape))
            if cfg.stem_pool:
                x = T.max_pool2d(x, 3, 2, 1)
                if trace is not None:
                    trace.append(("pool1", x.shape))
        k = 0
        for i, count in enumerate(cfg.blocks):
            for _ in range(count):
                x = self.blocks[k](x)
                k += 1
            if trace is not None:
                trace.append((f"conv{i + 2}_x", x.shape))
        return x


def forward(images, backbone: Backbone):
    return backbone(T.as_tensor(images))


def save_features(path, features):
    serialization.save(path, features.data if isinstance(features, Tensor) else features)


def load_external_features(path) -> Tensor:
    """Rank-4 TNSR feature maps, returned as a constant (non-differentiable) tensor."""
    data = serialization.load(path, expected_rank=4)
    if not np.isfinite(data).all():
        raise DataError(f"{path}: feature file contains non-finite values")
    return Tensor(data, requires_grad=False)
