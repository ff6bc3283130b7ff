"""Classification heads over backbone feature maps.

``dep`` fuses the encoding branch and the pooled branch through an outer
product; ``gap`` and ``encoding`` are the single-branch baselines.
"""
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .backbone import Backbone, BackboneConfig
from .encoding import Codebook, encode_batch
from .errors import ConfigError, DimensionError
from .nn import Conv2d, Linear, Module

VARIANTS = ("dep", "gap", "encoding")


@dataclass
class HeadConfig:
    variant: str = "dep"
    codewords: int = 8
    texture_dim: int = 64
    spatial_dim: int = 64
    fc2_dim: int = 128
    enc_codewords: int = 32
    enc_channels: int = 128

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"head.variant must be one of {VARIANTS}, got {self.variant!r}")

    @classmethod
    def mini(cls, variant="dep"):
        return cls(variant=variant, codewords=8, texture_dim=16, spatial_dim=16, fc2_dim=128, enc_codewords=4, enc_channels=16)

    def to_dict(self):
        return asdict(self)


def _check_features(features, channels, layer):
    if features.ndim != 4 or features.shape[1] != channels:
        raise DimensionError(f"{layer}: expected B x {channels} x H x W features, got {features.shape}")


class DEPHead(Module):
    """Encoding and pooled branches, reduced, fused bilinearly, then fc2 -> relu -> classifier."""

    layers = ("encoding", "pool", "fc1_enc", "fc1_pool", "bilinear", "fc2", "logits")

    def __init__(self, channels, num_classes, cfg: HeadConfig, rng):
        self.codebook = Codebook(cfg.codewords, channels, rng)
        self.fc1_enc = Linear(cfg.codewords * channels, cfg.texture_dim, rng, name="fc1_enc")
        self.fc1_pool = Linear(channels, cfg.spatial_dim, rng, name="fc1_pool")
        # fc2 feeds a relu; a fan-in bound of 1/sqrt(n) starves it once the
        # fused vector is unit-normalized, so it gets the relu-gain bound instead.
        self.fc2 = Linear(cfg.texture_dim * cfg.spatial_dim, cfg.fc2_dim, rng, init="kaiming", name="fc2")
        self.classifier = Linear(cfg.fc2_dim, num_classes, rng, name="classifier")
        self._channels = channels

    def forward(self, features, capture=None):
        _check_features(features, self._channels, "encoding/pooling")
        enc = encode_batch(features, self.codebook)
        pool = T.global_avg_pool(features)
        a = self.fc1_enc(enc)
        b = self.fc1_pool(pool)
        fused = T.l2_normalize(T.outer_product(a, b))
        fc2 = self.fc2(fused)
        logits = self.classifier(T.relu(fc2))
        if capture is not None:
            capture.update(encoding=enc, pool=pool, fc1_enc=a, fc1_pool=b, bilinear=fused, fc2=fc2, logits=logits)
        return logits


class GAPHead(Module):
    layers = ("pool", "logits")

    def __init__(self, channels, num_classes, cfg: HeadConfig, rng):
        self.classifier = Linear(channels, num_classes, rng, name="classifier")
        self._channels = channels

    def forward(self, features, capture=None):
        _check_features(features, self._channels, "pooling")
        pool = T.global_avg_pool(features)
        logits = self.classifier(pool)
        if capture is not None:
            capture.update(pool=pool, logits=logits)
        return logits


class EncodingHead(Module):
    """1x1 channel reduction, residual encoding, classifier."""

    layers = ("reduce", "encoding", "logits")

    def __init__(self, channels, num_classes, cfg: HeadConfig, rng):
        self.reduce = Conv2d(channels, cfg.enc_channels, 1, rng, bias=True)
        self.codebook = Codebook(cfg.enc_codewords, cfg.enc_channels, rng)
        self.classifier = Linear(cfg.enc_codewords * cfg.enc_channels, num_classes, rng, name="classifier")
        self._channels = channels

    def forward(self, features, capture=None):
        _check_features(features, self._channels, "reduce")
        reduced = self.reduce(features)
        enc = encode_batch(reduced, self.codebook)
        logits = self.classifier(enc)
        if capture is not None:
            capture.update(reduce=reduced, encoding=enc, logits=logits)
        return logits


HEADS = {"dep": DEPHead, "gap": GAPHead, "encoding": EncodingHead}


def build_head(channels, num_classes, cfg: HeadConfig, rng):
    return HEADS[cfg.variant](channels, num_classes, cfg, rng)


def forward_dep(features, cb, head: DEPHead):
    """Logits of the fused head, using ``cb`` as its codebook."""
    if cb is not head.codebook:
        head.codebook = cb
    return head(T.as_tensor(features))


def forward_gap_only(features, head: GAPHead):
    return head(T.as_tensor(features))


def forward_encoding_only(features, cb, head: EncodingHead):
    if cb is not head.codebook:
        head.codebook = cb
    return head(T.as_tensor(features))


class Model(Module):
    """Backbone followed by one head variant."""

    def __init__(self, backbone_cfg: BackboneConfig, head_cfg: HeadConfig, num_classes, rng):
        self.backbone = Backbone(backbone_cfg, rng)
        self.head = build_head(backbone_cfg.out_channels, num_classes, head_cfg, rng)
        self._variant = head_cfg.variant
        self._num_classes = num_classes

    @property
    def variant(self):
        return self._variant

    @property
    def num_classes(self):
        return self._num_classes

    def forward(self, images, capture=None):
        return self.head(self.backbone(T.as_tensor(images)), capture=capture)

    def extract(self, images, layer):
        if layer not in self.head.layers:
            raise ConfigError(f"layer {layer!r} not available for the {self._variant} head; choose from {list(self.head.layers)}")
        capture = {}
        self.forward(images, capture=capture)
        out = capture[layer].data
        return out.reshape(out.shape[0], -1)

    def param_groups(self, head_lr_mult):
        """Backbone parameters at x1 and the newly added head at ``head_lr_mult``."""
        return [
            ("backbone", list(self.backbone.named_parameters("backbone.")), 1.0),
            ("head", list(self.head.named_parameters("head.")), float(head_lr_mult)),
        ]


def build_model(backbone_cfg, head_cfg, num_classes, seed):
    return Model(backbone_cfg, head_cfg, num_classes, np.random.default_rng(seed))
