"""Residual encoding of descriptor sets against a learnable codebook.

For descriptors x_i and codewords c_j with smoothing factors s_j::

    w_ij = softmax_j(-s_j * ||x_i - c_j||^2)
    e_j  = sum_i w_ij (x_i - c_j)

The softmax runs over codewords, so every descriptor distributes unit weight.
"""
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError
from .nn import Module
from .tensor import Tensor, _accumulate, _node


class Codebook(Module):
    """``n`` learnable codewords of dimension ``d`` plus one smoothing factor each."""

    def __init__(self, n, d, rng=None, codewords=None, smoothing=None):
        if n < 1 or d < 1:
            raise DimensionError(f"codebook needs n >= 1 and d >= 1, got n={n}, d={d}")
        if codewords is None or smoothing is None:
            rng = np.random.default_rng(0) if rng is None else rng
            bound = 1.0 / np.sqrt(n)
            codewords = rng.uniform(-bound, bound, size=(n, d)) if codewords is None else codewords
            smoothing = rng.uniform(0.0, 1.0, size=n) if smoothing is None else smoothing
        self.codewords = Tensor(codewords, requires_grad=True)
        self.smoothing = Tensor(smoothing, requires_grad=True)
        if self.codewords.shape != (n, d) or self.smoothing.shape != (n,):
            raise DimensionError(
                f"codebook arrays have shapes {self.codewords.shape}, {self.smoothing.shape}; expected ({n}, {d}), ({n},)"
            )

    @property
    def n(self):
        return self.codewords.shape[0]

    @property
    def d(self):
        return self.codewords.shape[1]

    def translated(self, t):
        return Codebook(self.n, self.d, codewords=self.codewords.data + t, smoothing=self.smoothing.data.copy())


@dataclass
class DescriptorSet:
    """``m x d`` descriptors, with the feature-map shape they came from (if any)."""

    descriptors: Tensor
    source_shape: tuple = None

    @classmethod
    def from_feature_map(cls, fmap):
        """One descriptor per spatial position of a C x H x W map."""
        fmap = np.asarray(fmap, dtype=np.float64)
        c, h, w = fmap.shape
        return cls(Tensor(fmap.reshape(c, h * w).T), (c, h, w))

    @property
    def m(self):
        return self.descriptors.shape[0]


@dataclass
class SoftAssignment:
    weights: np.ndarray
    residual_norms: np.ndarray


def _as_descriptors(X):
    if isinstance(X, DescriptorSet):
        return X.descriptors
    return T.as_tensor(X)


def _check(x, cb):
    if x.shape[-1] != cb.d:
        raise DimensionError(f"descriptor dimension {x.shape[-1]} != codebook dimension {cb.d}")


def _assign_arrays(x, c, s):
    # x: B x m x d, c: n x d, s: n
    r = x[:, :, None, :] - c[None, None, :, :]
    dist = (r * r).sum(axis=-1)
    logits = -s * dist
    logits -= logits.max(axis=-1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=-1, keepdims=True)
    return r, dist, w


def assign(X, cb):
    """Soft-assignment weights of each descriptor over the codewords."""
    x = _as_descriptors(X)
    _check(x, cb)
    _, dist, w = _assign_arrays(x.data[None], cb.codewords.data, cb.smoothing.data)
    return SoftAssignment(weights=w[0], residual_norms=dist[0])


def residual_encode(x, codewords, smoothing):
    """Batched encoding op: B x m x d descriptors -> B x n x d residual encodings."""
    if x.ndim != 3:
        raise DimensionError(f"residual_encode expects B x m x d descriptors, got {x.shape}")
    if x.shape[2] != codewords.shape[1]:
        raise DimensionError(f"descriptor dimension {x.shape[2]} != codebook dimension {codewords.shape[1]}")
    xd, c, s = x.data, codewords.data, smoothing.data
    r, dist, w = _assign_arrays(xd, c, s)
    wsum = w.sum(axis=1)  # B x n
    E = np.einsum("bmn,bmnd->bnd", w, r)

    def backward(G):
        # through r_ij directly
        dx = np.einsum("bmn,bnd->bmd", w, G)
        dc = -(wsum[:, :, None] * G).sum(axis=0)
        # through the weights
        dw = np.einsum("bmnd,bnd->bmn", r, G)
        dlogit = w * (dw - (w * dw).sum(axis=-1, keepdims=True))
        ds = -(dlogit * dist).sum(axis=(0, 1))
        dD = -s * dlogit
        dx += 2.0 * (dD.sum(axis=-1)[:, :, None] * xd - np.einsum("bmn,nd->bmd", dD, c))
        dc -= 2.0 * (np.einsum("bmn,bmd->nd", dD, xd) - dD.sum(axis=(0, 1))[:, None] * c)
        _accumulate(x, dx)
        _accumulate(codewords, dc)
        _accumulate(smoothing, ds)

    return _node(E, (x, codewords, smoothing), backward, "residual_encode")


def encode(X, cb):
    """Residual encodings ``n x d`` of one descriptor set (not normalized)."""
    x = _as_descriptors(X)
    _check(x, cb)
    if x.ndim != 2:
        raise DimensionError(f"encode expects m x d descriptors, got {x.shape}")
    E = residual_encode(T.reshape(x, (1,) + x.shape), cb.codewords, cb.smoothing)
    return T.reshape(E, E.shape[1:])


def encode_batch(F, cb, eps=1e-12):
    """B x C x H x W feature maps -> B x (n*C) L2-normalized encodings."""
    F = T.as_tensor(F)
    if F.ndim != 4:
        raise DimensionError(f"encode_batch expects B x C x H x W, got {F.shape}")
    nb, c, h, w = F.shape
    if c != cb.d:
        raise DimensionError(f"feature channels {c} != codebook dimension {cb.d}")
    X = T.reshape(T.permute(F, (0, 2, 3, 1)), (nb, h * w, c))
    E = residual_encode(X, cb.codewords, cb.smoothing)
    return T.l2_normalize(T.reshape(E, (nb, cb.n * c)), eps=eps)
