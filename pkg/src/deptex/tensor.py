"""Dense float64 tensors with tape-based reverse-mode differentiation.

Every tensor gets a monotonically increasing id at creation. A node's inputs
always exist before it, so sorting reachable nodes by descending id is a valid
reverse topological order and backward visits each node exactly once.
"""
from __future__ import annotations

import contextlib
import itertools

import numpy as np

from ._backend import kernels
from .errors import ContractError, DimensionError, NumericalError, ParameterError

_ids = itertools.count()
_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad=False):
        self.data = np.array(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None
        self._id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")
        nodes = []
        seen = set()
        stack = [self]
        while stack:
            node = stack.pop()
            if node._id in seen:
                continue
            seen.add(node._id)
            nodes.append(node)
            stack.extend(p for p in node._parents if p.requires_grad)
        nodes.sort(key=lambda t: t._id, reverse=True)
        _accumulate(self, grad)
        for node in nodes:
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        return permute(self, axes)

    @property
    def T(self):
        return permute(self, (1, 0))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _node(data, parents, backward, op):
    if not np.isfinite(data).all():
        raise NumericalError(f"{op} produced non-finite values")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    out._id = next(_ids)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        _accumulate(a, _unbroadcast(g * b.data, a.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(a.data * b.data, (a, b), backward, "mul")


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _node(np.where(mask, x.data, 0.0), (x,), backward, "relu")


# ---------------------------------------------------------------- shape


def reshape(x, shape):
    shape = tuple(shape)
    try:
        data = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from exc

    def backward(g):
        _accumulate(x, g.reshape(x.shape))

    return _node(data, (x,), backward, "reshape")


def permute(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        _accumulate(x, g.transpose(inverse))

    return _node(np.ascontiguousarray(x.data.transpose(axes)), (x,), backward, "permute")


def tsum(x, axis=None):
    def backward(g):
        if axis is None:
            _accumulate(x, np.broadcast_to(g, x.shape))
        else:
            _accumulate(x, np.broadcast_to(np.expand_dims(g, axis), x.shape))

    return _node(np.asarray(x.data.sum(axis=axis)), (x,), backward, "sum")


def mean(x, axis=None):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(tsum(x, axis), 1.0 / count)


# ---------------------------------------------------------------- linear algebra


def matmul(a, b):
    """Matrix product of two 2-D tensors."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x, weight, bias=None, name="linear"):
    """``x @ weight + bias`` with ``weight`` laid out as (in, out)."""
    if x.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"{name}: input {x.shape} does not match weight {weight.shape}")
    out = x.data @ weight.data
    parents = (x, weight)
    if bias is not None:
        out = out + bias.data
        parents = (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g @ weight.data.T)
        if weight.requires_grad:
            _accumulate(weight, x.data.T @ g)
        if bias is not None:
            _accumulate(bias, g.sum(axis=0))

    return _node(out, parents, backward, name)


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation with zero padding, NCHW layout."""
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    if stride < 1 or pad < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and pad >= 0, got stride={stride} pad={pad}")
    nb, nc, h, w = x.shape
    k, kc, kh, kw = weight.shape
    if kc != nc:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, kernel {weight.shape}")
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0 or kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(f"conv2d output would be empty: input {x.shape}, kernel {weight.shape}, pad {pad}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x.data)
    cols = kernels.im2col(xp, kh, kw, stride, ho, wo)
    wm = weight.data.reshape(k, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    y = np.ascontiguousarray(out.reshape(nb, ho, wo, k).transpose(0, 3, 1, 2))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, k)
        if weight.requires_grad:
            _accumulate(weight, (gm.T @ cols).reshape(weight.shape))
        if bias is not None:
            _accumulate(bias, gm.sum(axis=0))
        if x.requires_grad:
            dxp = kernels.col2im(np.ascontiguousarray(gm @ wm), nb, nc, h + 2 * pad, w + 2 * pad, kh, kw, stride, ho, wo)
            _accumulate(x, dxp[:, :, pad : pad + h, pad : pad + w])

    return _node(y, parents, backward, "conv2d")


def max_pool2d(x, size=3, stride=2, pad=1):
    nb, nc, h, w = x.shape
    ho = (h + 2 * pad - size) // stride + 1
    wo = (w + 2 * pad - size) // stride + 1
    if ho <= 0 or wo <= 0:
        raise DimensionError(f"max_pool2d output would be empty for input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = np.lib.stride_tricks.sliding_window_view(xp, (size, size), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(nb, nc, ho, wo, size * size)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape)
        rows = (np.arange(ho) * stride)[:, None] + arg // size
        cols = (np.arange(wo) * stride)[None, :] + arg % size
        bi, ci = np.indices((nb, nc))
        np.add.at(dxp, (bi[:, :, None, None], ci[:, :, None, None], rows, cols), g)
        _accumulate(x, dxp[:, :, pad : pad + h, pad : pad + w])

    return _node(np.ascontiguousarray(out), (x,), backward, "max_pool2d")


# ---------------------------------------------------------------- normalization and pooling


def batchnorm(x, gamma, beta, running_mean=None, running_var=None, mode="train", eps=1e-5, momentum=0.1):
    """Batch normalization over the batch axis (2-D input) or batch+spatial axes (4-D input).

    ``running_mean`` / ``running_var`` are numpy buffers updated in place in
    train mode and read in eval mode.
    """
    if eps <= 0:
        raise ParameterError(f"batchnorm eps must be positive, got {eps}")
    if mode not in ("train", "eval"):
        raise ParameterError(f"batchnorm mode must be 'train' or 'eval', got {mode!r}")
    if x.ndim == 2:
        axes, bshape = (0,), (1, -1)
    elif x.ndim == 4:
        axes, bshape = (0, 2, 3), (1, -1, 1, 1)
    else:
        raise DimensionError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")
    if gamma.shape != (x.shape[1],):
        raise DimensionError(f"batchnorm: {x.shape[1]} features but gamma has shape {gamma.shape}")
    g_ = gamma.data.reshape(bshape)
    b_ = beta.data.reshape(bshape)
    if mode == "train":
        count = x.data.size // x.shape[1]
        mu = x.data.mean(axis=axes)
        xc = x.data - mu.reshape(bshape)
        var = (xc * xc).mean(axis=axes)
        inv = 1.0 / np.sqrt(var + eps)
        xhat = xc * inv.reshape(bshape)
        if running_mean is not None:
            unbiased = var * count / (count - 1) if count > 1 else var
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * unbiased

        def backward(g):
            _accumulate(gamma, (g * xhat).sum(axis=axes))
            _accumulate(beta, g.sum(axis=axes))
            if x.requires_grad:
                dxhat = g * g_
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                _accumulate(x, inv.reshape(bshape) / count * (count * dxhat - s1 - xhat * s2))

    else:
        inv = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean.reshape(bshape)) * inv.reshape(bshape)

        def backward(g):
            _accumulate(gamma, (g * xhat).sum(axis=axes))
            _accumulate(beta, g.sum(axis=axes))
            _accumulate(x, g * g_ * inv.reshape(bshape))

    return _node(xhat * g_ + b_, (x, gamma, beta), backward, "batchnorm")


def softmax(x, axis=-1):
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        _accumulate(x, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _node(y, (x,), backward, "softmax")


def global_avg_pool(x):
    """Per-channel spatial mean: B x C x H x W -> B x C."""
    if x.ndim != 4:
        raise DimensionError(f"global_avg_pool expects B x C x H x W, got {x.shape}")
    nb, nc, h, w = x.shape

    def backward(g):
        _accumulate(x, np.broadcast_to(g[:, :, None, None] / (h * w), x.shape))

    return _node(x.data.mean(axis=(2, 3)), (x,), backward, "global_avg_pool")


def l2_normalize(x, eps=1e-12):
    """Divide each row by max(||row||, eps). Zero rows stay zero."""
    if eps <= 0:
        raise ParameterError(f"l2_normalize eps must be positive, got {eps}")
    if x.ndim != 2:
        raise DimensionError(f"l2_normalize expects B x D, got {x.shape}")
    norm = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    y = x.data / denom

    def backward(g):
        proj = np.where(big, (y * g).sum(axis=1, keepdims=True), 0.0)
        _accumulate(x, (g - y * proj) / denom)

    return _node(y, (x,), backward, "l2_normalize")


def outer_product(a, b):
    """Row-wise vec(a_b outer b_b): B x I, B x J -> B x (I*J)."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"outer_product shape mismatch: {a.shape} and {b.shape}")
    nb, ni = a.shape
    nj = b.shape[1]

    def backward(g):
        g3 = g.reshape(nb, ni, nj)
        if a.requires_grad:
            _accumulate(a, np.einsum("bij,bj->bi", g3, b.data))
        if b.requires_grad:
            _accumulate(b, np.einsum("bij,bi->bj", g3, a.data))

    return _node((a.data[:, :, None] * b.data[:, None, :]).reshape(nb, ni * nj), (a, b), backward, "outer_product")


# ---------------------------------------------------------------- losses


def mse_loss(pred, target):
    """Mean of squared differences over all elements."""
    target = as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"mse_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def backward(g):
        _accumulate(pred, 2.0 * g * diff / n)
        _accumulate(target, -2.0 * g * diff / n)

    return _node(np.asarray((diff * diff).mean()), (pred, target), backward, "mse_loss")


def cross_entropy_loss(logits, labels):
    """Mean softmax cross-entropy, computed from logits through log-sum-exp."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_loss: logits {logits.shape} vs labels {labels.shape}")
    nb, k = logits.shape
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DimensionError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(nb)
    loss = (lse - z[rows, labels]).mean()

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        _accumulate(logits, g * p / nb)

    return _node(np.asarray(loss), (logits,), backward, "cross_entropy_loss")


# ---------------------------------------------------------------- verification


def grad_check(f, params, step=1e-6, max_elements=None, seed=0, floor=1e-8):
    """Largest relative error between backprop and central differences.

    ``f`` rebuilds the graph and returns a scalar tensor. With ``max_elements``
    set, each parameter contributes at most that many randomly chosen entries.
    The error denominator is never below ``floor``: one rounding step in ``f``
    moves a central difference by about eps*|f|/step, so entries much smaller
    than that cannot be resolved and deep models need a larger floor.
    """
    if step <= 0:
        raise ParameterError(f"grad_check step must be positive, got {step}")
    for p in params:
        p.grad = None
    out = f()
    if out.data.size != 1:
        raise ContractError(f"grad_check needs a scalar output, got shape {out.shape}")
    out.backward()
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    with no_grad():
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            if not np.shares_memory(flat, p.data):
                raise ContractError("grad_check needs contiguous parameter storage")
            idx = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                idx = np.sort(rng.choice(flat.size, size=max_elements, replace=False))
            af = a.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = f().item()
                flat[i] = orig - step
                fm = f().item()
                flat[i] = orig
                num = (fp - fm) / (2.0 * step)
                rel = abs(af[i] - num) / max(abs(af[i]), abs(num), floor)
                worst = max(worst, rel)
    return worst
