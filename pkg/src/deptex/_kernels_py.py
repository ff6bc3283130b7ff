"""Pure numpy implementations of the hot kernels.

Same signatures and semantics as the compiled ``_kernels`` extension. Results
agree with it to rounding, not bitwise: summation order differs.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

NAME = "python"


def im2col(xp, kh, kw, stride, ho, wo):
    """Unfold a padded ``B x C x H x W`` array into ``(B*ho*wo, C*kh*kw)`` rows."""
    b, c = xp.shape[:2]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(b * ho * wo, c * kh * kw)


def col2im(cols, b, c, hp, wp, kh, kw, stride, ho, wo):
    """Adjoint of :func:`im2col`: scatter-add rows back into a padded image."""
    out = np.zeros((b, c, hp, wp))
    g = cols.reshape(b, ho, wo, c, kh, kw)
    for p in range(kh):
        for q in range(kw):
            out[:, :, p : p + stride * (ho - 1) + 1 : stride, q : q + stride * (wo - 1) + 1 : stride] += (
                g[:, :, :, :, p, q].transpose(0, 3, 1, 2)
            )
    return out


def _row_entropy(d, beta):
    w = np.exp(-beta * d)
    z = w.sum()
    h = np.log(z) + beta * (w * d).sum() / z
    return h, w / z


def perplexity_search(d2, perplexity, tol, max_iter):
    """Per-row bisection on log-precision so that exp(H(P_i)) hits ``perplexity``.

    Returns the conditional matrix (zero diagonal, rows summing to one) and the
    per-row precisions ``beta = 1 / (2 sigma^2)``.
    """
    n = d2.shape[0]
    target = np.log(perplexity)
    P = np.zeros((n, n))
    betas = np.empty(n)
    mask = ~np.eye(n, dtype=bool)
    for i in range(n):
        d = d2[i][mask[i]]
        d = d - d.min()
        mean = d.mean()
        t = -np.log(mean) if mean > 0 else 0.0
        lo, hi = -np.inf, np.inf
        h, p = _row_entropy(d, np.exp(t))
        for _ in range(max_iter):
            if abs(np.exp(h) - perplexity) <= tol * perplexity:
                break
            if h > target:
                lo = t
                t = t + 2.0 if hi == np.inf else 0.5 * (lo + hi)
            else:
                hi = t
                t = t - 2.0 if lo == -np.inf else 0.5 * (lo + hi)
            h, p = _row_entropy(d, np.exp(t))
        P[i, mask[i]] = p
        betas[i] = np.exp(t)
    return P, betas


def tsne_grad(P, Y):
    """Exact KL(P || Q) and its gradient for Student-t affinities in the embedding."""
    diff = Y[:, None, :] - Y[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    num = 1.0 / (1.0 + d2)
    np.fill_diagonal(num, 0.0)
    z = num.sum()
    Q = num / z
    off = ~np.eye(P.shape[0], dtype=bool)
    p = P[off]
    kl = float((p * np.log(p / Q[off])).sum())
    W = (P - Q) * num
    grad = 4.0 * (W.sum(axis=1)[:, None] * Y - W @ Y)
    return grad, kl
