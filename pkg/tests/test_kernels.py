"""The compiled kernels and the numpy fallback must agree to rounding."""
import os
import subprocess
import sys

import numpy as np
import pytest

from deptex import _kernels_py
from deptex._backend import BACKEND, compiled

fast = compiled()
needs_ext = pytest.mark.skipif(fast is None, reason="compiled extension not built")


def test_default_backend_prefers_compiled():
    assert BACKEND == ("cython" if fast is not None else "python")


def test_env_var_forces_fallback():
    env = dict(os.environ, DEPTEX_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from deptex._backend import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


@needs_ext
@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 0, 1), (2, 3, 7)])
def test_im2col_col2im_agree(stride, pad, k, rng):
    x = rng.normal(size=(3, 4, 11, 9))
    xp = np.ascontiguousarray(np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))))
    hp, wp = xp.shape[2:]
    ho, wo = (hp - k) // stride + 1, (wp - k) // stride + 1
    a = _kernels_py.im2col(xp, k, k, stride, ho, wo)
    b = fast.im2col(xp, k, k, stride, ho, wo)
    np.testing.assert_array_equal(a, np.asarray(b))
    cols = rng.normal(size=a.shape)
    a = _kernels_py.col2im(cols, 3, 4, hp, wp, k, k, stride, ho, wo)
    b = fast.col2im(cols, 3, 4, hp, wp, k, k, stride, ho, wo)
    assert np.abs(a - np.asarray(b)).max() < 1e-12


def test_col2im_is_adjoint_of_im2col(rng):
    xp = rng.normal(size=(2, 3, 7, 8))
    ho, wo = 3, 3
    cols = rng.normal(size=(2 * ho * wo, 3 * 9))
    lhs = (_kernels_py.im2col(xp, 3, 3, 2, ho, wo) * cols).sum()
    rhs = (xp * _kernels_py.col2im(cols, 2, 3, 7, 8, 3, 3, 2, ho, wo)).sum()
    assert abs(lhs - rhs) < 1e-10


def _d2(rng, n=60):
    pts = rng.normal(size=(n, 5))
    d2 = ((pts[:, None] - pts[None]) ** 2).sum(-1)
    np.fill_diagonal(d2, 0.0)
    return d2


@needs_ext
def test_perplexity_search_agrees(rng):
    d2 = _d2(rng)
    Pa, ba = _kernels_py.perplexity_search(d2, 10.0, 1e-5, 50)
    Pb, bb = fast.perplexity_search(d2, 10.0, 1e-5, 50)
    assert np.abs(Pa - np.asarray(Pb)).max() < 1e-12
    assert np.allclose(ba, np.asarray(bb), rtol=1e-10)


@needs_ext
def test_tsne_grad_agrees(rng):
    P = rng.uniform(size=(40, 40))
    P = P + P.T
    np.fill_diagonal(P, 0.0)
    P /= P.sum()
    Y = rng.normal(size=(40, 2))
    ga, ka = _kernels_py.tsne_grad(P, Y)
    gb, kb = fast.tsne_grad(P, Y)
    assert np.abs(ga - np.asarray(gb)).max() < 1e-12
    assert abs(ka - kb) < 1e-12
