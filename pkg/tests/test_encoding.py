import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from oracles import assign_loops, encode_batch_loops, encode_loops

from deptex import tensor as T
from deptex.encoding import Codebook, DescriptorSet, assign, encode, encode_batch
from deptex.errors import DimensionError
from deptex.tensor import Tensor, grad_check


def book(rng, n, d, s_scale=1.0):
    return Codebook(n, d, codewords=rng.normal(size=(n, d)), smoothing=rng.uniform(0.1, 1.0, size=n) * s_scale)


def test_assign_equidistant_gives_half():
    cb = Codebook(2, 2, codewords=np.array([[1.0, 0], [-1.0, 0]]), smoothing=np.array([0.7, 0.7]))
    np.testing.assert_allclose(assign(np.array([[0.0, 3.0]]), cb).weights, [[0.5, 0.5]], atol=1e-15)


def test_assign_sharpens_monotonically_in_s(rng):
    c = rng.normal(size=(3, 2))
    x = c[1:2].copy()
    ws = [assign(x, Codebook(3, 2, codewords=c, smoothing=np.full(3, s))).weights[0, 1] for s in [0.1, 0.5, 1.0, 2.0]]
    assert all(a < b for a, b in zip(ws, ws[1:]))
    assert assign(x, Codebook(3, 2, codewords=c, smoothing=np.full(3, 1e3))).weights[0, 1] > 1 - 1e-12


def test_assign_matches_double_loop(rng):
    cb = book(rng, 3, 2)
    x = rng.normal(size=(4, 2))
    w = assign(x, cb).weights
    assert np.abs(w - assign_loops(x, cb.codewords.data, cb.smoothing.data)).max() < 1e-12
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12 and (w > 0).all()


def test_assign_large_smoothing_is_stable(rng):
    cb = book(rng, 4, 3, s_scale=1e4)
    w = assign(rng.normal(size=(5, 3)) * 10, cb).weights
    assert np.isfinite(w).all() and np.abs(w.sum(axis=1) - 1).max() < 1e-12


def test_encode_zero_residual_row(rng):
    cb = book(rng, 3, 4)
    x = np.repeat(cb.codewords.data[1:2], 5, axis=0)
    E = encode(x, cb).data
    np.testing.assert_array_equal(E[1], 0.0)


def test_encode_single_descriptor(rng):
    cb = book(rng, 3, 4)
    x = rng.normal(size=(1, 4))
    w = assign(x, cb).weights[0]
    np.testing.assert_allclose(encode(x, cb).data, w[:, None] * (x - cb.codewords.data), atol=1e-14)


def test_encode_matches_double_loop(rng):
    cb = book(rng, 4, 5)
    x = rng.normal(size=(8, 5))
    assert np.abs(encode(x, cb).data - encode_loops(x, cb.codewords.data, cb.smoothing.data)).max() < 1e-12


def test_encode_batch_dims_and_oracle(rng):
    cb = book(rng, 2, 3)
    F = rng.normal(size=(2, 3, 4, 4))
    out = encode_batch(Tensor(F), cb).data
    assert out.shape == (2, 6)
    assert np.abs(out - encode_batch_loops(F, cb.codewords.data, cb.smoothing.data)).max() < 1e-12
    assert encode_batch(Tensor(np.zeros((1, 512, 2, 2))), Codebook(8, 512, np.random.default_rng(0))).shape == (1, 4096)


def test_encode_batch_single_position_reduces_to_encode(rng):
    cb = book(rng, 3, 4)
    F = rng.normal(size=(1, 4, 1, 1))
    e = encode(F[0, :, 0, 0][None], cb).data.reshape(-1)
    np.testing.assert_allclose(encode_batch(Tensor(F), cb).data[0], e / np.linalg.norm(e), atol=1e-14)


def test_dimension_errors(rng):
    cb = book(rng, 3, 4)
    with pytest.raises(DimensionError):
        assign(rng.normal(size=(2, 5)), cb)
    with pytest.raises(DimensionError):
        encode_batch(Tensor(rng.normal(size=(1, 5, 2, 2))), cb)
    with pytest.raises(DimensionError):
        Codebook(0, 3)


def test_descriptor_set_from_feature_map(rng):
    fmap = rng.normal(size=(3, 2, 4))
    ds = DescriptorSet.from_feature_map(fmap)
    assert ds.m == 8 and ds.source_shape == (3, 2, 4)
    np.testing.assert_array_equal(ds.descriptors.data[5], fmap[:, 1, 1])


def test_codebook_init_ranges():
    cb = Codebook(16, 10, np.random.default_rng(0))
    assert np.abs(cb.codewords.data).max() <= 0.25
    assert (cb.smoothing.data >= 0).all() and (cb.smoothing.data <= 1).all()


def test_encode_gradients_all_groups(rng):
    cb = book(rng, 3, 4)
    x = Tensor(rng.normal(size=(6, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(3, 4)))
    assert grad_check(lambda: (encode(x, cb) * w).sum(), [x, cb.codewords, cb.smoothing]) < 1e-5


def test_encode_batch_gradients(rng):
    cb = book(rng, 2, 3)
    F = Tensor(rng.normal(size=(2, 3, 3, 2)), requires_grad=True)
    w = Tensor(rng.normal(size=(2, 6)))
    assert grad_check(lambda: (encode_batch(F, cb) * w).sum(), [F, cb.codewords, cb.smoothing]) < 1e-5


# ---------------------------------------------------------------- properties


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 10), n=st.integers(1, 5), d=st.integers(1, 4))
def test_orderless_under_descriptor_permutation(seed, m, n, d):
    rng = np.random.default_rng(seed)
    cb = book(rng, n, d)
    x = rng.normal(size=(m, d))
    perm = rng.permutation(m)
    assert np.abs(encode(x, cb).data - encode(x[perm], cb).data).max() < 1e-12


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 8), n=st.integers(1, 5), d=st.integers(1, 4))
def test_translation_equivariance(seed, m, n, d):
    rng = np.random.default_rng(seed)
    cb = book(rng, n, d)
    x = rng.normal(size=(m, d))
    t = rng.normal(size=d)
    assert np.abs(encode(x + t, cb.translated(t)).data - encode(x, cb).data).max() < 1e-12


@given(seed=st.integers(0, 2**32 - 1), m=st.integers(1, 8), n=st.integers(1, 6), d=st.integers(1, 4))
def test_rows_bounded_by_total_residual(seed, m, n, d):
    rng = np.random.default_rng(seed)
    cb = book(rng, n, d)
    x = rng.normal(size=(m, d))
    E = encode(x, cb).data
    w = assign(x, cb).weights
    r = np.linalg.norm(x[:, None] - cb.codewords.data[None], axis=2)
    # a row is a weighted residual sum with weights in (0, 1)
    assert (np.linalg.norm(E, axis=1) <= (w * r).sum(axis=0) + 1e-12).all()
    assert (np.linalg.norm(E, axis=1) <= m * r.max(axis=0) + 1e-12).all()


@given(seed=st.integers(0, 2**32 - 1))
def test_assignment_rows_stochastic(seed):
    rng = np.random.default_rng(seed)
    # logit gaps stay well inside the float64 exponent range, so no weight underflows
    cb = Codebook(5, 3, codewords=rng.normal(size=(5, 3)) * 2, smoothing=rng.normal(size=5) * 2)
    w = assign(rng.normal(size=(7, 3)) * 2, cb).weights
    assert np.abs(w.sum(axis=1) - 1).max() < 1e-12 and (w > 0).all()


def test_encoding_output_through_reshape_is_row_major(rng):
    cb = book(rng, 2, 3)
    F = rng.normal(size=(1, 3, 2, 2))
    E = encode(F[0].reshape(3, 4).T, cb).data
    raw = T.reshape(Tensor(E), (1, 6)).data[0]
    np.testing.assert_allclose(encode_batch(Tensor(F), cb).data[0], raw / np.linalg.norm(raw), atol=1e-14)
