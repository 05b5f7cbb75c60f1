import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from oracles import conv2d as conv_oracle, rel
from sparsenn.errors import FormatError, ShapeError, UnsupportedError
from sparsenn.tensor import (
    Layout, SparseMatrixCSR, Tensor, csr_from_dense, csr_to_dense, im2col, pad_to_alignment, transform_layout,
)

finite32 = st.floats(-100, 100, width=32, allow_nan=False)


def sparse_matrices(max_side=8):
    shapes = st.tuples(st.integers(0, max_side), st.integers(0, max_side))
    return shapes.flatmap(lambda s: hnp.arrays(np.float32, s, elements=st.one_of(st.just(0.0), finite32)))


# -- CSR -----------------------------------------------------------------

def test_csr_from_dense_diagonal():
    s = csr_from_dense(np.array([[1, 0], [0, 2]], np.float32))
    assert s.values.tolist() == [1, 2]
    assert s.col_idx.tolist() == [0, 1]
    assert s.row_ptr.tolist() == [0, 1, 2]


def test_csr_from_dense_all_zero():
    s = csr_from_dense(np.zeros((2, 2), np.float32))
    assert s.values.size == 0 and s.row_ptr.tolist() == [0, 0, 0]


def test_csr_to_dense_single_entry():
    s = SparseMatrixCSR(1, 2, [5.0], [1], [0, 1])
    assert csr_to_dense(s).data.tolist() == [[0, 5]]


def test_csr_to_dense_empty():
    s = SparseMatrixCSR(3, 3, [], [], [0, 0, 0, 0])
    assert not csr_to_dense(s).data.any()


def test_csr_round_trip_half_sparse(rng):
    m = rng.standard_normal((8, 8)).astype(np.float32)
    m[rng.random((8, 8)) < 0.5] = 0
    back = csr_to_dense(csr_from_dense(m)).data
    assert back.tobytes() == m.tobytes()
    # naive scan oracle: row by row, left to right
    vals = [m[i, j] for i in range(8) for j in range(8) if m[i, j] != 0]
    assert csr_from_dense(m).values.tolist() == vals


@given(sparse_matrices())
def test_csr_round_trip_property(m):
    s = csr_from_dense(m)
    assert np.array_equal(csr_to_dense(s).data, m)
    assert s.nnz == np.count_nonzero(m)


@pytest.mark.parametrize("values,col_idx,row_ptr", [
    ([1.0, 2.0], [1, 0], [0, 2]),        # columns not increasing
    ([1.0, 2.0], [0, 0], [0, 2]),        # duplicate column
    ([1.0], [0], [0, 2]),                # row_ptr end disagrees
    ([0.0], [0], [0, 1]),                # explicit zero
    ([1.0], [5], [0, 1]),                # column out of range
    ([1.0], [0], [1, 1]),                # row_ptr must start at 0
])
def test_csr_rejects_malformed(values, col_idx, row_ptr):
    with pytest.raises(FormatError):
        SparseMatrixCSR(1, 2, values, col_idx, row_ptr)


def test_csr_arrays_are_read_only():
    s = csr_from_dense(np.eye(3, dtype=np.float32))
    with pytest.raises(ValueError):
        s.values[0] = 2


# -- padding and layout --------------------------------------------------------

def test_pad_channels_to_alignment(rng):
    t = Tensor(rng.standard_normal((1, 3, 5, 5)), Layout.NCHW)
    p = pad_to_alignment(t, 4, axis=1)
    assert p.dims == (1, 4, 5, 5)
    assert p.logical_dims == (1, 3, 5, 5)
    assert not p.data[:, 3].any()
    assert np.array_equal(p.logical(), t.data)


def test_pad_already_aligned_is_identity(rng):
    t = Tensor(rng.standard_normal((1, 4, 5, 5)), Layout.NCHW)
    assert pad_to_alignment(t, 4, axis=1) is t


def test_conv_over_padded_channels_is_unchanged(rng):
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), Layout.NCHW)
    w = rng.standard_normal((5, 3, 3, 3))
    xp = pad_to_alignment(x, 4, axis=1)
    wp = np.concatenate([w, np.zeros((5, 1, 3, 3))], axis=1)
    assert rel(conv_oracle(xp.data, wp, padding=1), conv_oracle(x.data, w, padding=1)) < 1e-12


def test_tensor_rejects_nonzero_padding():
    data = np.ones((1, 4, 2, 2), np.float32)
    with pytest.raises(FormatError):
        Tensor(data, Layout.NCHW, (1, 3, 2, 2))


def test_tensor_rank_checked():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 2)), Layout.NCHW)


def test_nchw_to_nhwc_small():
    t = Tensor(np.array([1.0, 2.0]).reshape(1, 2, 1, 1), Layout.NCHW)
    u = transform_layout(t, Layout.NHWC)
    assert u.dims == (1, 1, 1, 2)
    assert u.data[0, 0, 0].tolist() == [1.0, 2.0]


def test_same_layout_is_identity(rng):
    t = Tensor(rng.standard_normal((1, 2, 3, 3)), Layout.NCHW)
    assert transform_layout(t, Layout.NCHW) == t


def test_layout_index_map(rng):
    a = rng.standard_normal((2, 3, 4, 5)).astype(np.float32)
    u = transform_layout(Tensor(a, Layout.NCHW), Layout.NHWC)
    for n, c, h, w in [(0, 0, 0, 0), (1, 2, 3, 4), (1, 0, 2, 1)]:
        assert u.data[n, h, w, c] == a[n, c, h, w]


@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=4, max_dims=4, max_side=5), elements=finite32))
def test_layout_round_trip(a):
    t = Tensor(a, Layout.NCHW)
    assert transform_layout(transform_layout(t, Layout.NHWC), Layout.NCHW) == t


def test_layout_to_row_major_unsupported():
    with pytest.raises(UnsupportedError):
        transform_layout(Tensor(np.zeros((1, 1, 1, 1)), Layout.NCHW), Layout.ROW_MAJOR_2D)


# -- im2col ------------------------------------------------------------------

def test_im2col_pointwise_is_reshape(rng):
    x = rng.standard_normal((1, 4, 3, 5)).astype(np.float32)
    cols = im2col(x, 1, 1)
    assert np.array_equal(cols.data, x.reshape(4, 15))


def test_im2col_full_kernel_single_column(rng):
    x = rng.standard_normal((1, 2, 3, 3)).astype(np.float32)
    cols = im2col(x, 3, 3)
    assert cols.dims == (18, 1)
    assert np.array_equal(cols.data[:, 0], x.reshape(-1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 2), st.integers(1, 4), st.integers(1, 5), st.integers(3, 9), st.integers(1, 3),
       st.integers(1, 3), st.integers(0, 2), st.integers(0, 2**31 - 1))
def test_gemm_over_im2col_matches_direct_conv(n, c, k, hw, kernel, stride, pad, seed):
    kernel = min(kernel, hw + 2 * pad)
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, hw, hw)).astype(np.float32)
    w = r.standard_normal((k, c, kernel, kernel)).astype(np.float32)
    cols = im2col(x, kernel, kernel, stride, pad).data.astype(np.float64)
    y = w.reshape(k, -1).astype(np.float64) @ cols
    ref = conv_oracle(x, w, stride=stride, padding=pad)
    y = y.reshape(k, n, *ref.shape[2:]).transpose(1, 0, 2, 3)
    assert rel(y, ref) < 1e-12


def test_im2col_rejects_oversized_kernel():
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 1, 2, 2), np.float32), 3, 3)
