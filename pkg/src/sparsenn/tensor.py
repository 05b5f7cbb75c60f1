"""Dense and compressed-sparse tensor containers plus layout helpers.

Every container stores 32-bit reals. Arrays handed to a container are
copied (or viewed) read-only, so instances can be shared freely.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
import numpy as np

from sparsenn.errors import FormatError, ParameterError, ShapeError, UnsupportedError

FLOAT = np.float32


class Layout(enum.IntEnum):
    NCHW = 0
    NHWC = 1
    ROW_MAJOR_2D = 2


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    arr = np.ascontiguousarray(a, dtype=dtype)
    view = arr.view()
    view.flags.writeable = False
    return view


@dataclass(frozen=True, eq=False)
class Tensor:
    """Dense array with an explicit memory layout.

    ``data`` is shaped by the physical ``dims``; ``logical_dims`` records the
    extents before alignment padding. Cells outside the logical region are
    zero.
    """

    data: np.ndarray
    layout: Layout
    logical_dims: tuple[int, ...] = ()

    def __post_init__(self):
        data = _frozen(self.data, FLOAT)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "layout", Layout(self.layout))
        if self.layout == Layout.ROW_MAJOR_2D and data.ndim != 2:
            raise ShapeError(f"RowMajor2D tensor needs 2 dims, got {data.shape}")
        if self.layout in (Layout.NCHW, Layout.NHWC) and data.ndim != 4:
            raise ShapeError(f"{self.layout.name} tensor needs 4 dims, got {data.shape}")
        logical = tuple(int(d) for d in self.logical_dims) or tuple(data.shape)
        if len(logical) != data.ndim or any(l > d or l < 0 for l, d in zip(logical, data.shape)):
            raise ShapeError(f"logical dims {logical} incompatible with dims {data.shape}")
        object.__setattr__(self, "logical_dims", logical)
        if logical != data.shape:
            inner = data[tuple(slice(0, l) for l in logical)]
            if np.count_nonzero(data) != np.count_nonzero(inner):
                raise FormatError("padded region of tensor is not zero")

    @classmethod
    def from_array(cls, a, layout: Layout | None = None) -> "Tensor":
        a = np.asarray(a)
        if layout is None:
            if a.ndim == 4:
                layout = Layout.NCHW
            elif a.ndim == 2:
                layout = Layout.ROW_MAJOR_2D
            else:
                raise ShapeError(f"cannot infer a layout for rank {a.ndim}")
        return cls(a, layout)

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def logical(self) -> np.ndarray:
        """View restricted to the logical (unpadded) region."""
        return self.data[tuple(slice(0, l) for l in self.logical_dims)]

    def __eq__(self, other):
        if not isinstance(other, Tensor):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.logical_dims == other.logical_dims
            and self.dims == other.dims
            and self.data.tobytes() == other.data.tobytes()
        )

    __hash__ = None  # type: ignore[assignment]


@dataclass(frozen=True, eq=False)
class TilePacking:
    """Permutation grouping CSR entries by (row-tile, col-tile) block.

    ``order[group_ptr[g]:group_ptr[g + 1]]`` are the value indices of group
    ``g``; groups are sorted by row tile, then column tile, and entries
    inside a group keep row-major order. Groups of row tile ``t`` are
    ``rowtile_ptr[t]:rowtile_ptr[t + 1]`` (empty row tiles are skipped).
    ``rows``/``cols``/``values`` are the entries gathered in packed order.
    """

    tile_rows: int
    tile_cols: int
    order: np.ndarray
    group_ptr: np.ndarray
    group_row_tile: np.ndarray
    rowtile_ptr: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    values: np.ndarray

    def groups(self) -> list[np.ndarray]:
        return [self.order[self.group_ptr[g]:self.group_ptr[g + 1]] for g in range(len(self.group_ptr) - 1)]


@dataclass(frozen=True, eq=False)
class SparseMatrixCSR:
    rows: int
    cols: int
    values: np.ndarray
    col_idx: np.ndarray
    row_ptr: np.ndarray
    pack: TilePacking | None = field(default=None)

    def __post_init__(self):
        object.__setattr__(self, "rows", int(self.rows))
        object.__setattr__(self, "cols", int(self.cols))
        object.__setattr__(self, "values", _frozen(self.values, FLOAT))
        object.__setattr__(self, "col_idx", _frozen(self.col_idx, np.int32))
        object.__setattr__(self, "row_ptr", _frozen(self.row_ptr, np.int64))
        self.validate()

    def validate(self) -> None:
        rp, ci, v = self.row_ptr, self.col_idx, self.values
        if self.rows < 0 or self.cols < 0:
            raise FormatError("negative CSR extent")
        if rp.ndim != 1 or rp.shape[0] != self.rows + 1:
            raise FormatError(f"row_ptr must have length rows+1={self.rows + 1}")
        if rp[0] != 0:
            raise FormatError("row_ptr[0] must be 0")
        if np.any(np.diff(rp) < 0):
            raise FormatError("row_ptr must be nondecreasing")
        if not (rp[-1] == v.shape[0] == ci.shape[0]):
            raise FormatError("row_ptr[-1], len(values) and len(col_idx) disagree")
        if ci.size:
            if ci.min() < 0 or ci.max() >= self.cols:
                raise FormatError("column index out of range")
            # strictly increasing inside each row: every step is positive except at row starts
            steps = np.diff(ci.astype(np.int64))
            row_start = np.zeros(ci.shape[0], dtype=bool)
            row_start[rp[:-1][rp[:-1] < ci.shape[0]]] = True
            if np.any(steps[~row_start[1:]] <= 0):
                raise FormatError("column indices must be strictly increasing within a row")
        if np.any(v == 0):
            raise FormatError("CSR stores an explicit zero")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    @property
    def sparsity(self) -> float:
        total = self.rows * self.cols
        return 1.0 - self.nnz / total if total else 0.0

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows, dtype=np.int32), np.diff(self.row_ptr))

    def without_pack(self) -> "SparseMatrixCSR":
        if self.pack is None:
            return self
        return SparseMatrixCSR(self.rows, self.cols, self.values, self.col_idx, self.row_ptr)

    def __eq__(self, other):
        # packing is a derived execution cache and does not take part in equality
        if not isinstance(other, SparseMatrixCSR):
            return NotImplemented
        return (
            self.shape == other.shape
            and self.values.tobytes() == other.values.tobytes()
            and np.array_equal(self.col_idx, other.col_idx)
            and np.array_equal(self.row_ptr, other.row_ptr)
        )

    __hash__ = None  # type: ignore[assignment]


def _as_2d(m) -> np.ndarray:
    if isinstance(m, Tensor):
        if m.layout != Layout.ROW_MAJOR_2D:
            raise ShapeError(f"expected a RowMajor2D tensor, got {m.layout.name}")
        return m.data
    a = np.asarray(m)
    if a.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {a.shape}")
    return a.astype(FLOAT, copy=False)


def csr_from_dense(m) -> SparseMatrixCSR:
    a = _as_2d(m)
    rows, cols = np.nonzero(a)
    row_ptr = np.zeros(a.shape[0] + 1, dtype=np.int64)
    np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=row_ptr[1:])
    return SparseMatrixCSR(a.shape[0], a.shape[1], a[rows, cols], cols, row_ptr)


def csr_to_dense(s: SparseMatrixCSR) -> Tensor:
    s.validate()
    out = np.zeros(s.shape, dtype=FLOAT)
    out[s.row_indices(), s.col_idx] = s.values
    return Tensor(out, Layout.ROW_MAJOR_2D)


def pad_to_alignment(t: Tensor, unit: int, axis: int) -> Tensor:
    if unit < 1:
        raise ParameterError(f"alignment unit must be >= 1, got {unit}")
    if not -t.data.ndim <= axis < t.data.ndim:
        raise ShapeError(f"axis {axis} out of range for rank {t.data.ndim}")
    axis %= t.data.ndim
    extent = t.dims[axis]
    target = -(-extent // unit) * unit
    if target == extent:
        return t
    widths = [(0, 0)] * t.data.ndim
    widths[axis] = (0, target - extent)
    return Tensor(np.pad(t.data, widths), t.layout, t.logical_dims)


_PERM = {
    (Layout.NCHW, Layout.NHWC): (0, 2, 3, 1),
    (Layout.NHWC, Layout.NCHW): (0, 3, 1, 2),
}


def transform_layout(t: Tensor, target: Layout) -> Tensor:
    target = Layout(target)
    if t.layout == target and target != Layout.ROW_MAJOR_2D:
        return t
    perm = _PERM.get((t.layout, target))
    if perm is None:
        raise UnsupportedError(f"layout transform {t.layout.name} -> {target.name}")
    logical = tuple(t.logical_dims[p] for p in perm)
    return Tensor(np.transpose(t.data, perm), target, logical)


def conv_output_size(extent: int, kernel: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - kernel) // stride + 1


def im2col(x, kh: int, kw: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Unfold NCHW receptive fields into columns.

    Rows are ordered (channel, kernel row, kernel col); columns are ordered
    (image, output row, output col). A single image gives the classic
    (C*kh*kw) x (Ho*Wo) matrix.
    """
    if isinstance(x, Tensor):
        if x.layout != Layout.NCHW:
            raise ShapeError(f"im2col expects NCHW input, got {x.layout.name}")
        a = x.data
    else:
        a = np.asarray(x, dtype=FLOAT)
    if a.ndim != 4:
        raise ShapeError(f"im2col expects a 4-D NCHW input, got shape {a.shape}")
    return Tensor(im2col_array(a, kh, kw, stride, padding), Layout.ROW_MAJOR_2D)


def im2col_array(a: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    n, c, h, w = a.shape
    if stride < 1 or padding < 0 or kh < 1 or kw < 1:
        raise ShapeError("stride and kernel must be >= 1 and padding >= 0")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if kh == kw == 1 and stride == 1 and padding == 0:
        return np.ascontiguousarray(a.transpose(1, 0, 2, 3).reshape(c, n * h * w))
    if padding:
        a = np.pad(a, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = np.lib.stride_tricks.sliding_window_view(a, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * ho * wo)
