"""Numba-compiled execution kernels.

All kernels accumulate in float32 in an order fixed by the KernelConfig, so a
given config is bit-reproducible. Work is split over disjoint output row
tiles when more than one numba thread is configured.

Instrumented variants (``counter=`` argument) are separate compiled
functions; the default path carries no counting code.
"""

from __future__ import annotations

import functools
import itertools
import os
from dataclasses import asdict, dataclass

import numba
import numpy as np
from numba import njit, prange

from sparsenn.errors import ParameterError, ShapeError
from sparsenn.tensor import FLOAT, SparseMatrixCSR, Tensor, TilePacking, conv_output_size, im2col_array

# prefer OpenMP over probing an outdated TBB, unless the user chose an order
if "NUMBA_THREADING_LAYER_PRIORITY" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

LOOP_ORDERS = tuple("".join(p) for p in itertools.permutations("mnk"))


@dataclass(frozen=True, order=True)
class KernelConfig:
    tile_m: int = 32
    tile_n: int = 32
    tile_k: int = 32
    unroll: int = 4
    loop_order: str = "mnk"
    vector_width_hint: int = 8

    def __post_init__(self):
        for name in ("tile_m", "tile_n", "tile_k", "unroll", "vector_width_hint"):
            if int(getattr(self, name)) < 1:
                raise ParameterError(f"{name} must be >= 1")
        if self.loop_order not in LOOP_ORDERS:
            raise ParameterError(f"loop_order must be a permutation of 'mnk', got {self.loop_order!r}")

    @property
    def footprint(self) -> int:
        """Elements touched by one (m, n, k) tile of A, B and C."""
        return self.tile_m * self.tile_k + self.tile_k * self.tile_n + self.tile_m * self.tile_n

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("vector_width_hint")
        return d


DEFAULT_CONFIG = KernelConfig()


@dataclass
class LoadCounter:
    weight_loads: int = 0
    activation_loads: int = 0

    def add(self, weight: int, activation: int) -> None:
        self.weight_loads += int(weight)
        self.activation_loads += int(activation)


@dataclass(frozen=True, order=True)
class ShapeKey:
    """Cache key of a kernel invocation: C[m, n] = W[m, k] @ X[k, n]."""

    kind: str
    m: int
    n: int
    k: int
    sparsity_bucket: int = 0


def sparsity_bucket(sparsity: float) -> int:
    """0 for dense, then (0, .5] -> 1, (.5, .8] -> 2, (.8, 1] -> 3."""
    if sparsity <= 0.0:
        return 0
    if sparsity <= 0.5:
        return 1
    if sparsity <= 0.8:
        return 2
    return 3


def threads() -> int:
    return numba.get_num_threads()


def set_threads(n: int) -> None:
    if not 1 <= int(n) <= numba.config.NUMBA_NUM_THREADS:
        raise ParameterError(f"thread count must be in [1, {numba.config.NUMBA_NUM_THREADS}], got {n}")
    numba.set_num_threads(int(n))


def rel_error(actual, expected) -> float:
    """Frobenius-norm relative error ``||a - e|| / ||e||`` computed in float64."""
    a = np.asarray(actual, dtype=np.float64)
    e = np.asarray(expected, dtype=np.float64)
    if a.shape != e.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {e.shape}")
    denom = np.linalg.norm(e)
    diff = np.linalg.norm(a - e)
    return float(diff / denom) if denom > 0 else float(diff)


# ---------------------------------------------------------------------------
# dense GEMM


@functools.lru_cache(maxsize=512)
def _tile_schedule(m: int, n: int, k: int, tm: int, tn: int, tk: int, order: str, by_row_tile: bool):
    """Tile origins in loop order; optionally regrouped by row tile for parallel runs."""
    starts = {"m": range(0, m, tm), "n": range(0, n, tn), "k": range(0, k, tk)}
    pos = {ax: i for i, ax in enumerate(order)}
    tiles = np.array(
        [
            (t[pos["m"]], t[pos["n"]], t[pos["k"]])
            for t in itertools.product(*(starts[ax] for ax in order))
        ],
        dtype=np.int64,
    ).reshape(-1, 3)
    if by_row_tile:
        tiles = tiles[np.argsort(tiles[:, 0], kind="stable")]
        _, first = np.unique(tiles[:, 0], return_index=True)
        group_ptr = np.append(first, len(tiles)).astype(np.int64)
    else:
        group_ptr = np.array([0, len(tiles)], dtype=np.int64)
    tiles.flags.writeable = False
    group_ptr.flags.writeable = False
    return tiles, group_ptr


@njit(cache=True, nogil=True)
def _gemm_tiles(a, b, c, tiles, t_lo, t_hi, tm, tn, tk, unroll):
    m, kdim = a.shape
    n = b.shape[1]
    for t in range(t_lo, t_hi):
        i0 = tiles[t, 0]
        j0 = tiles[t, 1]
        k0 = tiles[t, 2]
        i1 = min(i0 + tm, m)
        j1 = min(j0 + tn, n)
        k1 = min(k0 + tk, kdim)
        for i in range(i0, i1):
            kk = k0
            if unroll >= 8:
                while kk + 8 <= k1:
                    a0 = a[i, kk]
                    a1 = a[i, kk + 1]
                    a2 = a[i, kk + 2]
                    a3 = a[i, kk + 3]
                    a4 = a[i, kk + 4]
                    a5 = a[i, kk + 5]
                    a6 = a[i, kk + 6]
                    a7 = a[i, kk + 7]
                    for j in range(j0, j1):
                        c[i, j] += (
                            ((a0 * b[kk, j] + a1 * b[kk + 1, j]) + (a2 * b[kk + 2, j] + a3 * b[kk + 3, j]))
                            + ((a4 * b[kk + 4, j] + a5 * b[kk + 5, j]) + (a6 * b[kk + 6, j] + a7 * b[kk + 7, j]))
                        )
                    kk += 8
            if unroll >= 4:
                while kk + 4 <= k1:
                    a0 = a[i, kk]
                    a1 = a[i, kk + 1]
                    a2 = a[i, kk + 2]
                    a3 = a[i, kk + 3]
                    for j in range(j0, j1):
                        c[i, j] += (a0 * b[kk, j] + a1 * b[kk + 1, j]) + (a2 * b[kk + 2, j] + a3 * b[kk + 3, j])
                    kk += 4
            if unroll >= 2:
                while kk + 2 <= k1:
                    a0 = a[i, kk]
                    a1 = a[i, kk + 1]
                    for j in range(j0, j1):
                        c[i, j] += a0 * b[kk, j] + a1 * b[kk + 1, j]
                    kk += 2
            while kk < k1:
                a0 = a[i, kk]
                for j in range(j0, j1):
                    c[i, j] += a0 * b[kk, j]
                kk += 1


def _gemm_body(a, b, c, tiles, group_ptr, tm, tn, tk, unroll):
    # tile groups share no output rows, so they may run concurrently
    for g in prange(group_ptr.shape[0] - 1):
        _gemm_tiles(a, b, c, tiles, group_ptr[g], group_ptr[g + 1], tm, tn, tk, unroll)


def _gemm_counted_body(a, b, c, tiles, tm, tn, tk):
    # unroll-free twin of the gemm loop nest that tallies loads
    m, kdim = a.shape
    n = b.shape[1]
    wl = 0
    al = 0
    for t in range(tiles.shape[0]):
        i0 = tiles[t, 0]
        j0 = tiles[t, 1]
        k0 = tiles[t, 2]
        for i in range(i0, min(i0 + tm, m)):
            for kk in range(k0, min(k0 + tk, kdim)):
                a0 = a[i, kk]
                wl += 1
                for j in range(j0, min(j0 + tn, n)):
                    c[i, j] += a0 * b[kk, j]
                    al += 1
    return wl, al


_gemm_seq = njit(cache=True, nogil=True)(_gemm_body)
_gemm_counted = njit(cache=True)(_gemm_counted_body)


@functools.lru_cache(maxsize=None)
def _parallel(fn):
    return njit(parallel=True, nogil=True)(fn)


def _as_matrix(x, name: str) -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    a = np.asarray(x)
    if a.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {a.shape}")
    return np.ascontiguousarray(a, dtype=FLOAT)


def _output(out, m: int, n: int) -> np.ndarray:
    if out is None:
        return np.zeros((m, n), dtype=FLOAT)
    if out.shape != (m, n) or out.dtype != FLOAT or not out.flags.c_contiguous:
        raise ShapeError(f"output buffer must be C-contiguous float32 {(m, n)}")
    out.fill(0.0)
    return out


def gemm_tiled(a, b, cfg: KernelConfig = DEFAULT_CONFIG, counter: LoadCounter | None = None,
               out: np.ndarray | None = None) -> np.ndarray:
    """C = A @ B with tiling, k-unrolling and tile-loop order taken from ``cfg``."""
    a = _as_matrix(a, "a")
    b = _as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    m, k = a.shape
    n = b.shape[1]
    c = _output(out, m, n)
    if m == 0 or n == 0 or k == 0:
        return c
    tm, tn, tk = min(cfg.tile_m, m), min(cfg.tile_n, n), min(cfg.tile_k, k)
    if counter is not None:
        tiles, _ = _tile_schedule(m, n, k, tm, tn, tk, cfg.loop_order, False)
        counter.add(*_gemm_counted(a, b, c, tiles, tm, tn, tk))
        return c
    par = threads() > 1
    tiles, group_ptr = _tile_schedule(m, n, k, tm, tn, tk, cfg.loop_order, par)
    kernel = _parallel(_gemm_body) if par else _gemm_seq
    kernel(a, b, c, tiles, group_ptr, tm, tn, tk, min(cfg.unroll, tk))
    return c


def gemm_naive(a, b) -> np.ndarray:
    """Float64 triple-loop reference (vectorized over the inner index)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    c = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        c += np.outer(a[:, k], b[k, :])
    return c


# ---------------------------------------------------------------------------
# sparse x dense


def _spmm_body(values, col_idx, row_ptr, x, c, tm, tn):
    m = row_ptr.shape[0] - 1
    n = x.shape[1]
    n_row_tiles = (m + tm - 1) // tm
    for rt in prange(n_row_tiles):
        i0 = rt * tm
        i1 = min(i0 + tm, m)
        for j0 in range(0, n, tn):
            j1 = min(j0 + tn, n)
            for i in range(i0, i1):
                for p in range(row_ptr[i], row_ptr[i + 1]):
                    v = values[p]
                    kk = col_idx[p]
                    for j in range(j0, j1):
                        c[i, j] += v * x[kk, j]


def _spmm_n_outer_body(values, col_idx, row_ptr, x, c, tm, tn):
    # n tiles outermost: one x column block stays hot across every row
    m = row_ptr.shape[0] - 1
    n = x.shape[1]
    for j0 in range(0, n, tn):
        j1 = min(j0 + tn, n)
        for i in range(m):
            for p in range(row_ptr[i], row_ptr[i + 1]):
                v = values[p]
                kk = col_idx[p]
                for j in range(j0, j1):
                    c[i, j] += v * x[kk, j]


def _spmm_packed_body(rows, cols, values, group_ptr, rowtile_ptr, x, c, tn):
    n = x.shape[1]
    for rt in prange(rowtile_ptr.shape[0] - 1):
        for j0 in range(0, n, tn):
            j1 = min(j0 + tn, n)
            for g in range(rowtile_ptr[rt], rowtile_ptr[rt + 1]):
                for p in range(group_ptr[g], group_ptr[g + 1]):
                    v = values[p]
                    r = rows[p]
                    kk = cols[p]
                    for j in range(j0, j1):
                        c[r, j] += v * x[kk, j]


def _spmm_packed_counted_body(rows, cols, values, group_ptr, rowtile_ptr, x, c, tn):
    n = x.shape[1]
    wl = 0
    al = 0
    for rt in range(rowtile_ptr.shape[0] - 1):
        for j0 in range(0, n, tn):
            j1 = min(j0 + tn, n)
            for g in range(rowtile_ptr[rt], rowtile_ptr[rt + 1]):
                for p in range(group_ptr[g], group_ptr[g + 1]):
                    v = values[p]
                    wl += 1
                    r = rows[p]
                    kk = cols[p]
                    for j in range(j0, j1):
                        c[r, j] += v * x[kk, j]
                        al += 1
    return wl, al


def _spmm_counted_body(values, col_idx, row_ptr, x, c, tm, tn):
    m = row_ptr.shape[0] - 1
    n = x.shape[1]
    wl = 0
    al = 0
    for i0 in range(0, m, tm):
        i1 = min(i0 + tm, m)
        for j0 in range(0, n, tn):
            j1 = min(j0 + tn, n)
            for i in range(i0, i1):
                for p in range(row_ptr[i], row_ptr[i + 1]):
                    v = values[p]
                    wl += 1
                    kk = col_idx[p]
                    for j in range(j0, j1):
                        c[i, j] += v * x[kk, j]
                        al += 1
    return wl, al


def _spmm_elementwise_body(values, col_idx, row_ptr, x, c):
    # baseline: every output element reloads each weight it needs
    m = row_ptr.shape[0] - 1
    n = x.shape[1]
    wl = 0
    al = 0
    for j in range(n):
        for i in range(m):
            acc = c[i, j]
            for p in range(row_ptr[i], row_ptr[i + 1]):
                acc += values[p] * x[col_idx[p], j]
                wl += 1
                al += 1
            c[i, j] = acc
    return wl, al


_spmm_seq = njit(cache=True, nogil=True)(_spmm_body)
_spmm_n_outer = njit(cache=True, nogil=True)(_spmm_n_outer_body)
_spmm_packed_seq = njit(cache=True, nogil=True)(_spmm_packed_body)
_spmm_packed_counted = njit(cache=True)(_spmm_packed_counted_body)
_spmm_counted = njit(cache=True)(_spmm_counted_body)
_spmm_elementwise = njit(cache=True)(_spmm_elementwise_body)


def _n_before_m(order: str) -> bool:
    return order.index("n") < order.index("m")


def spmm_csr_tiled(w: SparseMatrixCSR, x, cfg: KernelConfig = DEFAULT_CONFIG, counter: LoadCounter | None = None,
                   out: np.ndarray | None = None) -> np.ndarray:
    """C = W @ X for CSR ``w``.

    A packed ``w`` (see ``pack_weights_tiled``) runs block group by block
    group; otherwise rows are walked in ``tile_m`` row tiles. Each stored
    weight is read once per ``tile_n`` column block. Contributions to an
    output element are always added in ascending column order of W, so
    packed, unpacked and every config give bit-identical results. ``unroll``
    and ``tile_k`` only matter through packing.
    """
    x = _as_matrix(x, "x")
    if w.cols != x.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {w.shape} @ {x.shape}")
    m, n = w.rows, x.shape[1]
    c = _output(out, m, n)
    if m == 0 or n == 0 or w.nnz == 0:
        return c
    tn = min(cfg.tile_n, n)
    pk = w.pack
    if pk is not None:
        rowtile_ptr = pk.rowtile_ptr
        if counter is not None:
            counter.add(*_spmm_packed_counted(pk.rows, pk.cols, pk.values, pk.group_ptr, rowtile_ptr, x, c, tn))
            return c
        kernel = _parallel(_spmm_packed_body) if threads() > 1 else _spmm_packed_seq
        kernel(pk.rows, pk.cols, pk.values, pk.group_ptr, rowtile_ptr, x, c, tn)
        return c
    tm = min(cfg.tile_m, m)
    if counter is not None:
        counter.add(*_spmm_counted(w.values, w.col_idx, w.row_ptr, x, c, tm, tn))
    elif threads() > 1:
        _parallel(_spmm_body)(w.values, w.col_idx, w.row_ptr, x, c, tm, tn)
    elif _n_before_m(cfg.loop_order):
        _spmm_n_outer(w.values, w.col_idx, w.row_ptr, x, c, tm, tn)
    else:
        _spmm_seq(w.values, w.col_idx, w.row_ptr, x, c, tm, tn)
    return c


def spmm_elementwise_baseline(w: SparseMatrixCSR, x, counter: LoadCounter | None = None) -> np.ndarray:
    """Element-at-a-time SpMM: nnz * N weight loads."""
    x = _as_matrix(x, "x")
    if w.cols != x.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {w.shape} @ {x.shape}")
    c = np.zeros((w.rows, x.shape[1]), dtype=FLOAT)
    wl, al = _spmm_elementwise(w.values, w.col_idx, w.row_ptr, x, c)
    if counter is not None:
        counter.add(wl, al)
    return c


def pack_weights_tiled(w: SparseMatrixCSR, cfg: KernelConfig = DEFAULT_CONFIG) -> SparseMatrixCSR:
    """Attach a (tile_m x tile_k) block packing to ``w``.

    Groups are ordered by row tile then column tile; inside a group entries
    stay in row-major order.
    """
    tr = max(1, min(cfg.tile_m, max(w.rows, 1)))
    tc = max(1, min(cfg.tile_k, max(w.cols, 1)))
    rows = w.row_indices().astype(np.int64)
    cols = w.col_idx.astype(np.int64)
    row_tile = rows // tr
    col_tile = cols // tc
    idx = np.arange(w.nnz, dtype=np.int64)
    # CSR order is already row-major, so a stable sort by block keeps it inside each group
    order = np.lexsort((idx, col_tile, row_tile)) if w.nnz else idx
    block = row_tile[order] * (col_tile.max(initial=0) + 1) + col_tile[order]
    starts = np.flatnonzero(np.r_[True, block[1:] != block[:-1]]) if w.nnz else np.zeros(0, dtype=np.int64)
    group_ptr = np.append(starts, w.nnz).astype(np.int64)
    group_row_tile = row_tile[order][starts] if w.nnz else np.zeros(0, dtype=np.int64)
    rt_starts = np.flatnonzero(np.r_[True, group_row_tile[1:] != group_row_tile[:-1]]) if w.nnz else starts
    pack = TilePacking(
        tile_rows=tr,
        tile_cols=tc,
        order=order,
        group_ptr=group_ptr,
        group_row_tile=group_row_tile,
        rowtile_ptr=np.append(rt_starts, len(starts)).astype(np.int64),
        rows=rows[order].astype(np.int32),
        cols=cols[order].astype(np.int32),
        values=np.ascontiguousarray(w.values[order]),
    )
    return SparseMatrixCSR(w.rows, w.cols, w.values, w.col_idx, w.row_ptr, pack=pack)


# ---------------------------------------------------------------------------
# convolutions


@njit(cache=True)
def _conv_direct(x, w, out, stride, pad):
    n_img, cin, h, wd = x.shape
    kout, _, kh, kw = w.shape
    ho, wo = out.shape[2], out.shape[3]
    for n in range(n_img):
        for k in range(kout):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0.0
                    for c in range(cin):
                        for i in range(kh):
                            y = oy * stride - pad + i
                            if y < 0 or y >= h:
                                continue
                            for j in range(kw):
                                xx = ox * stride - pad + j
                                if xx < 0 or xx >= wd:
                                    continue
                                acc += np.float64(x[n, c, y, xx]) * np.float64(w[k, c, i, j])
                    out[n, k, oy, ox] = acc


def _depthwise_body(x, w, out, stride, pad):
    n_img, ch, h, wd = x.shape
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = out.shape[2], out.shape[3]
    wl = 0
    for nc in range(n_img * ch):
        n = nc // ch
        c = nc % ch
        for oy in range(ho):
            for ox in range(wo):
                acc = np.float32(0.0)
                for i in range(kh):
                    y = oy * stride - pad + i
                    if y < 0 or y >= h:
                        continue
                    for j in range(kw):
                        xx = ox * stride - pad + j
                        if 0 <= xx < wd:
                            acc += x[n, c, y, xx] * w[c, 0, i, j]
                            wl += 1
                out[n, c, oy, ox] = acc
    return wl


_depthwise = njit(cache=True, nogil=True)(_depthwise_body)


def _nchw(x, name="x") -> np.ndarray:
    if isinstance(x, Tensor):
        x = x.data
    a = np.ascontiguousarray(x, dtype=FLOAT)
    if a.ndim != 4:
        raise ShapeError(f"{name} must be NCHW (4-D), got shape {a.shape}")
    return a


def _out_hw(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> tuple[int, int]:
    if stride < 1 or padding < 0:
        raise ShapeError("stride must be >= 1 and padding >= 0")
    ho = conv_output_size(x.shape[2], kh, stride, padding)
    wo = conv_output_size(x.shape[3], kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"kernel {kh}x{kw} does not fit input {x.shape}")
    return ho, wo


def conv2d_direct(x, w, bias=None, stride: int = 1, padding: int = 0) -> np.ndarray:
    """Reference cross-correlation with zero padding (float64 accumulation)."""
    x = _nchw(x)
    w = _nchw(w, "w")
    if w.shape[1] != x.shape[1]:
        raise ShapeError(f"weights expect {w.shape[1]} input channels, input has {x.shape[1]}")
    ho, wo = _out_hw(x, w.shape[2], w.shape[3], stride, padding)
    out = np.zeros((x.shape[0], w.shape[0], ho, wo), dtype=FLOAT)
    _conv_direct(x, w, out, stride, padding)
    if bias is not None:
        out += np.asarray(bias, dtype=FLOAT)[None, :, None, None]
    return out


def conv2d_gemm(x, w, bias=None, stride: int = 1, padding: int = 0, kernel_hw: tuple[int, int] | None = None,
                cfg: KernelConfig = DEFAULT_CONFIG, counter: LoadCounter | None = None) -> np.ndarray:
    """Convolution lowered to im2col + GEMM (dense) or SpMM (CSR weights)."""
    x = _nchw(x)
    if isinstance(w, SparseMatrixCSR):
        if kernel_hw is None:
            raise ShapeError("kernel_hw is required for CSR convolution weights")
        kh, kw = kernel_hw
        kout = w.rows
        if w.cols != x.shape[1] * kh * kw:
            raise ShapeError(f"CSR weights expect fan-in {w.cols}, input gives {x.shape[1] * kh * kw}")
    else:
        w = _nchw(w, "w")
        kout, cin, kh, kw = w.shape
        if cin != x.shape[1]:
            raise ShapeError(f"weights expect {cin} input channels, input has {x.shape[1]}")
    ho, wo = _out_hw(x, kh, kw, stride, padding)
    cols = im2col_array(x, kh, kw, stride, padding)
    if isinstance(w, SparseMatrixCSR):
        y = spmm_csr_tiled(w, cols, cfg, counter)
    else:
        y = gemm_tiled(w.reshape(kout, -1), cols, cfg, counter)
    out = np.ascontiguousarray(y.reshape(kout, x.shape[0], ho, wo).transpose(1, 0, 2, 3))
    if bias is not None:
        out += np.asarray(bias, dtype=FLOAT)[None, :, None, None]
    return out


def depthwise_conv2d(x, w, bias=None, stride: int = 1, padding: int = 0,
                     counter: LoadCounter | None = None, out: np.ndarray | None = None) -> np.ndarray:
    x = _nchw(x)
    w = _nchw(w, "w")
    if w.shape[0] != x.shape[1] or w.shape[1] != 1:
        raise ShapeError(f"depthwise weights {w.shape} do not match {x.shape[1]} channels")
    ho, wo = _out_hw(x, w.shape[2], w.shape[3], stride, padding)
    if out is None:
        out = np.empty((x.shape[0], x.shape[1], ho, wo), dtype=FLOAT)
    loads = _depthwise(x, w, out, stride, padding)
    if counter is not None:
        counter.add(loads, loads)
    if bias is not None:
        out += np.asarray(bias, dtype=FLOAT)[None, :, None, None]
    return out


# ---------------------------------------------------------------------------
# pooling and elementwise


def pool2d(x, kind: str, window: int, stride: int) -> np.ndarray:
    x = _nchw(x)
    if window < 1 or stride < 1:
        raise ShapeError("window and stride must be >= 1")
    if window > x.shape[2] or window > x.shape[3]:
        raise ShapeError(f"pool window {window} exceeds input {x.shape[2]}x{x.shape[3]}")
    win = np.lib.stride_tricks.sliding_window_view(x, (window, window), axis=(2, 3))[:, :, ::stride, ::stride]
    if kind == "max":
        return np.ascontiguousarray(win.max(axis=(4, 5)))
    if kind == "avg":
        return np.ascontiguousarray(win.mean(axis=(4, 5), dtype=np.float32))
    raise ParameterError(f"unknown pool kind {kind!r}")


def elementwise(kind: str, a, b=None, out: np.ndarray | None = None) -> np.ndarray:
    a = np.asarray(a, dtype=FLOAT)
    if kind == "add":
        b = np.asarray(b, dtype=FLOAT)
        if a.shape != b.shape:
            raise ShapeError(f"add operands differ: {a.shape} vs {b.shape}")
        return np.add(a, b, out=out)
    if kind == "relu":
        return np.maximum(a, np.float32(0), out=out)
    if kind == "relu6":
        return np.clip(a, np.float32(0), np.float32(6), out=out)
    if kind == "identity":
        if out is None:
            return a.copy()
        out[...] = a
        return out
    if kind == "softmax":
        shifted = a - a.max(axis=1, keepdims=True)
        e = np.exp(shifted, out=out)
        e /= e.sum(axis=1, keepdims=True)
        return e
    raise ParameterError(f"unknown elementwise kind {kind!r}")
