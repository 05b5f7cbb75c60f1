"""CADM v1 model files.

Little-endian layout::

    b"CADM" | u32 version=1 | u32 node_count
    node*:  u16 kind | u32 id | attr block | u8 weight tag | weight blob | u8 has_bias [u32 n, f32*n]
    u32 edge_count | (u32 src, u32 dst)*
    u32 input_count | u32* | u32 output_count | u32*

Attr blocks hold the kind's fixed integer fields (see ``ATTR_FIELDS``) as
u32, except activation/pool/depthwise codes which are u8. INPUT stores
``u32 rank, u32 dims[rank]``; BATCHNORM appends ``f32 eps`` and
gamma/beta/mean/var as f32 arrays.

Weight tag 0 = none, 1 = dense (``u8 layout, u32 rank, u32 dims[rank],
u32 logical[rank], f32 data``), 2 = CSR (``u64 rows, cols, nnz, f32 values,
u32 col_idx, u32 row_ptr``).
"""

from __future__ import annotations

import os
import struct

import numpy as np

from sparsenn.errors import CorruptionError, FormatError
from sparsenn.graph.ir import ATTR_FIELDS, BNParams, Graph, Kind, LayerSpec
from sparsenn.tensor import Layout, SparseMatrixCSR, Tensor

MAGIC = b"CADM"
VERSION = 1

_BYTE_FIELDS = {"act", "pool", "depthwise"}
TAG_NONE, TAG_DENSE, TAG_CSR = 0, 1, 2


class _Writer:
    def __init__(self):
        self.parts: list[bytes] = []

    def pack(self, fmt: str, *values):
        self.parts.append(struct.pack("<" + fmt, *values))

    def array(self, a: np.ndarray, dtype: str):
        self.parts.append(np.ascontiguousarray(a).astype(dtype, copy=False).tobytes())

    def getvalue(self) -> bytes:
        return b"".join(self.parts)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0

    def _take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CorruptionError(f"model file truncated at byte {self.pos} (needed {n} more)")
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        vals = struct.unpack(fmt, self._take(struct.calcsize(fmt)))
        return vals[0] if len(vals) == 1 else vals

    def array(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype)
        return np.frombuffer(self._take(count * dt.itemsize), dtype=dt).copy()


def _write_node(w: _Writer, node: LayerSpec):
    w.pack("HI", int(node.kind), node.id)
    if node.kind == Kind.INPUT:
        shape = node.attrs["shape"]
        w.pack("I", len(shape))
        w.pack(f"{len(shape)}I", *shape)
    for name in ATTR_FIELDS[node.kind]:
        w.pack("B" if name in _BYTE_FIELDS else "I", int(node.attrs[name]))
    if node.kind == Kind.BATCHNORM:
        bn = node.bn_params
        w.pack("f", bn.eps)
        for arr in (bn.gamma, bn.beta, bn.mean, bn.var):
            w.array(arr, "<f4")

    weights = node.weights
    if weights is None:
        w.pack("B", TAG_NONE)
    elif isinstance(weights, Tensor):
        w.pack("BBI", TAG_DENSE, int(weights.layout), len(weights.dims))
        w.pack(f"{len(weights.dims)}I", *weights.dims)
        w.pack(f"{len(weights.dims)}I", *weights.logical_dims)
        w.array(weights.data, "<f4")
    else:
        w.pack("BQQQ", TAG_CSR, weights.rows, weights.cols, weights.nnz)
        w.array(weights.values, "<f4")
        w.array(weights.col_idx, "<u4")
        w.array(weights.row_ptr, "<u4")

    if node.bias is None:
        w.pack("B", 0)
    else:
        w.pack("BI", 1, node.bias.shape[0])
        w.array(node.bias, "<f4")


def _read_node(r: _Reader) -> LayerSpec:
    code, node_id = r.unpack("HI")
    try:
        kind = Kind(code)
    except ValueError:
        raise FormatError(f"unknown layer kind code {code}") from None
    attrs = {}
    if kind == Kind.INPUT:
        rank = r.unpack("I")
        attrs["shape"] = tuple(int(d) for d in r.array(rank, "<u4"))
    for name in ATTR_FIELDS[kind]:
        attrs[name] = int(r.unpack("B" if name in _BYTE_FIELDS else "I"))
    bn = None
    if kind == Kind.BATCHNORM:
        eps = r.unpack("f")
        c = attrs["channels"]
        bn = BNParams(*(r.array(c, "<f4") for _ in range(4)), eps=eps)

    tag = r.unpack("B")
    weights = None
    if tag == TAG_DENSE:
        layout, rank = r.unpack("BI")
        dims = tuple(int(d) for d in r.array(rank, "<u4"))
        logical = tuple(int(d) for d in r.array(rank, "<u4"))
        data = r.array(int(np.prod(dims)), "<f4").reshape(dims)
        try:
            weights = Tensor(data, Layout(layout), logical)
        except ValueError as exc:
            raise FormatError(f"node {node_id}: bad dense blob: {exc}") from None
    elif tag == TAG_CSR:
        rows, cols, nnz = r.unpack("QQQ")
        values = r.array(nnz, "<f4")
        col_idx = r.array(nnz, "<u4")
        row_ptr = r.array(rows + 1, "<u4")
        weights = SparseMatrixCSR(rows, cols, values, col_idx.astype(np.int32), row_ptr.astype(np.int64))
    elif tag != TAG_NONE:
        raise FormatError(f"node {node_id}: unknown weight encoding tag {tag}")

    bias = None
    if r.unpack("B"):
        bias = r.array(r.unpack("I"), "<f4")
    return LayerSpec(node_id, kind, attrs, weights, bias, bn)


def dumps(g: Graph) -> bytes:
    w = _Writer()
    w.parts.append(MAGIC)
    w.pack("II", VERSION, len(g.nodes))
    for node in g.nodes:
        _write_node(w, node)
    w.pack("I", len(g.edges))
    for a, b in g.edges:
        w.pack("II", a, b)
    for ids in (g.inputs, g.outputs):
        w.pack("I", len(ids))
        w.pack(f"{len(ids)}I", *ids)
    return w.getvalue()


def loads(buf: bytes) -> Graph:
    r = _Reader(buf)
    if bytes(r._take(4)) != MAGIC:
        raise FormatError("not a CADM model file (bad magic)")
    version, count = r.unpack("II")
    if version != VERSION:
        raise FormatError(f"unsupported CADM version {version}")
    nodes = [_read_node(r) for _ in range(count)]
    n_edges = r.unpack("I")
    edges = [tuple(int(v) for v in pair) for pair in r.array(2 * n_edges, "<u4").reshape(-1, 2)]
    inputs = [int(v) for v in r.array(r.unpack("I"), "<u4")]
    outputs = [int(v) for v in r.array(r.unpack("I"), "<u4")]
    if r.pos != len(r.buf):
        raise FormatError(f"{len(r.buf) - r.pos} trailing bytes after model payload")
    return Graph(nodes, edges, inputs, outputs)


def save_model(g: Graph, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(g))


def load_model(path: str | os.PathLike) -> Graph:
    with open(path, "rb") as fh:
        return loads(fh.read())
