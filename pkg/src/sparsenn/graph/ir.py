"""Layer-graph intermediate representation."""

from __future__ import annotations

import enum
import heapq
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

from sparsenn.errors import CycleError, ShapeError
from sparsenn.tensor import FLOAT, Layout, SparseMatrixCSR, Tensor, conv_output_size


class Kind(enum.IntEnum):
    INPUT = 0
    CONV2D = 1
    DEPTHWISE_CONV2D = 2
    BATCHNORM = 3
    ACTIVATION = 4
    POOL = 5
    FULLY_CONNECTED = 6
    ADD = 7
    GEMM = 8
    FUSED_CONV_BN_ACT = 9


class Act(enum.IntEnum):
    IDENTITY = 0
    RELU = 1
    RELU6 = 2
    SOFTMAX = 3


class PoolKind(enum.IntEnum):
    MAX = 0
    AVG = 1


# Fixed integer attributes per kind; INPUT additionally carries "shape".
ATTR_FIELDS: dict[Kind, tuple[str, ...]] = {
    Kind.INPUT: (),
    Kind.CONV2D: ("in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding"),
    Kind.DEPTHWISE_CONV2D: ("channels", "kernel_h", "kernel_w", "stride", "padding"),
    Kind.BATCHNORM: ("channels",),
    Kind.ACTIVATION: ("act",),
    Kind.POOL: ("pool", "window", "stride"),
    Kind.FULLY_CONNECTED: ("in_features", "out_features"),
    Kind.ADD: (),
    Kind.GEMM: ("m", "k", "act"),
    Kind.FUSED_CONV_BN_ACT: (
        "in_channels", "out_channels", "kernel_h", "kernel_w", "stride", "padding", "depthwise", "act",
    ),
}

# fields allowed to be zero; everything else must be strictly positive
_ZERO_OK = {"padding", "act", "pool", "depthwise"}

ARITY = defaultdict(lambda: 1, {Kind.INPUT: 0, Kind.ADD: 2})

WEIGHTED = {Kind.CONV2D, Kind.DEPTHWISE_CONV2D, Kind.FULLY_CONNECTED, Kind.GEMM, Kind.FUSED_CONV_BN_ACT}


@dataclass(eq=False)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "mean", "var"):
            setattr(self, name, np.ascontiguousarray(getattr(self, name), dtype=FLOAT))
        self.eps = float(np.float32(self.eps))

    @property
    def channels(self) -> int:
        return int(self.gamma.shape[0])

    def __eq__(self, other):
        if not isinstance(other, BNParams):
            return NotImplemented
        return self.eps == other.eps and all(
            getattr(self, n).tobytes() == getattr(other, n).tobytes() for n in ("gamma", "beta", "mean", "var")
        )


Weights = Tensor | SparseMatrixCSR


@dataclass(eq=False)
class LayerSpec:
    id: int
    kind: Kind
    attrs: dict[str, Any] = field(default_factory=dict)
    weights: Weights | None = None
    bias: np.ndarray | None = None
    bn_params: BNParams | None = None

    def __post_init__(self):
        self.kind = Kind(self.kind)
        if self.bias is not None:
            self.bias = np.ascontiguousarray(self.bias, dtype=FLOAT)

    @property
    def is_sparse(self) -> bool:
        return isinstance(self.weights, SparseMatrixCSR)

    def replace(self, **changes) -> "LayerSpec":
        values = dict(id=self.id, kind=self.kind, attrs=dict(self.attrs), weights=self.weights,
                      bias=self.bias, bn_params=self.bn_params)
        values.update(changes)
        return LayerSpec(**values)

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        if (self.id, self.kind) != (other.id, other.kind) or _norm_attrs(self.attrs) != _norm_attrs(other.attrs):
            return False
        if type(self.weights) is not type(other.weights) or (self.weights is not None and self.weights != other.weights):
            return False
        if (self.bias is None) != (other.bias is None):
            return False
        if self.bias is not None and self.bias.tobytes() != other.bias.tobytes():
            return False
        return self.bn_params == other.bn_params

    def __repr__(self):
        w = "" if self.weights is None else (" csr" if self.is_sparse else " dense")
        return f"LayerSpec({self.id}, {self.kind.name}, {self.attrs}{w})"


def _norm_attrs(attrs: dict) -> dict:
    return {k: (tuple(v) if isinstance(v, (list, tuple)) else int(v)) for k, v in attrs.items()}


@dataclass(eq=False)
class Graph:
    nodes: list[LayerSpec] = field(default_factory=list)
    edges: list[tuple[int, int]] = field(default_factory=list)
    inputs: list[int] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)

    def __post_init__(self):
        self.edges = [(int(a), int(b)) for a, b in self.edges]

    def node(self, node_id: int) -> LayerSpec:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def by_id(self) -> dict[int, LayerSpec]:
        return {n.id: n for n in self.nodes}

    def predecessors(self, node_id: int) -> list[int]:
        return [a for a, b in self.edges if b == node_id]

    def successors(self, node_id: int) -> list[int]:
        return [b for a, b in self.edges if a == node_id]

    def consumer_counts(self) -> dict[int, int]:
        counts = {n.id: 0 for n in self.nodes}
        for a, _ in self.edges:
            counts[a] = counts.get(a, 0) + 1
        return counts

    def next_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def copy(self) -> "Graph":
        return Graph([n.replace() for n in self.nodes], list(self.edges), list(self.inputs), list(self.outputs))

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return (
            self.edges == other.edges
            and self.inputs == other.inputs
            and self.outputs == other.outputs
            and len(self.nodes) == len(other.nodes)
            and all(a == b for a, b in zip(self.nodes, other.nodes))
        )

    def __repr__(self):
        return f"Graph({len(self.nodes)} nodes, {len(self.edges)} edges, in={self.inputs}, out={self.outputs})"


@dataclass(frozen=True)
class Diagnostic:
    node_id: int | None
    rule: str
    message: str

    def __str__(self):
        where = "graph" if self.node_id is None else f"node {self.node_id}"
        return f"{where}: [{self.rule}] {self.message}"


def topological_order(g: Graph) -> list[int]:
    """Kahn's algorithm; ready nodes are released in ascending id order."""
    indeg = {n.id: 0 for n in g.nodes}
    succ = defaultdict(list)
    for a, b in g.edges:
        if a in indeg and b in indeg:
            indeg[b] += 1
            succ[a].append(b)
    ready = [i for i, d in indeg.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        i = heapq.heappop(ready)
        order.append(i)
        for j in succ[i]:
            indeg[j] -= 1
            if indeg[j] == 0:
                heapq.heappush(ready, j)
    if len(order) != len(indeg):
        stuck = sorted(i for i, d in indeg.items() if d > 0)
        raise CycleError(f"graph has a cycle through nodes {stuck}")
    return order


def weight_matrix_shape(node: LayerSpec) -> tuple[int, ...] | None:
    """Expected weight dims for ``node`` (dense form), or None if weightless."""
    a, k = node.attrs, node.kind
    if k == Kind.CONV2D or (k == Kind.FUSED_CONV_BN_ACT and not a.get("depthwise")):
        return (a["out_channels"], a["in_channels"], a["kernel_h"], a["kernel_w"])
    if k == Kind.DEPTHWISE_CONV2D:
        return (a["channels"], 1, a["kernel_h"], a["kernel_w"])
    if k == Kind.FUSED_CONV_BN_ACT:
        return (a["out_channels"], 1, a["kernel_h"], a["kernel_w"])
    if k == Kind.FULLY_CONNECTED:
        return (a["out_features"], a["in_features"])
    if k == Kind.GEMM:
        return (a["m"], a["k"])
    return None


def output_channels(node: LayerSpec) -> int | None:
    a = node.attrs
    for key in ("out_channels", "channels", "out_features", "m"):
        if key in a:
            return int(a[key])
    return None


def _check_weights(node: LayerSpec) -> list[str]:
    expected = weight_matrix_shape(node)
    problems = []
    if expected is None:
        if node.weights is not None:
            problems.append(f"{node.kind.name} must not carry weights")
        return problems
    w = node.weights
    if w is None:
        return [f"{node.kind.name} requires weights"]
    if isinstance(w, SparseMatrixCSR):
        if len(expected) == 4 and (node.kind == Kind.DEPTHWISE_CONV2D or node.attrs.get("depthwise")):
            problems.append("depthwise weights must be dense")
        rows, cols = expected[0], int(np.prod(expected[1:]))
        if w.shape != (rows, cols):
            problems.append(f"CSR weight shape {w.shape} != expected {(rows, cols)}")
    elif w.dims != expected:
        problems.append(f"weight dims {w.dims} != expected {expected}")
    elif w.logical_dims != w.dims:
        problems.append("layer weights must not carry alignment padding")
    out = output_channels(node)
    if node.bias is not None and node.bias.shape != (out,):
        problems.append(f"bias shape {node.bias.shape} != ({out},)")
    return problems


def infer_node_shape(node: LayerSpec, in_shapes: list[tuple[int, ...]]) -> tuple[int, ...]:
    a, k = node.attrs, node.kind
    if k == Kind.INPUT:
        return tuple(int(d) for d in a["shape"])
    x = in_shapes[0]
    if k in (Kind.CONV2D, Kind.DEPTHWISE_CONV2D, Kind.FUSED_CONV_BN_ACT):
        if len(x) != 4:
            raise ShapeError(f"convolution expects NCHW input, got {x}")
        depthwise = k == Kind.DEPTHWISE_CONV2D or bool(a.get("depthwise"))
        cin = a["channels"] if k == Kind.DEPTHWISE_CONV2D else a["in_channels"]
        cout = a["channels"] if k == Kind.DEPTHWISE_CONV2D else a["out_channels"]
        if depthwise and cin != cout:
            raise ShapeError("depthwise convolution must preserve channel count")
        if x[1] != cin:
            raise ShapeError(f"input has {x[1]} channels, layer expects {cin}")
        ho = conv_output_size(x[2], a["kernel_h"], a["stride"], a["padding"])
        wo = conv_output_size(x[3], a["kernel_w"], a["stride"], a["padding"])
        if ho < 1 or wo < 1:
            raise ShapeError(f"kernel does not fit input {x}")
        return (x[0], cout, ho, wo)
    if k == Kind.BATCHNORM:
        if len(x) < 2 or x[1] != a["channels"]:
            raise ShapeError(f"batchnorm over {a['channels']} channels got input {x}")
        return x
    if k == Kind.ACTIVATION:
        return x
    if k == Kind.POOL:
        if len(x) != 4 or a["window"] > x[2] or a["window"] > x[3]:
            raise ShapeError(f"pool window {a['window']} exceeds input {x}")
        return (x[0], x[1], (x[2] - a["window"]) // a["stride"] + 1, (x[3] - a["window"]) // a["stride"] + 1)
    if k == Kind.FULLY_CONNECTED:
        feats = int(np.prod(x[1:]))
        if feats != a["in_features"]:
            raise ShapeError(f"fully connected expects {a['in_features']} features, got {feats}")
        return (x[0], a["out_features"])
    if k == Kind.ADD:
        if in_shapes[0] != in_shapes[1]:
            raise ShapeError(f"add operands differ: {in_shapes[0]} vs {in_shapes[1]}")
        return x
    if k == Kind.GEMM:
        if len(x) != 4 or x[1] != a["k"]:
            raise ShapeError(f"gemm expects NCHW input with {a['k']} channels, got {x}")
        return (x[0], a["m"], x[2], x[3])
    raise ShapeError(f"unknown kind {k}")


def infer_shapes(g: Graph, order: Iterable[int] | None = None) -> dict[int, tuple[int, ...]]:
    """Output dims of every node (edge shapes are their producer's dims)."""
    nodes = g.by_id()
    shapes: dict[int, tuple[int, ...]] = {}
    for nid in order if order is not None else topological_order(g):
        node = nodes[nid]
        try:
            shapes[nid] = infer_node_shape(node, [shapes[p] for p in g.predecessors(nid)])
        except (KeyError, IndexError, ShapeError) as exc:
            raise ShapeError(f"node {nid} ({node.kind.name}): {exc}") from None
    return shapes


def validate_graph(g: Graph) -> list[Diagnostic]:
    diags: list[Diagnostic] = []
    ids = [n.id for n in g.nodes]
    seen = set()
    for i in ids:
        if i in seen:
            diags.append(Diagnostic(i, "duplicate-id", "node id used more than once"))
        seen.add(i)
    for a, b in g.edges:
        for end in (a, b):
            if end not in seen:
                diags.append(Diagnostic(end, "dangling-edge", f"edge ({a}->{b}) references a missing node"))
    for i in g.inputs:
        if i not in seen:
            diags.append(Diagnostic(i, "missing-input", "declared input does not exist"))
        elif g.node(i).kind != Kind.INPUT:
            diags.append(Diagnostic(i, "input-kind", "declared input is not an INPUT node"))
    for i in g.outputs:
        if i not in seen:
            diags.append(Diagnostic(i, "missing-output", "declared output does not exist"))
    for n in g.nodes:
        if n.kind == Kind.INPUT and n.id not in g.inputs:
            diags.append(Diagnostic(n.id, "input-kind", "INPUT node not listed in graph inputs"))

    cyclic = False
    try:
        order = topological_order(g)
    except CycleError as exc:
        cyclic = True
        diags.append(Diagnostic(None, "cycle", str(exc)))

    local_ok = True
    for n in g.nodes:
        fan_in = len(g.predecessors(n.id))
        if fan_in != ARITY[n.kind]:
            local_ok = False
            diags.append(Diagnostic(n.id, "arity", f"{n.kind.name} needs {ARITY[n.kind]} inputs, has {fan_in}"))
        missing = [f for f in ATTR_FIELDS[n.kind] if f not in n.attrs]
        if n.kind == Kind.INPUT and "shape" not in n.attrs:
            missing.append("shape")
        if missing:
            local_ok = False
            diags.append(Diagnostic(n.id, "attrs", f"missing attributes {missing}"))
            continue
        bad = [f for f in ATTR_FIELDS[n.kind] if int(n.attrs[f]) < (0 if f in _ZERO_OK else 1)]
        if n.kind == Kind.ACTIVATION and int(n.attrs["act"]) not in set(Act):
            bad.append("act")
        if bad:
            local_ok = False
            diags.append(Diagnostic(n.id, "attrs", f"invalid attribute values {bad}"))
            continue
        if n.kind == Kind.BATCHNORM:
            if n.bn_params is None:
                local_ok = False
                diags.append(Diagnostic(n.id, "bn-params", "batchnorm without parameters"))
            elif n.bn_params.channels != n.attrs["channels"]:
                local_ok = False
                diags.append(Diagnostic(n.id, "bn-params", "batchnorm parameter length != channels"))
        for problem in _check_weights(n):
            local_ok = False
            diags.append(Diagnostic(n.id, "weight-shape", problem))

    if not cyclic and local_ok and not any(d.rule in ("duplicate-id", "dangling-edge") for d in diags):
        try:
            infer_shapes(g, order)
        except ShapeError as exc:
            nid = None
            msg = str(exc)
            if msg.startswith("node "):
                nid = int(msg.split()[1])
            diags.append(Diagnostic(nid, "shape-inference", msg))
    return diags


def dense_weight_matrix(node: LayerSpec) -> np.ndarray:
    """Weights as a 2-D (out, fan-in) float32 array."""
    w = node.weights
    if isinstance(w, SparseMatrixCSR):
        out = np.zeros(w.shape, dtype=FLOAT)
        out[w.row_indices(), w.col_idx] = w.values
        return out
    return w.data.reshape(w.dims[0], -1)


def make_dense(a: np.ndarray) -> Tensor:
    return Tensor(a, Layout.NCHW if a.ndim == 4 else Layout.ROW_MAJOR_2D)
