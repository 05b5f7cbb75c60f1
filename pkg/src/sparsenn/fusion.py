"""Graph rewrite passes: BN folding, conv+BN+activation fusion, 1x1 conv to GEMM."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from sparsenn.errors import ParameterError, ShapeError
from sparsenn.graph.ir import Act, Graph, Kind, LayerSpec, output_channels, topological_order
from sparsenn.tensor import FLOAT, Layout, SparseMatrixCSR, Tensor

FUSABLE_ACTS = (Act.IDENTITY, Act.RELU, Act.RELU6)


@dataclass(frozen=True)
class Rewrite:
    pass_name: str
    consumed: tuple[int, ...]
    produced: int


@dataclass
class FusionReport:
    rewrites: list[Rewrite] = field(default_factory=list)
    nodes_before: int = 0
    nodes_after: int = 0
    adapters: int = 0

    def extend(self, other: "FusionReport") -> None:
        self.rewrites.extend(other.rewrites)
        self.adapters += other.adapters

    def __str__(self):
        lines = [f"fusion: {self.nodes_before} -> {self.nodes_after} nodes, {len(self.rewrites)} rewrites"]
        if self.adapters:
            lines[0] += f" ({self.adapters} layout adapters)"
        for r in self.rewrites:
            lines.append(f"  {r.pass_name}: {list(r.consumed)} -> {r.produced}")
        return "\n".join(lines)


def fold_batchnorm(conv: LayerSpec, bn: LayerSpec) -> LayerSpec:
    """Return ``conv`` with BN's per-channel affine folded into weights and bias."""
    if conv.kind not in (Kind.CONV2D, Kind.DEPTHWISE_CONV2D):
        raise ShapeError(f"cannot fold batchnorm into {conv.kind.name}")
    p = bn.bn_params
    if p is None:
        raise ParameterError(f"batchnorm node {bn.id} has no parameters")
    channels = output_channels(conv)
    if p.channels != channels:
        raise ShapeError(f"conv {conv.id} has {channels} output channels, batchnorm {bn.id} has {p.channels}")
    denom = p.var.astype(np.float64) + p.eps
    if np.any(denom <= 0):
        raise ParameterError("batchnorm variance + eps must be positive")
    scale = p.gamma.astype(np.float64) / np.sqrt(denom)
    bias = conv.bias.astype(np.float64) if conv.bias is not None else np.zeros(channels)
    new_bias = (p.beta.astype(np.float64) + (bias - p.mean.astype(np.float64)) * scale).astype(FLOAT)

    w = conv.weights
    if isinstance(w, SparseMatrixCSR):
        values = (w.values.astype(np.float64) * scale[w.row_indices()]).astype(FLOAT)
        keep = values != 0  # a zero gamma empties its row; CSR must not store zeros
        rows = w.row_indices()[keep]
        row_ptr = np.zeros(w.rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(rows, minlength=w.rows), out=row_ptr[1:])
        new_w = SparseMatrixCSR(w.rows, w.cols, values[keep], w.col_idx[keep], row_ptr)
    else:
        shape = (-1,) + (1,) * (w.data.ndim - 1)
        new_w = Tensor((w.data.astype(np.float64) * scale.reshape(shape)).astype(FLOAT), w.layout)
    return conv.replace(weights=new_w, bias=new_bias)


def _consumers(g: Graph) -> dict[int, list[int]]:
    out = {n.id: [] for n in g.nodes}
    for a, b in g.edges:
        out[a].append(b)
    return out


def _sole_consumer(g: Graph, consumers, nid: int) -> int | None:
    if nid in g.outputs or len(consumers[nid]) != 1:
        return None
    return consumers[nid][0]


def _replace_chain(g: Graph, chain: list[int], new_node: LayerSpec) -> None:
    """Swap ``chain`` (a linear run of nodes) for ``new_node`` in place."""
    head, members = chain[0], set(chain)
    pos = next(i for i, n in enumerate(g.nodes) if n.id == head)
    g.nodes = [n for n in g.nodes if n.id not in members]
    g.nodes.insert(pos, new_node)
    edges = []
    for a, b in g.edges:
        if a in members and b in members:
            continue
        if b == head:
            b = new_node.id
        if a == chain[-1]:
            a = new_node.id
        edges.append((a, b))
    g.edges = edges


def fuse_conv_bn_act(g: Graph) -> tuple[Graph, FusionReport]:
    """Merge Conv/DepthwiseConv -> [BatchNorm] -> [Activation] runs into FusedConvBnAct.

    Only single-consumer intermediates that are not graph outputs are
    absorbed. The fused node takes the id of the last node it replaces.
    """
    g = g.copy()
    report = FusionReport(nodes_before=len(g.nodes))
    nodes = g.by_id()
    consumers = _consumers(g)
    for nid in topological_order(g):
        conv = nodes.get(nid)
        if conv is None or conv.kind not in (Kind.CONV2D, Kind.DEPTHWISE_CONV2D):
            continue
        chain = [conv.id]
        bn = act = None
        nxt = _sole_consumer(g, consumers, conv.id)
        if nxt is not None and nodes[nxt].kind == Kind.BATCHNORM:
            bn = nodes[nxt]
            chain.append(nxt)
            nxt = _sole_consumer(g, consumers, nxt)
        if nxt is not None and nodes[nxt].kind == Kind.ACTIVATION and nodes[nxt].attrs["act"] in FUSABLE_ACTS:
            act = nodes[nxt]
            chain.append(nxt)
        if len(chain) == 1:
            continue
        core = fold_batchnorm(conv, bn) if bn is not None else conv
        a = conv.attrs
        if conv.kind == Kind.DEPTHWISE_CONV2D:
            attrs = dict(in_channels=a["channels"], out_channels=a["channels"], depthwise=1)
        else:
            attrs = dict(in_channels=a["in_channels"], out_channels=a["out_channels"], depthwise=0)
        attrs.update(kernel_h=a["kernel_h"], kernel_w=a["kernel_w"], stride=a["stride"], padding=a["padding"],
                     act=int(act.attrs["act"]) if act is not None else int(Act.IDENTITY))
        fused = LayerSpec(chain[-1], Kind.FUSED_CONV_BN_ACT, attrs, core.weights, core.bias)
        _replace_chain(g, chain, fused)
        nodes = g.by_id()
        consumers = _consumers(g)
        report.rewrites.append(Rewrite("fuse_conv_bn_act", tuple(chain), fused.id))
    report.nodes_after = len(g.nodes)
    return g, report


def _is_pointwise(node: LayerSpec) -> bool:
    a = node.attrs
    if not (node.kind == Kind.CONV2D or (node.kind == Kind.FUSED_CONV_BN_ACT and not a["depthwise"])):
        return False
    return a["kernel_h"] == 1 and a["kernel_w"] == 1 and a["stride"] == 1 and a["padding"] == 0


def rewrite_pointwise_conv_to_gemm(g: Graph) -> tuple[Graph, FusionReport]:
    """Turn 1x1/stride-1/pad-0 convolutions into per-image (K x C)(C x HW) GEMMs.

    With NCHW activations each image already is a C x HW row-major matrix,
    so no layout adapter is inserted.
    """
    g = g.copy()
    report = FusionReport(nodes_before=len(g.nodes))
    for i, node in enumerate(g.nodes):
        if not _is_pointwise(node):
            continue
        a = node.attrs
        w = node.weights
        if isinstance(w, Tensor):
            w = Tensor(w.data.reshape(a["out_channels"], a["in_channels"]), Layout.ROW_MAJOR_2D)
        act = a.get("act", int(Act.IDENTITY))
        g.nodes[i] = LayerSpec(node.id, Kind.GEMM, dict(m=a["out_channels"], k=a["in_channels"], act=act),
                               w, node.bias)
        report.rewrites.append(Rewrite("pointwise_conv_to_gemm", (node.id,), node.id))
    report.nodes_after = len(g.nodes)
    return g, report


PASSES = (fuse_conv_bn_act, rewrite_pointwise_conv_to_gemm)


def run_fusion_pipeline(g: Graph) -> tuple[Graph, FusionReport]:
    """Apply the passes in fixed order until a round makes no rewrite."""
    report = FusionReport(nodes_before=len(g.nodes))
    while True:
        changed = False
        for p in PASSES:
            g, r = p(g)
            report.extend(r)
            changed |= bool(r.rewrites)
        if not changed:
            break
    report.nodes_after = len(g.nodes)
    return g, report
