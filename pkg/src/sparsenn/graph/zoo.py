"""Reference topologies with randomly initialized weights."""

from __future__ import annotations

from collections import Counter

import numpy as np

from sparsenn.errors import ShapeError, UnsupportedError
from sparsenn.graph.ir import (
    Act, BNParams, Graph, Kind, LayerSpec, PoolKind, dense_weight_matrix, infer_node_shape, infer_shapes, make_dense,
    validate_graph,
)
from sparsenn.tensor import Layout, Tensor, csr_from_dense

REFERENCE_MODELS = ("mobilenet_v1", "mobilenet_v2_stub", "lenet5", "lenet_300_100")

# (pointwise output channels, depthwise stride) for the 13 separable blocks
MOBILENET_V1_BLOCKS = [
    (64, 1), (128, 2), (128, 1), (256, 2), (256, 1), (512, 2),
    (512, 1), (512, 1), (512, 1), (512, 1), (512, 1),
    (1024, 2), (1024, 1),
]


class GraphBuilder:
    """Appends nodes with ascending ids, wiring each to the given producer."""

    def __init__(self, seed: int = 0):
        self.rng = np.random.default_rng(seed)
        self.graph = Graph()
        self.shapes: dict[int, tuple[int, ...]] = {}

    def add_node(self, kind: Kind, attrs: dict, inputs: tuple[int, ...] = (), **extra) -> int:
        nid = self.graph.next_id()
        self.graph.nodes.append(LayerSpec(nid, kind, attrs, **extra))
        self.graph.edges.extend((src, nid) for src in inputs)
        self.shapes[nid] = infer_node_shape(self.graph.nodes[-1], [self.shapes[s] for s in inputs])
        return nid

    def input(self, shape: tuple[int, ...]) -> int:
        nid = self.add_node(Kind.INPUT, {"shape": tuple(shape)})
        self.graph.inputs.append(nid)
        return nid

    def _he(self, shape, fan_in) -> np.ndarray:
        return (self.rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    def conv(self, src: int, out_ch: int, k: int, stride: int = 1, padding: int = 0, bias: bool = False) -> int:
        cin = self.shapes[src][1]
        w = self._he((out_ch, cin, k, k), cin * k * k)
        b = (self.rng.standard_normal(out_ch) * 0.05).astype(np.float32) if bias else None
        attrs = dict(in_channels=cin, out_channels=out_ch, kernel_h=k, kernel_w=k, stride=stride, padding=padding)
        return self.add_node(Kind.CONV2D, attrs, (src,), weights=Tensor(w, Layout.NCHW), bias=b)

    def depthwise(self, src: int, k: int, stride: int = 1, padding: int = 0) -> int:
        c = self.shapes[src][1]
        w = self._he((c, 1, k, k), k * k)
        attrs = dict(channels=c, kernel_h=k, kernel_w=k, stride=stride, padding=padding)
        return self.add_node(Kind.DEPTHWISE_CONV2D, attrs, (src,), weights=Tensor(w, Layout.NCHW))

    def batchnorm(self, src: int) -> int:
        c = self.shapes[src][1]
        r = self.rng
        bn = BNParams(
            gamma=r.uniform(0.5, 1.5, c), beta=r.normal(0, 0.1, c),
            mean=r.normal(0, 0.1, c), var=r.uniform(0.5, 1.5, c), eps=1e-5,
        )
        return self.add_node(Kind.BATCHNORM, {"channels": c}, (src,), bn_params=bn)

    def act(self, src: int, act: Act) -> int:
        return self.add_node(Kind.ACTIVATION, {"act": int(act)}, (src,))

    def pool(self, src: int, kind: PoolKind, window: int, stride: int) -> int:
        return self.add_node(Kind.POOL, {"pool": int(kind), "window": window, "stride": stride}, (src,))

    def fc(self, src: int, out: int) -> int:
        fan_in = int(np.prod(self.shapes[src][1:]))
        w = self._he((out, fan_in), fan_in)
        b = (self.rng.standard_normal(out) * 0.05).astype(np.float32)
        attrs = dict(in_features=fan_in, out_features=out)
        return self.add_node(Kind.FULLY_CONNECTED, attrs, (src,), weights=Tensor(w, Layout.ROW_MAJOR_2D), bias=b)

    def add(self, a: int, b: int) -> int:
        return self.add_node(Kind.ADD, {}, (a, b))

    def conv_bn_act(self, src, out_ch, k, stride=1, padding=0, act: Act | None = Act.RELU6) -> int:
        x = self.batchnorm(self.conv(src, out_ch, k, stride, padding))
        return x if act is None else self.act(x, act)

    def dw_bn_act(self, src, k=3, stride=1, act: Act = Act.RELU6) -> int:
        return self.act(self.batchnorm(self.depthwise(src, k, stride, k // 2)), act)

    def finish(self, *outputs: int) -> Graph:
        self.graph.outputs = list(outputs)
        diags = validate_graph(self.graph)
        if diags:
            raise ShapeError("reference graph failed validation: " + "; ".join(map(str, diags)))
        return self.graph


def mobilenet_v1(resolution: int = 224, classes: int = 1000, batch: int = 1, seed: int = 0,
                 softmax: bool = True) -> Graph:
    if resolution % 32:
        raise ShapeError("mobilenet_v1 resolution must be a multiple of 32")
    b = GraphBuilder(seed)
    x = b.input((batch, 3, resolution, resolution))
    x = b.conv_bn_act(x, 32, 3, stride=2, padding=1)
    for out_ch, stride in MOBILENET_V1_BLOCKS:
        x = b.dw_bn_act(x, 3, stride)
        x = b.conv_bn_act(x, out_ch, 1)
    x = b.pool(x, PoolKind.AVG, resolution // 32, 1)
    x = b.fc(x, classes)
    if softmax:
        x = b.act(x, Act.SOFTMAX)
    return b.finish(x)


def mobilenet_v2_stub(resolution: int = 64, classes: int = 10, batch: int = 1, seed: int = 0) -> Graph:
    """First stages of an inverted-residual network (linear bottlenecks with skip adds)."""
    b = GraphBuilder(seed)
    x = b.input((batch, 3, resolution, resolution))
    x = b.conv_bn_act(x, 32, 3, stride=2, padding=1)
    cin = 32
    for expand, cout, stride in [(1, 16, 1), (6, 24, 2), (6, 24, 1), (6, 32, 2), (6, 32, 1)]:
        h = x
        if expand != 1:
            h = b.conv_bn_act(h, cin * expand, 1)
        h = b.dw_bn_act(h, 3, stride)
        h = b.conv_bn_act(h, cout, 1, act=None)
        x = b.add(x, h) if stride == 1 and cin == cout else h
        cin = cout
    x = b.conv_bn_act(x, 128, 1)
    x = b.pool(x, PoolKind.AVG, b.shapes[x][2], 1)
    return b.finish(b.fc(x, classes))


def lenet5(classes: int = 10, batch: int = 1, seed: int = 0) -> Graph:
    b = GraphBuilder(seed)
    x = b.input((batch, 1, 28, 28))
    x = b.act(b.conv(x, 6, 5, padding=2, bias=True), Act.RELU)
    x = b.pool(x, PoolKind.MAX, 2, 2)
    x = b.act(b.conv(x, 16, 5, bias=True), Act.RELU)
    x = b.pool(x, PoolKind.MAX, 2, 2)
    x = b.act(b.fc(x, 120), Act.RELU)
    x = b.act(b.fc(x, 84), Act.RELU)
    return b.finish(b.fc(x, classes))


def lenet_300_100(classes: int = 10, batch: int = 1, seed: int = 0) -> Graph:
    b = GraphBuilder(seed)
    x = b.input((batch, 784))
    x = b.act(b.fc(x, 300), Act.RELU)
    x = b.act(b.fc(x, 100), Act.RELU)
    return b.finish(b.fc(x, classes))


_BUILDERS = {
    "mobilenet_v1": mobilenet_v1,
    "mobilenet_v2_stub": mobilenet_v2_stub,
    "lenet5": lenet5,
    "lenet_300_100": lenet_300_100,
}


def build_reference_graph(name: str, **kwargs) -> Graph:
    try:
        builder = _BUILDERS[name]
    except KeyError:
        raise UnsupportedError(f"unknown reference model {name!r}; choose from {REFERENCE_MODELS}") from None
    return builder(**kwargs)


def layer_breakdown(g: Graph) -> Counter:
    return Counter(n.kind.name for n in g.nodes)


def count_layers(g: Graph) -> int:
    """Layer count used for model-size comparisons.

    Every node is one layer, except BatchNorm nodes and relu/relu6/identity
    activations: those are tallied on their own by ``layer_breakdown``
    because deployment folds them into the producing convolution. The input
    node and a terminal softmax count as layers.
    """
    skip = 0
    for n in g.nodes:
        if n.kind == Kind.BATCHNORM:
            skip += 1
        elif n.kind == Kind.ACTIVATION and n.attrs["act"] != Act.SOFTMAX:
            skip += 1
    return len(g.nodes) - skip


def input_shape(g: Graph) -> tuple[int, ...]:
    return tuple(g.node(g.inputs[0]).attrs["shape"])


def output_shape(g: Graph) -> tuple[int, ...]:
    return infer_shapes(g)[g.outputs[0]]


def _prunable(node: LayerSpec) -> bool:
    return node.weights is not None and node.kind in (Kind.CONV2D, Kind.FULLY_CONNECTED, Kind.GEMM) or (
        node.kind == Kind.FUSED_CONV_BN_ACT and not node.attrs["depthwise"])


def sparsify_graph(g: Graph, sparsity: float) -> Graph:
    """Magnitude-prune every conv/FC/GEMM weight matrix and store it as CSR.

    Depthwise filters stay dense. Ties in magnitude keep the lowest index.
    """
    if not 0.0 <= sparsity < 1.0:
        raise ShapeError(f"sparsity must be in [0, 1), got {sparsity}")
    g = g.copy()
    for i, node in enumerate(g.nodes):
        if not _prunable(node):
            continue
        w = dense_weight_matrix(node)
        keep = max(1, int(round(w.size * (1.0 - sparsity))))
        flat = w.reshape(-1)
        idx = np.argsort(-np.abs(flat), kind="stable")[:keep]
        pruned = np.zeros_like(flat)
        pruned[idx] = flat[idx]
        g.nodes[i] = node.replace(weights=csr_from_dense(pruned.reshape(w.shape)))
    return g


def densify_graph(g: Graph) -> Graph:
    """Same graph with every CSR weight stored densely in its natural shape."""
    g = g.copy()
    for i, node in enumerate(g.nodes):
        if node.is_sparse:
            w = dense_weight_matrix(node)
            a = node.attrs
            if node.kind in (Kind.CONV2D, Kind.FUSED_CONV_BN_ACT):
                w = w.reshape(a["out_channels"], a["in_channels"], a["kernel_h"], a["kernel_w"])
            g.nodes[i] = node.replace(weights=make_dense(w))
    return g
