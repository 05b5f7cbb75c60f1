"""Conversion between trainable nets and executable graphs."""

from __future__ import annotations

import numpy as np

from sparsenn.compress.admm import Spec
from sparsenn.compress.net import Conv2D, Dense, MaxPool2D, ReLU, TrainableNet
from sparsenn.errors import FeasibilityError, UnsupportedError
from sparsenn.graph.ir import Act, Graph, Kind, PoolKind, topological_order
from sparsenn.graph.zoo import GraphBuilder
from sparsenn.tensor import FLOAT, Layout, SparseMatrixCSR, Tensor, csr_from_dense, csr_to_dense

SPARSE_THRESHOLD = 0.5


def _weights(w: np.ndarray, layout: Layout, sparse_threshold: float):
    w = w.astype(FLOAT)
    sparsity = 1.0 - np.count_nonzero(w) / w.size
    if sparsity >= sparse_threshold:
        return csr_from_dense(w.reshape(w.shape[0], -1))
    return Tensor(w, layout)


def export_compressed(net: TrainableNet, spec: Spec | None = None, *, batch: int = 1, softmax: bool = False,
                      sparse_threshold: float = SPARSE_THRESHOLD) -> Graph:
    """Graph for ``net``'s logits (or probabilities with ``softmax``).

    Weight matrices at least ``sparse_threshold`` sparse are stored as CSR.
    With ``spec`` given, every weight layer must satisfy it.
    """
    if spec is not None:
        for i, w in enumerate(net.weights()):
            if not spec.satisfied(i, w):
                raise FeasibilityError(f"weight layer {i} violates its compression constraint")
    b = GraphBuilder()
    x = b.input((batch,) + net.input_shape)
    for layer in net.layers:
        if isinstance(layer, Dense):
            out_f, in_f = layer.w.shape
            attrs = dict(in_features=in_f, out_features=out_f)
            x = b.add_node(Kind.FULLY_CONNECTED, attrs, (x,), weights=_weights(layer.w, Layout.ROW_MAJOR_2D,
                                                                             sparse_threshold),
                           bias=layer.b.astype(FLOAT))
        elif isinstance(layer, Conv2D):
            k, c, kh, kw = layer.w.shape
            attrs = dict(in_channels=c, out_channels=k, kernel_h=kh, kernel_w=kw, stride=layer.stride,
                         padding=layer.padding)
            x = b.add_node(Kind.CONV2D, attrs, (x,), weights=_weights(layer.w, Layout.NCHW, sparse_threshold),
                           bias=layer.b.astype(FLOAT))
        elif isinstance(layer, ReLU):
            x = b.act(x, Act.RELU)
        elif isinstance(layer, MaxPool2D):
            x = b.pool(x, PoolKind.MAX, layer.window, layer.stride)
        else:
            raise UnsupportedError(f"cannot export layer {type(layer).__name__}")
    if softmax:
        x = b.act(x, Act.SOFTMAX)
    return b.finish(x)


def _dense_array(w) -> np.ndarray:
    if isinstance(w, SparseMatrixCSR):
        return csr_to_dense(w).data
    return w.data


def net_from_graph(g: Graph, dtype=np.float32) -> TrainableNet:
    """Rebuild a trainable net from a linear chain of FC/conv/ReLU/max-pool nodes."""
    nodes = g.by_id()
    order = topological_order(g)
    if len(g.inputs) != 1 or any(len(g.successors(n)) > 1 for n in order):
        raise UnsupportedError("only single-input linear chains can be trained")
    layers = []
    classes = None
    for nid in order:
        node = nodes[nid]
        a = node.attrs
        if node.kind == Kind.INPUT:
            input_shape = tuple(a["shape"][1:])
        elif node.kind == Kind.FULLY_CONNECTED:
            w = _dense_array(node.weights).reshape(a["out_features"], a["in_features"]).astype(dtype)
            b = node.bias if node.bias is not None else np.zeros(a["out_features"])
            layers.append(Dense(w.copy(), np.array(b, dtype=dtype)))
            classes = a["out_features"]
        elif node.kind == Kind.CONV2D:
            shape = (a["out_channels"], a["in_channels"], a["kernel_h"], a["kernel_w"])
            w = _dense_array(node.weights).reshape(shape).astype(dtype)
            b = node.bias if node.bias is not None else np.zeros(a["out_channels"])
            layers.append(Conv2D(w.copy(), np.array(b, dtype=dtype), a["stride"], a["padding"]))
            classes = a["out_channels"]
        elif node.kind == Kind.ACTIVATION and a["act"] == Act.RELU:
            layers.append(ReLU())
        elif node.kind == Kind.ACTIVATION and a["act"] in (Act.SOFTMAX, Act.IDENTITY) and nid in g.outputs:
            continue  # the loss head supplies the softmax
        elif node.kind == Kind.POOL and a["pool"] == PoolKind.MAX:
            layers.append(MaxPool2D(a["window"], a["stride"]))
        else:
            raise UnsupportedError(f"node {nid} ({node.kind.name}) has no trainable counterpart")
    if classes is None:
        raise UnsupportedError("graph has no weight layers")
    return TrainableNet(layers, input_shape, classes)
