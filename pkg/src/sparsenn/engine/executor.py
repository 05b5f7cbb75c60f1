"""Graph executor: topological scheduling, kernel dispatch, buffer reuse."""

from __future__ import annotations

import time
from collections import defaultdict
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from sparsenn.engine.kernels import (
    DEFAULT_CONFIG,
    KernelConfig,
    LoadCounter,
    ShapeKey,
    depthwise_conv2d,
    elementwise,
    gemm_tiled,
    pack_weights_tiled,
    pool2d,
    set_threads,
    sparsity_bucket,
    spmm_csr_tiled,
)
from sparsenn.errors import ExecutionError, ShapeError
from sparsenn.graph.ir import Act, Graph, Kind, LayerSpec, PoolKind, infer_shapes, topological_order, validate_graph
from sparsenn.tensor import FLOAT, Layout, SparseMatrixCSR, Tensor, conv_output_size, im2col_array

_ACT_NAMES = {Act.IDENTITY: "identity", Act.RELU: "relu", Act.RELU6: "relu6", Act.SOFTMAX: "softmax"}


class ConfigSource(Protocol):
    def lookup(self, key: ShapeKey) -> KernelConfig | None: ...


@dataclass
class ProfileRecord:
    node_id: int
    kind: str
    micros: float
    weight_loads: int

    def line(self) -> str:
        return f"{self.node_id}\t{self.kind}\t{self.micros:.1f}\t{self.weight_loads}"


class BufferPool:
    """Recycles dead activation buffers by shape."""

    def __init__(self):
        self.free: dict[tuple[int, ...], list[np.ndarray]] = defaultdict(list)
        self.allocated = 0
        self.reused = 0

    def get(self, shape: tuple[int, ...]) -> np.ndarray:
        bucket = self.free.get(tuple(shape))
        if bucket:
            self.reused += 1
            return bucket.pop()
        self.allocated += 1
        return np.empty(shape, dtype=FLOAT)

    def release(self, arr: np.ndarray) -> None:
        root = arr
        while root.base is not None and isinstance(root.base, np.ndarray):
            root = root.base
        if root.base is None and root.dtype == FLOAT and root.flags.writeable:
            self.free[root.shape].append(root)


@dataclass
class _WeightPlan:
    matrix: np.ndarray | SparseMatrixCSR | None = None
    sparsity: float = 0.0
    packed: dict | None = None
    bn_scale: np.ndarray | None = None
    bn_shift: np.ndarray | None = None


def _act_of(node: LayerSpec) -> str:
    return _ACT_NAMES[Act(node.attrs.get("act", Act.IDENTITY))]


class Executor:
    """Runs a validated graph repeatedly; weights are prepared once."""

    def __init__(self, g: Graph, cache: ConfigSource | None = None, threads: int | None = None,
                 validate: bool = True):
        if validate:
            diags = validate_graph(g)
            if diags:
                raise ExecutionError("graph failed validation: " + "; ".join(map(str, diags)))
        if threads is not None:
            set_threads(threads)
        self.graph = g
        self.cache = cache
        self.order = topological_order(g)
        self.shapes = infer_shapes(g, self.order)
        self.nodes = g.by_id()
        self.preds = {nid: g.predecessors(nid) for nid in self.order}
        self.consumers = g.consumer_counts()
        self.plans = {nid: self._plan(self.nodes[nid]) for nid in self.order}
        self.pool = BufferPool()

    def _plan(self, node: LayerSpec) -> _WeightPlan:
        plan = _WeightPlan()
        w = node.weights
        if isinstance(w, SparseMatrixCSR):
            plan.matrix = w.without_pack()
            plan.sparsity = w.sparsity
            plan.packed = {}
        elif isinstance(w, Tensor):
            plan.matrix = np.ascontiguousarray(w.data.reshape(w.dims[0], -1))
        if node.kind == Kind.BATCHNORM:
            p = node.bn_params
            scale = p.gamma.astype(np.float64) / np.sqrt(p.var.astype(np.float64) + p.eps)
            plan.bn_scale = scale.astype(FLOAT)
            plan.bn_shift = (p.beta - p.mean * scale).astype(FLOAT)
        return plan

    # -- kernel dispatch -------------------------------------------------

    def _config(self, key: ShapeKey) -> KernelConfig:
        if self.cache is not None:
            cfg = self.cache.lookup(key)
            if cfg is not None:
                return cfg
        return DEFAULT_CONFIG

    def _matmul(self, plan: _WeightPlan, x: np.ndarray, out: np.ndarray, counter) -> np.ndarray:
        """out = W @ x through the tuned dense or sparse kernel."""
        w = plan.matrix
        m, k = w.shape
        sparse = isinstance(w, SparseMatrixCSR)
        key = ShapeKey("spmm" if sparse else "gemm", m, x.shape[1], k, sparsity_bucket(plan.sparsity))
        cfg = self._config(key)
        if not sparse:
            return gemm_tiled(w, x, cfg, counter, out=out)
        tiles = (cfg.tile_m, cfg.tile_k)
        packed = plan.packed.get(tiles)
        if packed is None:
            packed = plan.packed[tiles] = pack_weights_tiled(w, cfg)
        return spmm_csr_tiled(packed, x, cfg, counter, out=out)

    def _conv(self, node: LayerSpec, plan: _WeightPlan, x: np.ndarray, counter) -> np.ndarray:
        a = node.attrs
        n = x.shape[0]
        kout = a["out_channels"]
        ho = conv_output_size(x.shape[2], a["kernel_h"], a["stride"], a["padding"])
        wo = conv_output_size(x.shape[3], a["kernel_w"], a["stride"], a["padding"])
        cols = im2col_array(x, a["kernel_h"], a["kernel_w"], a["stride"], a["padding"])
        y = self._matmul(plan, cols, self.pool.get((kout, n * ho * wo)), counter)
        if n == 1:
            return y.reshape(1, kout, ho, wo)
        out = self.pool.get((n, kout, ho, wo))
        out[...] = y.reshape(kout, n, ho, wo).transpose(1, 0, 2, 3)
        self.pool.release(y)
        return out

    def _epilogue(self, node: LayerSpec, y: np.ndarray) -> np.ndarray:
        if node.bias is not None:
            shape = (1, -1) + (1,) * (y.ndim - 2)
            y += node.bias.reshape(shape)
        act = _act_of(node)
        if act != "identity":
            elementwise(act, y, out=y)
        return y

    def _run_node(self, node: LayerSpec, ins: list[np.ndarray], counter) -> np.ndarray:
        k = node.kind
        plan = self.plans[node.id]
        if k in (Kind.CONV2D, Kind.DEPTHWISE_CONV2D, Kind.FUSED_CONV_BN_ACT):
            x = ins[0]
            if k == Kind.DEPTHWISE_CONV2D or node.attrs.get("depthwise"):
                a = node.attrs
                shape = self._batch_shape(node.id, x.shape[0])
                y = depthwise_conv2d(x, node.weights.data, None, a["stride"], a["padding"], counter,
                                     out=self.pool.get(shape))
            else:
                y = self._conv(node, plan, x, counter)
            return self._epilogue(node, y)
        if k == Kind.GEMM:
            x = ins[0]
            n, c, h, w = x.shape
            out = self.pool.get((n, node.attrs["m"], h, w))
            for i in range(n):
                self._matmul(plan, x[i].reshape(c, h * w), out[i].reshape(node.attrs["m"], h * w), counter)
            return self._epilogue(node, out)
        if k == Kind.FULLY_CONNECTED:
            x = ins[0]
            xt = np.ascontiguousarray(x.reshape(x.shape[0], -1).T)
            y = self._matmul(plan, xt, self.pool.get((node.attrs["out_features"], x.shape[0])), counter)
            out = self.pool.get((x.shape[0], node.attrs["out_features"]))
            out[...] = y.T
            self.pool.release(y)
            return self._epilogue(node, out)
        if k == Kind.BATCHNORM:
            x = ins[0]
            shape = (1, -1) + (1,) * (x.ndim - 2)
            out = self.pool.get(x.shape)
            np.multiply(x, plan.bn_scale.reshape(shape), out=out)
            out += plan.bn_shift.reshape(shape)
            return out
        if k == Kind.ACTIVATION:
            return elementwise(_act_of(node), ins[0], out=self.pool.get(ins[0].shape))
        if k == Kind.POOL:
            a = node.attrs
            kind = "max" if a["pool"] == PoolKind.MAX else "avg"
            return pool2d(ins[0], kind, a["window"], a["stride"])
        if k == Kind.ADD:
            return elementwise("add", ins[0], ins[1], out=self.pool.get(ins[0].shape))
        raise ExecutionError(f"no kernel for {k.name}", node.id)

    def _batch_shape(self, nid: int, batch: int) -> tuple[int, ...]:
        return (batch,) + tuple(self.shapes[nid][1:])

    # -- driver ------------------------------------------------------------

    def run(self, x, profile: list[ProfileRecord] | None = None) -> Tensor:
        """Execute on ``x`` (batch size may differ from the declared one).

        With ``profile`` given, instrumented kernels run and one record per
        node is appended.
        """
        arr = x.data if isinstance(x, Tensor) else np.asarray(x)
        arr = np.ascontiguousarray(arr, dtype=FLOAT)
        in_id = self.graph.inputs[0]
        declared = self.shapes[in_id]
        if arr.ndim != len(declared) or tuple(arr.shape[1:]) != tuple(declared[1:]):
            raise ExecutionError(f"input shape {arr.shape} does not match declared {declared}", in_id)
        batch = arr.shape[0]
        remaining = dict(self.consumers)
        keep = set(self.graph.outputs)
        values: dict[int, np.ndarray] = {}
        for nid in self.order:
            node = self.nodes[nid]
            if node.kind == Kind.INPUT:
                values[nid] = arr
                continue
            ins = [values[p] for p in self.preds[nid]]
            counter = LoadCounter() if profile is not None else None
            t0 = time.perf_counter()
            try:
                out = self._run_node(node, ins, counter)
            except ShapeError as exc:
                raise ExecutionError(str(exc), nid) from exc
            elapsed = time.perf_counter() - t0
            expected = self._batch_shape(nid, batch)
            if out.shape != expected:
                raise ExecutionError(f"produced shape {out.shape}, expected {expected}", nid)
            values[nid] = out
            if profile is not None:
                kind = node.kind.name + ("/csr" if node.is_sparse else "")
                profile.append(ProfileRecord(nid, kind, elapsed * 1e6, counter.weight_loads))
            for p in self.preds[nid]:
                remaining[p] -= 1
                if remaining[p] == 0 and p not in keep:
                    dead = values.pop(p)
                    if self.nodes[p].kind != Kind.INPUT:
                        self.pool.release(dead)
        result = values[self.graph.outputs[0]]
        layout = Layout.NCHW if result.ndim == 4 else Layout.ROW_MAJOR_2D
        tensor = Tensor(result.copy(), layout)
        for nid, v in values.items():
            if self.nodes[nid].kind != Kind.INPUT:
                self.pool.release(v)
        return tensor


def execute_graph(g: Graph, x, cache: ConfigSource | None = None, *, threads: int | None = None,
                  profile: list[ProfileRecord] | None = None) -> Tensor:
    return Executor(g, cache, threads).run(x, profile)
