"""Execution kernels and the graph executor."""

from sparsenn.engine.kernels import (
    DEFAULT_CONFIG,
    LOOP_ORDERS,
    KernelConfig,
    LoadCounter,
    ShapeKey,
    conv2d_direct,
    conv2d_gemm,
    depthwise_conv2d,
    elementwise,
    gemm_naive,
    gemm_tiled,
    pack_weights_tiled,
    pool2d,
    rel_error,
    set_threads,
    sparsity_bucket,
    spmm_csr_tiled,
    spmm_elementwise_baseline,
)
from sparsenn.engine.executor import BufferPool, Executor, ProfileRecord, execute_graph
