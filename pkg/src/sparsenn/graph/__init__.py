"""Layer-graph IR, persistence, and reference topologies."""

from sparsenn.graph.ir import (
    ARITY,
    ATTR_FIELDS,
    Act,
    BNParams,
    Diagnostic,
    Graph,
    Kind,
    LayerSpec,
    PoolKind,
    infer_shapes,
    topological_order,
    validate_graph,
)
from sparsenn.graph.serialize import dumps, load_model, loads, save_model
from sparsenn.graph.zoo import (
    REFERENCE_MODELS, build_reference_graph, count_layers, densify_graph, layer_breakdown,
    sparsify_graph,
)

__all__ = [
    "ARITY", "ATTR_FIELDS", "Act", "BNParams", "Diagnostic", "Graph", "Kind", "LayerSpec", "PoolKind",
    "infer_shapes", "topological_order", "validate_graph", "dumps", "load_model", "loads", "save_model",
    "REFERENCE_MODELS", "build_reference_graph", "count_layers", "layer_breakdown",
    "densify_graph", "sparsify_graph",
]
