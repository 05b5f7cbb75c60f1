"""Weight pruning and quantization by ADMM, plus the small nets it trains."""

from sparsenn.compress.admm import (
    AdmmSchedule, AdmmState, HistoryRow, PruneSpec, QuantSpec, StageResult, admm_compress, check_stages,
    masked_retrain, progressive_compress, project_quantization, project_sparsity, quantize_net, residual_norm,
    train_dense, uniform_levels,
)
from sparsenn.compress.export import export_compressed, net_from_graph
from sparsenn.compress.net import (
    Conv2D, Dataset, Dense, MaxPool2D, ReLU, TrainableNet, build_net, forward_backward, softmax_cross_entropy,
)

__all__ = [
    "AdmmSchedule", "AdmmState", "HistoryRow", "PruneSpec", "QuantSpec", "StageResult", "admm_compress",
    "check_stages", "masked_retrain", "progressive_compress", "project_quantization", "project_sparsity",
    "quantize_net", "residual_norm", "train_dense", "uniform_levels", "export_compressed", "net_from_graph",
    "Conv2D", "Dataset", "Dense", "MaxPool2D", "ReLU", "TrainableNet", "build_net", "forward_backward",
    "softmax_cross_entropy",
]
