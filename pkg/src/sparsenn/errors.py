"""Exception hierarchy shared by every subsystem."""


class SparseNNError(Exception):
    """Base class for all errors raised by sparsenn."""


class ShapeError(SparseNNError, ValueError):
    pass


class FormatError(SparseNNError, ValueError):
    """Malformed on-disk data or violated storage invariants."""


class CorruptionError(FormatError):
    """Data ended early or a blob is truncated."""


class ConsistencyError(SparseNNError, ValueError):
    pass


class UnsupportedError(SparseNNError, NotImplementedError):
    pass


class ParameterError(SparseNNError, ValueError):
    pass


class CycleError(SparseNNError, ValueError):
    pass


class ExecutionError(SparseNNError, RuntimeError):
    def __init__(self, message: str, node_id: int | None = None):
        super().__init__(message if node_id is None else f"node {node_id}: {message}")
        self.node_id = node_id


class TrainingDivergedError(SparseNNError, FloatingPointError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"training diverged at iteration {iteration} (loss={loss})")
        self.iteration = iteration
        self.loss = loss


class FeasibilityError(SparseNNError, ValueError):
    pass


class UsageError(SparseNNError):
    pass
