"""ADMM weight pruning and quantization with masked retraining.

Scaled-form ADMM on min f(x) s.t. x in S:

    x <- argmin f(x) + rho/2 ||x - z + u||^2     (E epochs of SGD)
    z <- proj_S(x + u)                           (closed form)
    u <- u + x - z

rho grows geometrically across outer iterations. Constraints apply to
weight matrices only; biases are left free.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from sparsenn.compress.net import Dataset, TrainableNet, forward_backward
from sparsenn.errors import ParameterError, ShapeError, TrainingDivergedError


# -- projections ---------------------------------------------------------

def project_sparsity(w: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest magnitudes (ties to the lowest flat index), zero the rest."""
    w = np.asarray(w)
    if not 0 < k <= w.size:
        raise ParameterError(f"retain count {k} outside (0, {w.size}]")
    flat = w.reshape(-1)
    keep = np.argsort(-np.abs(flat), kind="stable")[:k]
    out = np.zeros_like(flat)
    out[keep] = flat[keep]
    return out.reshape(w.shape)


def project_quantization(w: np.ndarray, levels) -> np.ndarray:
    """Map each entry to its nearest level; exact midpoints go to the smaller-magnitude level."""
    levels = np.unique(np.asarray(levels, dtype=np.float64))
    if levels.size == 0:
        raise ParameterError("quantization level set is empty")
    w = np.asarray(w)
    x = w.astype(np.float64)
    hi_i = np.clip(np.searchsorted(levels, x), 1, levels.size - 1) if levels.size > 1 else np.zeros(x.shape, int)
    lo_i = np.maximum(hi_i - 1, 0)
    lo, hi = levels[lo_i], levels[hi_i]
    d_lo, d_hi = np.abs(x - lo), np.abs(hi - x)
    # on a tie prefer the smaller magnitude (then the lower value)
    pick_hi = (d_hi < d_lo) | ((d_hi == d_lo) & (np.abs(hi) < np.abs(lo)))
    return np.where(pick_hi, hi, lo).astype(w.dtype)


def uniform_levels(w: np.ndarray, bits: int) -> tuple[np.ndarray, float]:
    """Symmetric uniform level set (always containing 0) and its step size."""
    if bits < 2:
        raise ParameterError("need at least 2 bits for a symmetric level set")
    q = 2 ** (bits - 1) - 1
    amax = float(np.max(np.abs(w))) if w.size else 0.0
    scale = np.float32(amax / q)
    if scale == 0:
        return np.zeros(1), 0.0
    levels = np.unique(np.arange(-q, q + 1, dtype=np.float32) * scale).astype(np.float64)
    return levels, float(scale)


# -- constraint specs ------------------------------------------------------

@dataclass(frozen=True)
class PruneSpec:
    """At most ``retain_k[i]`` nonzeros in weight layer ``i``."""

    retain_k: tuple[int, ...]

    @classmethod
    def from_keep_fraction(cls, net: TrainableNet, keep) -> "PruneSpec":
        ws = net.weights()
        fracs = [keep] * len(ws) if np.isscalar(keep) else list(keep)
        if len(fracs) != len(ws):
            raise ParameterError(f"need {len(ws)} keep fractions, got {len(fracs)}")
        return cls(tuple(max(1, int(round(w.size * f))) for w, f in zip(ws, fracs)))

    def validate(self, net: TrainableNet) -> None:
        ws = net.weights()
        if len(self.retain_k) != len(ws):
            raise ParameterError(f"spec covers {len(self.retain_k)} layers, net has {len(ws)}")
        for k, w in zip(self.retain_k, ws):
            if not 0 < k <= w.size:
                raise ParameterError(f"retain_k {k} outside (0, {w.size}]")

    def project(self, i: int, w: np.ndarray) -> np.ndarray:
        return project_sparsity(w, self.retain_k[i])

    def satisfied(self, i: int, w: np.ndarray) -> bool:
        return int(np.count_nonzero(w)) <= self.retain_k[i]


@dataclass(frozen=True, eq=False)
class QuantSpec:
    """Each weight of layer ``i`` takes a value in ``levels[i]``.

    With ``masks`` set, entries outside the mask are pinned to zero, so a
    previously pruned support survives quantization.
    """

    levels: tuple[np.ndarray, ...]
    bits: int = 0
    scales: tuple[float, ...] = ()
    masks: tuple[np.ndarray, ...] | None = None

    @classmethod
    def uniform(cls, net: TrainableNet, bits: int, keep_zeros: bool = True) -> "QuantSpec":
        ws = net.weights()
        pairs = [uniform_levels(w, bits) for w in ws]
        masks = tuple(w != 0 for w in ws) if keep_zeros else None
        return cls(tuple(p[0] for p in pairs), bits, tuple(p[1] for p in pairs), masks)

    def validate(self, net: TrainableNet) -> None:
        ws = net.weights()
        if len(self.levels) != len(ws):
            raise ParameterError(f"spec covers {len(self.levels)} layers, net has {len(ws)}")
        for lv in self.levels:
            if lv.size == 0 or np.any(np.diff(lv) <= 0):
                raise ParameterError("levels must be non-empty, sorted and distinct")
        if self.masks is not None and any(m.shape != w.shape for m, w in zip(self.masks, ws)):
            raise ShapeError("quantization mask shape differs from weights")

    def project(self, i: int, w: np.ndarray) -> np.ndarray:
        out = project_quantization(w, self.levels[i])
        if self.masks is not None:
            out = out * self.masks[i]
        return out

    def satisfied(self, i: int, w: np.ndarray) -> bool:
        ok = bool(np.all(np.isin(w.astype(np.float64), self.levels[i])))
        if self.masks is not None:
            ok = ok and not np.any(w[~self.masks[i]])
        return ok


Spec = PruneSpec | QuantSpec


# -- training --------------------------------------------------------------

@dataclass(frozen=True)
class AdmmSchedule:
    rho0: float = 1e-3
    rho_factor: float = 10.0
    stages: int = 3
    epochs: int = 5
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 64
    seed: int = 0

    def rhos(self) -> list[float]:
        return [self.rho0 * self.rho_factor ** i for i in range(self.stages)]


@dataclass
class AdmmState:
    spec: Spec
    z: list[np.ndarray]
    u: list[np.ndarray]
    rho: float


@dataclass
class HistoryRow:
    iteration: int
    rho: float
    loss: float
    residual: float
    accuracy: float


def _sgd(net: TrainableNet, data: Dataset, epochs: int, lr: float, momentum: float, batch_size: int,
         rng: np.random.Generator, penalty=None, masks=None, quantize=None) -> float:
    """Minibatch SGD with momentum; returns the mean data loss of the last epoch.

    penalty: (targets, rho) adds rho * (w - target) to each weight gradient.
    masks:   weight gradients and velocities are zeroed outside the mask.
    quantize: callable(i, w) -> w; trains float shadow weights and runs the
              forward pass on their quantized image (straight-through).
    """
    layers = net.param_layers()
    vel = [(np.zeros_like(l.w), np.zeros_like(l.b)) for l in layers]
    shadow = [l.w.copy() for l in layers] if quantize else None
    n = len(data.x_train)
    loss = 0.0
    for _ in range(epochs):
        perm = rng.permutation(n)
        total, batches = 0.0, 0
        for s in range(0, n, batch_size):
            idx = perm[s:s + batch_size]
            if quantize:
                for i, l in enumerate(layers):
                    l.w[...] = quantize(i, shadow[i])
            batch_loss, grads = forward_backward(net, data.x_train[idx], data.y_train[idx])
            if not math.isfinite(batch_loss):
                return batch_loss
            total += batch_loss
            batches += 1
            for i, (l, (gw, gb), (vw, vb)) in enumerate(zip(layers, grads, vel)):
                if penalty is not None:
                    targets, rho = penalty
                    gw = gw + rho * (l.w - targets[i])
                if masks is not None:
                    gw = gw * masks[i]
                vw *= momentum
                vw += gw
                vb *= momentum
                vb += gb
                (shadow[i] if quantize else l.w)[...] -= lr * vw
                l.b -= lr * vb
                if masks is not None and not quantize:
                    l.w *= masks[i]
        loss = total / max(batches, 1)
    if quantize:
        for i, l in enumerate(layers):
            l.w[...] = quantize(i, shadow[i])
    return loss


def train_dense(net: TrainableNet, data: Dataset, epochs: int, lr: float = 0.01, seed: int = 0, *,
                momentum: float = 0.9, batch_size: int = 64) -> tuple[TrainableNet, float]:
    """Plain training from the given initialization; returns (net, held-out accuracy)."""
    net = net.copy()
    loss = _sgd(net, data, epochs, lr, momentum, batch_size, np.random.default_rng(seed))
    if not math.isfinite(loss):
        raise TrainingDivergedError(0, loss)
    return net, net.accuracy(data.x_test, data.y_test)


def residual_norm(net: TrainableNet, z: list[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum((w.astype(np.float64) - zi) ** 2)) for w, zi in zip(net.weights(), z)))


def admm_compress(net: TrainableNet, spec: Spec, data: Dataset, schedule: AdmmSchedule = AdmmSchedule(),
                  ) -> tuple[TrainableNet, AdmmState, list[HistoryRow]]:
    net = net.copy()
    spec.validate(net)
    layers = net.param_layers()
    z = [spec.project(i, l.w) for i, l in enumerate(layers)]
    u = [np.zeros_like(l.w) for l in layers]
    state = AdmmState(spec, z, u, schedule.rho0)
    history = []
    for it, rho in enumerate(schedule.rhos()):
        state.rho = rho
        targets = [zi - ui for zi, ui in zip(state.z, state.u)]
        rng = np.random.default_rng([schedule.seed, it])
        loss = _sgd(net, data, schedule.epochs, schedule.lr, schedule.momentum, schedule.batch_size, rng,
                    penalty=(targets, rho))
        if not math.isfinite(loss):
            raise TrainingDivergedError(it, loss)
        for i, l in enumerate(layers):
            state.z[i] = spec.project(i, l.w + state.u[i])
            state.u[i] = state.u[i] + (l.w - state.z[i])
        history.append(HistoryRow(it, rho, loss, residual_norm(net, state.z),
                                  net.accuracy(data.x_test, data.y_test)))
    return net, state, history


def masked_retrain(net: TrainableNet, state: AdmmState, data: Dataset, epochs: int, *, lr: float = 0.01,
                   momentum: float = 0.9, batch_size: int = 64, seed: int = 0) -> TrainableNet:
    """Hard-map weights onto the constraint set, then fine-tune without leaving it."""
    net = net.copy()
    layers = net.param_layers()
    rng = np.random.default_rng([seed, 1 << 20])
    spec = state.spec
    if isinstance(spec, PruneSpec):
        masks = [zi != 0 for zi in state.z]
        for l, m in zip(layers, masks):
            l.w *= m
        _sgd(net, data, epochs, lr, momentum, batch_size, rng, masks=masks)
    else:
        for l, zi in zip(layers, state.z):
            l.w[...] = zi
        masks = list(spec.masks) if spec.masks is not None else None
        _sgd(net, data, epochs, lr, momentum, batch_size, rng, masks=masks, quantize=spec.project)
    return net


@dataclass
class StageResult:
    spec: Spec
    history: list[HistoryRow]
    accuracy: float


def check_stages(stages: list[PruneSpec]) -> None:
    if not stages:
        raise ParameterError("no compression stages given")
    for prev, cur in zip(stages, stages[1:]):
        if len(prev.retain_k) != len(cur.retain_k) or any(b > a for a, b in zip(prev.retain_k, cur.retain_k)):
            raise ParameterError("stages must be monotonically tighter (retain_k non-increasing per layer)")


def progressive_compress(net: TrainableNet, stages: list[PruneSpec], data: Dataset,
                         schedule: AdmmSchedule = AdmmSchedule(), retrain_epochs: int = 5,
                         results: list[StageResult] | None = None) -> TrainableNet:
    """ADMM + masked retraining per stage, each stage starting from the last one's output."""
    check_stages(stages)
    for spec in stages:
        net, state, history = admm_compress(net, spec, data, schedule)
        net = masked_retrain(net, state, data, retrain_epochs, lr=schedule.lr, momentum=schedule.momentum,
                             batch_size=schedule.batch_size, seed=schedule.seed)
        if results is not None:
            results.append(StageResult(spec, history, net.accuracy(data.x_test, data.y_test)))
    return net


def quantize_net(net: TrainableNet, bits: int, data: Dataset, schedule: AdmmSchedule = AdmmSchedule(),
                 retrain_epochs: int = 3) -> tuple[TrainableNet, QuantSpec, list[HistoryRow]]:
    """ADMM quantization of an (optionally pruned) net, keeping its zero pattern."""
    spec = QuantSpec.uniform(net, bits)
    net, state, history = admm_compress(net, spec, data, schedule)
    net = masked_retrain(net, state, data, retrain_epochs, lr=schedule.lr, momentum=schedule.momentum,
                         batch_size=schedule.batch_size, seed=schedule.seed)
    return net, spec, history
