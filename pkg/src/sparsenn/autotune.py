"""Kernel-configuration search: enumerate, prune, measure, cache.

Configs are parameterized kernels picked at run time; nothing is code
generated. Pruning rules are heuristics of this package:

* tiles larger than the layer dimension are dropped (the smallest
  candidate, 4, always survives so tiny layers keep a config);
* an unroll factor larger than tile_k is dropped;
* tiles whose A+B+C footprint exceeds the cache budget are dropped;
* for sparsity >= 0.8 only the two m-outermost loop orders are kept.
"""

from __future__ import annotations

import itertools
import json
import logging
import os
import statistics
import time
from dataclasses import dataclass, field

import numpy as np

from sparsenn.engine.kernels import (
    DEFAULT_CONFIG,
    LOOP_ORDERS,
    KernelConfig,
    ShapeKey,
    gemm_tiled,
    pack_weights_tiled,
    rel_error,
    sparsity_bucket,
    spmm_csr_tiled,
)
from sparsenn.errors import ExecutionError, FormatError, ParameterError
from sparsenn.tensor import FLOAT, csr_from_dense

log = logging.getLogger(__name__)

DEFAULT_CACHE_BUDGET = 32768
CONFIRM_ROUNDS = 3
UNROLL_CANDIDATES = (1, 2, 4, 8)
M_OUTER_ORDERS = ("mnk", "mkn")
KERNEL_TOLERANCE = 1e-5

# representative sparsity used to synthesize operands for a bucket
BUCKET_SPARSITY = {0: 0.0, 1: 0.5, 2: 0.75, 3: 0.9}

__all__ = [
    "SearchSpace", "TuneCache", "CacheEntry", "ShapeKey", "enumerate_search_space", "prune_search_space",
    "measure_config", "tune_layer", "candidate_order", "make_operands", "Operands", "TuneResult", "layer_keys",
    "DEFAULT_CACHE_BUDGET",
]


def _powers_of_two(dim: int) -> list[int]:
    out, t = [], 4
    while t <= dim:
        out.append(t)
        t *= 2
    return out or [4]


@dataclass(frozen=True)
class SearchSpace:
    tile_m: tuple[int, ...]
    tile_n: tuple[int, ...]
    tile_k: tuple[int, ...]
    unroll: tuple[int, ...]
    loop_order: tuple[str, ...]
    configs: tuple[KernelConfig, ...]

    def __len__(self):
        return len(self.configs)

    def __iter__(self):
        return iter(self.configs)


def _space(configs: list[KernelConfig]) -> SearchSpace:
    def axis(name):
        return tuple(sorted({getattr(c, name) for c in configs}))

    return SearchSpace(axis("tile_m"), axis("tile_n"), axis("tile_k"), axis("unroll"), axis("loop_order"),
                       tuple(configs))


def enumerate_search_space(key: ShapeKey) -> SearchSpace:
    if min(key.m, key.n, key.k) < 1:
        raise ParameterError(f"shape dims must be positive: {key}")
    configs = [
        KernelConfig(tm, tn, tk, u, order)
        for tm, tn, tk, u, order in itertools.product(
            _powers_of_two(key.m), _powers_of_two(key.n), _powers_of_two(key.k), UNROLL_CANDIDATES, LOOP_ORDERS
        )
    ]
    return _space(configs)


def prune_search_space(space: SearchSpace, key: ShapeKey, sparsity: float | None = None,
                       cache_budget: int = DEFAULT_CACHE_BUDGET) -> SearchSpace:
    if sparsity is None:
        sparsity = BUCKET_SPARSITY[key.sparsity_bucket]
    orders = M_OUTER_ORDERS if sparsity >= 0.8 else LOOP_ORDERS

    def fits(tile: int, dim: int) -> bool:
        return tile <= max(dim, 4)

    kept = [
        c for c in space.configs
        if fits(c.tile_m, key.m) and fits(c.tile_n, key.n) and fits(c.tile_k, key.k)
        and c.unroll <= c.tile_k
        and c.footprint <= cache_budget
        and c.loop_order in orders
    ]
    if not kept:
        kept = [DEFAULT_CONFIG]
    return _space(kept)


def candidate_order(space: SearchSpace) -> list[KernelConfig]:
    """Trial order: the default config, then the space by ascending footprint, then lexicographic.

    The default always leads (even when pruning removed it, e.g. because a
    tile exceeds a small dimension; kernels clamp tiles) so a tuned result
    is never slower than the baseline as measured.
    """
    rest = sorted(space.configs, key=lambda c: (c.footprint, c.tile_m, c.tile_n, c.tile_k, c.unroll, c.loop_order))
    return [DEFAULT_CONFIG] + [c for c in rest if c != DEFAULT_CONFIG]


@dataclass
class Operands:
    """Synthetic inputs for one shape key, plus the float64 reference product."""

    weights: np.ndarray
    x: np.ndarray
    expected: np.ndarray
    csr: object = None
    packed: dict = field(default_factory=dict)


def make_operands(key: ShapeKey, sparsity: float | None = None, seed: int = 0) -> Operands:
    rng = np.random.default_rng([seed, key.m, key.n, key.k, key.sparsity_bucket])
    w = rng.standard_normal((key.m, key.k)).astype(FLOAT)
    if key.kind == "spmm":
        s = BUCKET_SPARSITY[key.sparsity_bucket] if sparsity is None else sparsity
        w[rng.random(w.shape) < s] = 0.0
    x = rng.standard_normal((key.k, key.n)).astype(FLOAT)
    ops = Operands(w, x, w.astype(np.float64) @ x.astype(np.float64))
    if key.kind == "spmm":
        ops.csr = csr_from_dense(w)
    return ops


def _runner(key: ShapeKey, cfg: KernelConfig, ops: Operands):
    if key.kind == "gemm":
        out = np.zeros((key.m, key.n), dtype=FLOAT)
        return lambda: gemm_tiled(ops.weights, ops.x, cfg, out=out)
    if key.kind == "spmm":
        tiles = (cfg.tile_m, cfg.tile_k)
        if tiles not in ops.packed:
            ops.packed[tiles] = pack_weights_tiled(ops.csr, cfg)
        packed = ops.packed[tiles]
        out = np.zeros((key.m, key.n), dtype=FLOAT)
        return lambda: spmm_csr_tiled(packed, ops.x, cfg, out=out)
    raise ParameterError(f"unknown kernel kind {key.kind!r}")


def measure_config(kernel: str, key: ShapeKey, cfg: KernelConfig, repeats: int = 5,
                   operands: Operands | None = None) -> float:
    """Median wall time in microseconds over ``repeats`` runs after one warmup.

    The warmup output is checked against the float64 reference first; a
    config that fails the check raises ``ExecutionError``.
    """
    if repeats < 3:
        raise ParameterError("repeats must be >= 3")
    if kernel != key.kind:
        key = ShapeKey(kernel, key.m, key.n, key.k, key.sparsity_bucket)
    ops = operands if operands is not None else make_operands(key)
    run = _runner(key, cfg, ops)
    err = rel_error(run(), ops.expected)
    if not err <= KERNEL_TOLERANCE:
        raise ExecutionError(f"config {cfg} failed correctness gate (rel error {err:.2e})")
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        run()
        samples.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(samples)


@dataclass
class CacheEntry:
    config: KernelConfig
    micros: float
    trials: int


class TuneCache:
    """Best measured config per shape key; recorded times only ever decrease."""

    def __init__(self):
        self.entries: dict[ShapeKey, CacheEntry] = {}

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def lookup(self, key: ShapeKey) -> KernelConfig | None:
        e = self.entries.get(key)
        return e.config if e else None

    def record(self, key: ShapeKey, cfg: KernelConfig, micros: float, trials: int) -> CacheEntry:
        old = self.entries.get(key)
        if old is None or micros < old.micros:
            self.entries[key] = CacheEntry(cfg, float(micros), trials + (old.trials if old else 0))
        else:
            old.trials += trials
        return self.entries[key]

    def to_json(self) -> list[dict]:
        return [
            {
                "key": {"kind": k.kind, "m": k.m, "n": k.n, "k": k.k, "sparsity_bucket": k.sparsity_bucket},
                "config": e.config.to_dict(),
                "micros": e.micros,
                "trials": e.trials,
            }
            for k, e in sorted(self.entries.items())
        ]

    @classmethod
    def from_json(cls, items: list[dict]) -> "TuneCache":
        cache = cls()
        try:
            for item in items:
                key = ShapeKey(**item["key"])
                cache.entries[key] = CacheEntry(KernelConfig(**item["config"]), float(item["micros"]),
                                                int(item["trials"]))
        except (KeyError, TypeError) as exc:
            raise FormatError(f"malformed tune cache entry: {exc}") from None
        return cache

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "TuneCache":
        with open(path) as fh:
            return cls.from_json(json.load(fh))

    @classmethod
    def load_or_new(cls, path: str | os.PathLike | None) -> "TuneCache":
        if path and os.path.exists(path):
            return cls.load(path)
        return cls()


@dataclass
class TuneResult:
    config: KernelConfig
    micros: float
    measured: int
    cache_hit: bool


def tune_layer(key: ShapeKey, budget: int, cache: TuneCache | None = None, *, sparsity: float | None = None,
               cache_budget: int = DEFAULT_CACHE_BUDGET, repeats: int = 5,
               operands: Operands | None = None) -> TuneResult:
    """Measure up to ``budget`` pruned-space configs and keep the fastest.

    A winner other than the default must also beat it on the median of a
    few interleaved re-measurements. A cache hit returns immediately without measuring
    anything.
    """
    if budget < 1:
        raise ParameterError("budget must be >= 1")
    if cache is not None and key in cache:
        e = cache.entries[key]
        return TuneResult(e.config, e.micros, 0, True)
    space = prune_search_space(enumerate_search_space(key), key, sparsity, cache_budget)
    ops = operands if operands is not None else make_operands(key, sparsity)
    best: tuple[float, KernelConfig] | None = None
    default_time = None
    measured = 0
    for cfg in candidate_order(space)[:budget]:
        try:
            t = measure_config(key.kind, key, cfg, repeats, ops)
        except ExecutionError as exc:
            log.warning("skipping %s: %s", cfg, exc)
            continue
        finally:
            measured += 1
        if cfg == DEFAULT_CONFIG:
            default_time = t
        if best is None or t < best[0]:
            best = (t, cfg)
    if best is None:
        return TuneResult(DEFAULT_CONFIG, float("nan"), measured, False)
    if best[1] != DEFAULT_CONFIG and default_time is not None:
        # a single noisy sample can crown a loser; re-time both, interleaved
        ct, dt = [best[0]], [default_time]
        for _ in range(CONFIRM_ROUNDS):
            ct.append(measure_config(key.kind, key, best[1], repeats, ops))
            dt.append(measure_config(key.kind, key, DEFAULT_CONFIG, repeats, ops))
        if statistics.median(dt) <= statistics.median(ct):
            best = (min(dt), DEFAULT_CONFIG)
        else:
            best = (min(ct), best[1])
    if cache is not None:
        cache.record(key, best[1], best[0], measured)
    return TuneResult(best[1], best[0], measured, False)


def layer_keys(g, batch: int | None = None) -> list[tuple[ShapeKey, float]]:
    """Shape keys (with exact sparsity) of every matmul-backed layer of ``g``."""
    from sparsenn.graph.ir import Kind, infer_shapes, topological_order
    from sparsenn.tensor import SparseMatrixCSR, conv_output_size

    order = topological_order(g)
    shapes = infer_shapes(g, order)
    nodes = g.by_id()
    out = []
    for nid in order:
        node = nodes[nid]
        preds = g.predecessors(nid)
        if node.weights is None or not preds:
            continue
        x = shapes[preds[0]]
        n_img = batch or x[0]
        a = node.attrs
        if node.kind == Kind.FULLY_CONNECTED:
            m, k, n = a["out_features"], a["in_features"], n_img
        elif node.kind == Kind.GEMM:
            m, k, n = a["m"], a["k"], x[2] * x[3]
        elif node.kind in (Kind.CONV2D, Kind.FUSED_CONV_BN_ACT) and not a.get("depthwise"):
            ho = conv_output_size(x[2], a["kernel_h"], a["stride"], a["padding"])
            wo = conv_output_size(x[3], a["kernel_w"], a["stride"], a["padding"])
            m, k, n = a["out_channels"], a["in_channels"] * a["kernel_h"] * a["kernel_w"], n_img * ho * wo
        else:
            continue
        w = node.weights
        sparse = isinstance(w, SparseMatrixCSR)
        s = w.sparsity if sparse else 0.0
        key = ShapeKey("spmm" if sparse else "gemm", m, n, k, sparsity_bucket(s))
        out.append((key, s))
    return out
