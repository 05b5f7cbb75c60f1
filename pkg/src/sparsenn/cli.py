"""Command-line entry point: train, compress, tune, infer, bench."""

from __future__ import annotations

import argparse
import csv
import gzip
import json
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from sparsenn.autotune import DEFAULT_CACHE_BUDGET, TuneCache, layer_keys, tune_layer
from sparsenn.compress import (
    AdmmSchedule, Dataset, PruneSpec, StageResult, build_net, export_compressed, masked_retrain, net_from_graph,
    progressive_compress, quantize_net, train_dense,
)
from sparsenn.engine import Executor, ProfileRecord, rel_error, set_threads
from sparsenn.errors import ConsistencyError, CorruptionError, FormatError, SparseNNError, UsageError
from sparsenn.fusion import run_fusion_pipeline
from sparsenn.graph import REFERENCE_MODELS, build_reference_graph, densify_graph, load_model, save_model, sparsify_graph
from sparsenn.graph.ir import Graph

log = logging.getLogger("sparsenn")

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
BENCH_TOLERANCE = 1e-4


# -- IDX ingestion ---------------------------------------------------------

def _read_bytes(path: str) -> bytes:
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path: str, magic: int) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 4:
        raise CorruptionError(f"{path}: truncated header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise FormatError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    ndim = magic & 0xFF
    end = 4 + 4 * ndim
    if len(raw) < end:
        raise CorruptionError(f"{path}: truncated header")
    dims = tuple(int(d) for d in np.frombuffer(raw, ">u4", ndim, 4))
    count = int(np.prod(dims))
    if len(raw) - end < count:
        raise CorruptionError(f"{path}: expected {count} data bytes, found {len(raw) - end}")
    if len(raw) - end > count:
        raise FormatError(f"{path}: {len(raw) - end - count} trailing bytes")
    return np.frombuffer(raw, np.uint8, count, end).reshape(dims)


def write_idx(path: str, data: np.ndarray) -> None:
    """Write uint8 images (ndim 3) or labels (ndim 1) as IDX."""
    data = np.ascontiguousarray(data, dtype=np.uint8)
    header = (0x800 | data.ndim).to_bytes(4, "big") + np.asarray(data.shape, ">u4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + data.tobytes())


def load_mnist_idx(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Images as float32 in [0, 1] shaped (N, rows, cols) and int64 labels."""
    images = read_idx(images_path, IMAGES_MAGIC)
    labels = read_idx(labels_path, LABELS_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise ConsistencyError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    return images.astype(np.float32) / np.float32(255.0), labels.astype(np.int64)


def _find(data_dir: str, name: str) -> str:
    for cand in (name, name + ".gz"):
        p = os.path.join(data_dir, cand)
        if os.path.exists(p):
            return p
    raise UsageError(f"MNIST file {name} not found in {data_dir}")


def load_mnist(data_dir: str, n_train: int | None = None, n_test: int | None = None) -> Dataset:
    tr = load_mnist_idx(*(_find(data_dir, f) for f in MNIST_FILES["train"]))
    te = load_mnist_idx(*(_find(data_dir, f) for f in MNIST_FILES["test"]))
    return Dataset(tr[0], tr[1], te[0], te[1]).subset(n_train, n_test)


def default_data_dir() -> str:
    return os.environ.get("SPARSENN_MNIST_DIR", "data/mnist")


# -- run manifest ----------------------------------------------------------

@dataclass
class RunManifest:
    command: str
    config: str | None = None
    model: str | None = None
    seed: int = 0
    tune_cache: str | None = None
    outputs: dict[str, str] = field(default_factory=dict)
    inputs: list[str] = field(default_factory=list)

    @classmethod
    def from_args(cls, args) -> "RunManifest":
        m = cls(args.command, args.config, args.model, args.seed, args.tune_cache)
        for name in ("output", "history"):
            if getattr(args, name, None):
                m.outputs[name] = getattr(args, name)
        m.inputs = [p for p in (args.config, args.model, getattr(args, "input", None)) if p]
        return m

    def check(self) -> None:
        missing = [p for p in self.inputs if not os.path.exists(p)]
        if missing:
            raise UsageError("input path(s) not found: " + ", ".join(missing))


# -- helpers ---------------------------------------------------------------

def _load_graph(args) -> Graph:
    if args.model:
        return load_model(args.model)
    if getattr(args, "ref", None):
        kwargs = {}
        if args.ref.startswith("mobilenet"):
            kwargs["resolution"] = args.resolution
        if args.ref == "mobilenet_v1":
            kwargs["softmax"] = False
        return build_reference_graph(args.ref, seed=args.seed, **kwargs)
    raise UsageError("give --model PATH or --ref NAME")


def _maybe_sparsify(g: Graph, args) -> Graph:
    if getattr(args, "sparsity", None):
        return sparsify_graph(g, args.sparsity)
    return g


def _tune_graphs(graphs: list[Graph], cache: TuneCache, budget: int, cache_budget: int) -> int:
    measured = 0
    seen = set()
    for g in graphs:
        for key, sparsity in layer_keys(g):
            if key in seen:
                continue
            seen.add(key)
            res = tune_layer(key, budget, cache, sparsity=sparsity, cache_budget=cache_budget)
            measured += res.measured
            log.info("%s -> %s (%.1f us%s)", key, res.config, res.micros, ", cached" if res.cache_hit else "")
    return measured


# -- commands --------------------------------------------------------------

def cmd_train(args) -> int:
    data = load_mnist(args.data_dir, args.train_limit, args.test_limit)
    net = build_net(args.arch, args.seed)
    net, acc = train_dense(net, data, args.epochs, args.lr, args.seed, batch_size=args.batch_size)
    print(f"held-out accuracy: {acc:.4f}")
    if args.output:
        save_model(export_compressed(net), args.output)
        print(f"wrote {args.output}")
    return 0


COMPRESS_DEFAULTS = dict(stages=[0.1], quant_bits=None, rho0=1e-3, rho_factor=10.0, rho_stages=3, epochs=5,
                         retrain_epochs=5, quant_retrain_epochs=3, lr=0.01, batch_size=64, seed=0)


def _stage_spec(net, stage) -> PruneSpec:
    if isinstance(stage, dict):
        if "retain_k" in stage:
            return PruneSpec(tuple(int(k) for k in stage["retain_k"]))
        return PruneSpec.from_keep_fraction(net, stage["keep"])
    return PruneSpec.from_keep_fraction(net, stage)


def load_compress_config(path: str | None) -> dict:
    cfg = dict(COMPRESS_DEFAULTS)
    if path:
        with open(path) as fh:
            user = json.load(fh)
        unknown = set(user) - set(cfg) - {"retain_k", "keep"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        if "retain_k" in user:
            user["stages"] = [{"retain_k": user.pop("retain_k")}]
        if "keep" in user:
            user["stages"] = [user.pop("keep")]
        cfg.update(user)
    return cfg


def cmd_compress(args) -> int:
    cfg = load_compress_config(args.config)
    if args.seed_given:
        cfg["seed"] = args.seed
    data = load_mnist(args.data_dir, args.train_limit, args.test_limit)
    net = net_from_graph(load_model(args.model))
    base = net.accuracy(data.x_test, data.y_test)
    print(f"baseline accuracy: {base:.4f}")
    schedule = AdmmSchedule(cfg["rho0"], cfg["rho_factor"], cfg["rho_stages"], cfg["epochs"], cfg["lr"], 0.9,
                            cfg["batch_size"], cfg["seed"])
    stages = [_stage_spec(net, s) for s in cfg["stages"]]
    results: list[StageResult] = []
    net = progressive_compress(net, stages, data, schedule, cfg["retrain_epochs"], results)
    rows = [(f"prune{i}", h) for i, r in enumerate(results) for h in r.history]
    for i, r in enumerate(results):
        print(f"stage {i}: retain_k={list(r.spec.retain_k)} accuracy={r.accuracy:.4f}")
    spec = stages[-1]
    if cfg["quant_bits"]:
        net, spec, qhist = quantize_net(net, int(cfg["quant_bits"]), data, schedule, cfg["quant_retrain_epochs"])
        rows += [("quant", h) for h in qhist]
        print(f"{cfg['quant_bits']}-bit quantized accuracy: {net.accuracy(data.x_test, data.y_test):.4f}")
    if args.history:
        with open(args.history, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", "iteration", "rho", "loss", "residual", "accuracy"])
            for stage, h in rows:
                w.writerow([stage, h.iteration, repr(h.rho), repr(h.loss), repr(h.residual), repr(h.accuracy)])
    if args.output:
        save_model(export_compressed(net, spec), args.output)
        print(f"wrote {args.output}")
    return 0


def cmd_tune(args) -> int:
    if not args.tune_cache:
        raise UsageError("tune needs --tune-cache PATH")
    g = _maybe_sparsify(_load_graph(args), args)
    cache = TuneCache.load_or_new(args.tune_cache)
    fused, _ = run_fusion_pipeline(g)
    measured = _tune_graphs([g, fused], cache, args.budget, args.cache_budget)
    cache.save(args.tune_cache)
    print(f"{len(cache)} cache entries, {measured} new measurements -> {args.tune_cache}")
    return 0


def _input_batch(args, g: Graph) -> np.ndarray:
    shape = tuple(g.node(g.inputs[0]).attrs["shape"])
    if args.input:
        images = read_idx(args.input, IMAGES_MAGIC)
        if not 0 <= args.index < len(images):
            raise UsageError(f"--index {args.index} outside [0, {len(images)})")
        x = images[args.index].astype(np.float32) / np.float32(255.0)
        if x.size != int(np.prod(shape[1:])):
            raise UsageError(f"image of {x.size} pixels does not fit model input {shape}")
        return x.reshape((1,) + shape[1:])
    rng = np.random.default_rng(args.seed)
    return rng.standard_normal((1,) + shape[1:]).astype(np.float32)


def cmd_infer(args) -> int:
    g = _maybe_sparsify(_load_graph(args), args)
    if not args.no_fuse:
        g, report = run_fusion_pipeline(g)
        if args.explain:
            print(report, file=sys.stderr)
    cache = TuneCache.load_or_new(args.tune_cache)
    x = _input_batch(args, g)
    profile: list[ProfileRecord] | None = [] if args.profile else None
    y = Executor(g, cache).run(x, profile).data
    print(f"class: {int(np.argmax(y.reshape(1, -1)))}")
    if profile is not None:
        for rec in profile:
            print(rec.line())
    if args.output:
        np.save(args.output, y)
    return 0


@dataclass
class BenchRow:
    label: str
    fused: bool
    tuned: bool
    micros: float
    speedup: float = 1.0
    rel_err: float = 0.0


def _median_time(ex: Executor, x: np.ndarray, runs: int) -> tuple[float, np.ndarray]:
    y = ex.run(x).data  # warmup
    samples = []
    for _ in range(runs):
        t0 = time.perf_counter()
        ex.run(x)
        samples.append((time.perf_counter() - t0) * 1e6)
    return statistics.median(samples), y


def run_bench(sparse: Graph, runs: int, cache: TuneCache | None, x: np.ndarray) -> list[BenchRow]:
    """Latency grid over {DC, SC} x {unfused, fused} x {default, tuned}.

    DC holds the sparse model's weights stored densely. Variants whose
    output deviates from DC/unfused/default beyond the tolerance are left
    out of the table.
    """
    variants = {"DC": densify_graph(sparse), "SC": sparse}
    rows, ref = [], None
    for label, g in variants.items():
        for fused in (False, True):
            gg = run_fusion_pipeline(g)[0] if fused else g
            for tuned in (False, True):
                if tuned and cache is None:
                    continue
                micros, y = _median_time(Executor(gg, cache if tuned else None), x, runs)
                if ref is None:
                    ref = y
                err = rel_error(y, ref)
                if not err <= BENCH_TOLERANCE:
                    log.error("%s fused=%s tuned=%s failed the correctness gate (%.2e)", label, fused, tuned, err)
                    continue
                rows.append(BenchRow(label, fused, tuned, micros, rel_err=err))
    base = rows[0].micros
    for r in rows:
        r.speedup = base / r.micros
    return rows


def cmd_bench(args) -> int:
    g = _load_graph(args)
    if args.sparsity:
        g = sparsify_graph(g, args.sparsity)
    cache = None
    if args.tune_cache or args.budget:
        cache = TuneCache.load_or_new(args.tune_cache)
        dense = densify_graph(g)
        graphs = [dense, g, run_fusion_pipeline(dense)[0], run_fusion_pipeline(g)[0]]
        _tune_graphs(graphs, cache, args.budget or 8, args.cache_budget)
        if args.tune_cache:
            cache.save(args.tune_cache)
    shape = tuple(g.node(g.inputs[0]).attrs["shape"])
    x = np.random.default_rng(args.seed).standard_normal(shape).astype(np.float32)
    rows = run_bench(g, args.runs, cache, x)
    print("variant\tfused\ttuned\tmedian_us\tspeedup\trel_err")
    for r in rows:
        print(f"{r.label}\t{'yes' if r.fused else 'no'}\t{'yes' if r.tuned else 'no'}\t{r.micros:.0f}\t"
              f"{r.speedup:.2f}\t{r.rel_err:.1e}")
    return 0


# -- parser ----------------------------------------------------------------

def _shared(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", metavar="PATH", help="CADM model file")
    p.add_argument("--config", metavar="PATH", help="JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1, help="engine worker threads (default 1)")
    p.add_argument("--tune-cache", metavar="PATH", help="tuning cache JSON")
    p.add_argument("--profile", action="store_true", help="print per-layer timing and load counters")
    p.add_argument("--output", metavar="PATH")
    p.add_argument("--data-dir", default=default_data_dir(), help="directory with the MNIST IDX files")
    p.add_argument("-v", "--verbose", action="store_true")


def _graph_source(p: argparse.ArgumentParser) -> None:
    p.add_argument("--ref", choices=REFERENCE_MODELS, help="use a reference topology with random weights")
    p.add_argument("--resolution", type=int, default=224)
    p.add_argument("--sparsity", type=float, default=None, help="magnitude-prune conv/FC weights to this level")
    p.add_argument("--cache-budget", type=int, default=DEFAULT_CACHE_BUDGET)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsenn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a dense baseline on MNIST")
    _shared(p)
    p.add_argument("--arch", choices=("lenet_300_100", "lenet5"), default="lenet_300_100")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compress", help="prune (and optionally quantize) a trained model with ADMM")
    _shared(p)
    p.add_argument("--history", metavar="PATH", help="write the per-iteration history as CSV")
    p.add_argument("--train-limit", type=int, default=None)
    p.add_argument("--test-limit", type=int, default=None)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("tune", help="autotune kernel configs for a model's layers")
    _shared(p)
    _graph_source(p)
    p.add_argument("--budget", type=int, default=16, help="max configs measured per layer shape")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("infer", help="classify one input")
    _shared(p)
    _graph_source(p)
    p.add_argument("--input", metavar="PATH", help="IDX image file")
    p.add_argument("--index", type=int, default=0, help="image index inside --input")
    p.add_argument("--no-fuse", action="store_true", help="skip the fusion passes")
    p.add_argument("--explain", action="store_true", help="print the fusion report to stderr")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="latency grid over dense/sparse, fused/unfused, default/tuned")
    _shared(p)
    _graph_source(p)
    p.add_argument("--runs", type=int, default=7)
    p.add_argument("--budget", type=int, default=0, help="tune with this many trials per shape first")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s",
                        stream=sys.stderr)
    args.seed_given = args.seed is not None
    if args.seed is None:
        args.seed = 0
    try:
        RunManifest.from_args(args).check()
        if args.command == "compress" and not args.model:
            raise UsageError("compress needs --model PATH")
        set_threads(args.threads)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SparseNNError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
