import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from frozen import BN_BETA, BN_EPS, BN_GAMMA, BN_MEAN, BN_VAR, B_FROZEN, CONV_BN_S2P1, W_FROZEN, X_FROZEN
from graphgen import random_graph
from sparsenn.engine import execute_graph, rel_error
from sparsenn.errors import ParameterError, ShapeError
from sparsenn.fusion import (
    FusionReport, fold_batchnorm, fuse_conv_bn_act, rewrite_pointwise_conv_to_gemm, run_fusion_pipeline,
)
from sparsenn.graph import REFERENCE_MODELS, Act, BNParams, Kind, LayerSpec, build_reference_graph, infer_shapes
from sparsenn.graph.zoo import GraphBuilder, input_shape
from sparsenn.tensor import Layout, Tensor, csr_from_dense


def conv_node(w, b=None, stride=1, padding=0, nid=1):
    k, c, kh, kw = w.shape
    attrs = dict(in_channels=c, out_channels=k, kernel_h=kh, kernel_w=kw, stride=stride, padding=padding)
    return LayerSpec(nid, Kind.CONV2D, attrs, Tensor(np.asarray(w, np.float32), Layout.NCHW), b)


def bn_node(gamma, beta, mean, var, eps, nid=2):
    p = BNParams(np.asarray(gamma), np.asarray(beta), np.asarray(mean), np.asarray(var), eps)
    return LayerSpec(nid, Kind.BATCHNORM, {"channels": len(p.gamma)}, bn_params=p)


def run(g, x):
    return execute_graph(g, x).data


def kinds(g):
    return [n.kind for n in g.nodes]


# -- BN folding ------------------------------------------------------------------

def test_fold_identity_bn_leaves_conv_unchanged(rng):
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    folded = fold_batchnorm(conv_node(w, b), bn_node(np.ones(3), np.zeros(3), np.zeros(3), np.ones(3), 0.0))
    assert np.array_equal(folded.weights.data, w.astype(np.float32))
    assert np.array_equal(folded.bias, b.astype(np.float32))


def test_fold_hand_arithmetic():
    folded = fold_batchnorm(conv_node(np.ones((1, 1, 1, 1))), bn_node([2.0], [3.0], [0.0], [0.0], 1.0))
    assert folded.weights.data.ravel().tolist() == [2.0]
    assert folded.bias.tolist() == [3.0]


def test_fold_matches_frozen_conv_then_bn():
    conv = conv_node(W_FROZEN, B_FROZEN, stride=2, padding=1)
    folded = fold_batchnorm(conv, bn_node(BN_GAMMA, BN_BETA, BN_MEAN, BN_VAR, BN_EPS))
    y = oracles.conv2d(X_FROZEN, folded.weights.data, folded.bias, stride=2, padding=1)
    assert oracles.rel(y.ravel(), CONV_BN_S2P1) <= 1e-6


def test_fold_matches_per_channel_closed_form(rng):
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    g, beta, mu, var = rng.uniform(0.2, 2, 4), rng.standard_normal(4), rng.standard_normal(4), rng.uniform(0.1, 2, 4)
    folded = fold_batchnorm(conv_node(w, b), bn_node(g, beta, mu, var, 1e-3))
    for k in range(4):
        s = g[k] / np.sqrt(var[k] + 1e-3)
        assert np.allclose(folded.weights.data[k], w[k] * s, rtol=1e-6, atol=1e-6)
        assert np.isclose(folded.bias[k], beta[k] + (b[k] - mu[k]) * s, rtol=1e-6, atol=1e-6)


def test_fold_random_trials_agree_with_sequential(rng):
    worst = 0.0
    for _ in range(100):
        c, k = int(rng.integers(1, 5)), int(rng.integers(1, 6))
        kh = int(rng.choice([1, 3]))
        w, b = rng.standard_normal((k, c, kh, kh)), rng.standard_normal(k)
        gamma, beta = rng.uniform(0.1, 2, k), rng.standard_normal(k)
        mu, var = rng.standard_normal(k), rng.uniform(0.05, 3, k)
        x = rng.standard_normal((2, c, 7, 7))
        folded = fold_batchnorm(conv_node(w, b, padding=kh // 2), bn_node(gamma, beta, mu, var, 1e-5))
        fused = oracles.conv2d(x, folded.weights.data, folded.bias, padding=kh // 2)
        conv = oracles.conv2d(x, w.astype(np.float32), b.astype(np.float32), padding=kh // 2)
        p = bn_node(gamma, beta, mu, var, 1e-5).bn_params
        seq = (conv - p.mean[None, :, None, None]) / np.sqrt(p.var.astype(np.float64) + p.eps)[None, :, None, None]
        seq = seq * p.gamma[None, :, None, None] + p.beta[None, :, None, None]
        worst = max(worst, oracles.rel(fused, seq))
    assert worst <= 1e-4


def test_fold_keeps_sparse_pattern(rng):
    w = rng.standard_normal((4, 18))
    w[rng.random(w.shape) < 0.7] = 0
    conv = conv_node(w.reshape(4, 2, 3, 3)).replace(weights=csr_from_dense(w.astype(np.float32)))
    folded = fold_batchnorm(conv, bn_node(rng.uniform(0.5, 2, 4), np.zeros(4), np.zeros(4), np.ones(4), 1e-5))
    assert folded.weights.col_idx.tolist() == conv.weights.col_idx.tolist()
    assert folded.weights.row_ptr.tolist() == conv.weights.row_ptr.tolist()


def test_fold_channel_mismatch():
    with pytest.raises(ShapeError):
        fold_batchnorm(conv_node(np.ones((3, 1, 1, 1))), bn_node(np.ones(2), np.zeros(2), np.zeros(2), np.ones(2), 1e-5))


def test_fold_requires_positive_variance():
    with pytest.raises(ParameterError):
        fold_batchnorm(conv_node(np.ones((1, 1, 1, 1))), bn_node([1.0], [0.0], [0.0], [0.0], 0.0))


# -- conv + BN + activation --------------------------------------------------------

def conv_bn_relu(k=3, cin=2, hw=6, act=Act.RELU, seed=0):
    b = GraphBuilder(seed)
    x = b.input((1, cin, hw, hw))
    y = b.conv_bn_act(x, 4, k, 1, k // 2, act=act)
    return b.finish(y)


def test_conv_bn_relu_becomes_one_node(rng):
    g = conv_bn_relu()
    fused, report = fuse_conv_bn_act(g)
    assert kinds(g) == [Kind.INPUT, Kind.CONV2D, Kind.BATCHNORM, Kind.ACTIVATION]
    assert kinds(fused) == [Kind.INPUT, Kind.FUSED_CONV_BN_ACT]
    assert report.nodes_before == 4 and report.nodes_after == 2
    assert [r.consumed for r in report.rewrites] == [(1, 2, 3)]
    assert fused.node(3).attrs["act"] == int(Act.RELU)
    x = rng.standard_normal((1, 2, 6, 6))
    assert rel_error(run(fused, x), run(g, x)) <= 1e-4


def test_multi_consumer_conv_not_fused():
    b = GraphBuilder(0)
    x = b.input((1, 2, 6, 6))
    c = b.conv(x, 2, 3, 1, 1)
    y = b.act(b.batchnorm(c), Act.RELU)
    g = b.finish(b.add(c, y))
    fused, report = fuse_conv_bn_act(g)
    assert report.rewrites == [] and fused == g


def test_graph_output_not_absorbed():
    b = GraphBuilder(0)
    x = b.input((1, 2, 6, 6))
    c = b.conv(x, 2, 3, 1, 1)
    g = b.finish(b.batchnorm(c))
    g.outputs = [c, g.outputs[0]]
    fused, report = fuse_conv_bn_act(g)
    assert report.rewrites == []


def test_softmax_is_not_fused():
    b = GraphBuilder(0)
    x = b.input((1, 2, 4, 4))
    g = b.finish(b.act(b.conv(x, 3, 3, 1, 1), Act.SOFTMAX))
    assert fuse_conv_bn_act(g)[1].rewrites == []


def test_depthwise_bn_act_fuses(rng):
    b = GraphBuilder(3)
    x = b.input((2, 3, 8, 8))
    g = b.finish(b.dw_bn_act(x, 3, 2))
    fused, _ = fuse_conv_bn_act(g)
    assert kinds(fused) == [Kind.INPUT, Kind.FUSED_CONV_BN_ACT]
    assert fused.nodes[1].attrs["depthwise"] == 1
    x = rng.standard_normal((2, 3, 8, 8))
    assert rel_error(run(fused, x), run(g, x)) <= 1e-4


# -- pointwise conv to GEMM --------------------------------------------------------

def test_pointwise_gemm_shape():
    b = GraphBuilder(0)
    x = b.input((1, 32, 16, 16))
    g = b.finish(b.conv(x, 64, 1))
    out, report = rewrite_pointwise_conv_to_gemm(g)
    node = out.node(1)
    assert node.kind == Kind.GEMM
    assert (node.attrs["m"], node.attrs["k"]) == (64, 32)
    assert node.weights.dims == (64, 32)
    shape = infer_shapes(out)[1]
    assert shape[2] * shape[3] == 256
    assert report.adapters == 0


def test_pointwise_gemm_matches_direct_conv(rng):
    b = GraphBuilder(5)
    x = b.input((2, 6, 5, 7))
    g = b.finish(b.conv(x, 9, 1, bias=True))
    out, _ = rewrite_pointwise_conv_to_gemm(g)
    xs = rng.standard_normal((2, 6, 5, 7))
    node = g.node(1)
    ref = oracles.conv2d(xs.astype(np.float32), node.weights.data, node.bias)
    assert rel_error(run(out, xs), ref) <= 1e-5


@pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (1, 2, 0), (1, 1, 1)])
def test_non_pointwise_untouched(k, stride, pad):
    b = GraphBuilder(0)
    x = b.input((1, 4, 8, 8))
    g = b.finish(b.conv(x, 4, k, stride, pad))
    out, report = rewrite_pointwise_conv_to_gemm(g)
    assert report.rewrites == [] and out == g


def test_pipeline_composes_to_single_gemm(rng):
    g = conv_bn_relu(k=1, act=Act.RELU6)
    out, report = run_fusion_pipeline(g)
    assert kinds(out) == [Kind.INPUT, Kind.GEMM]
    assert out.nodes[1].attrs["act"] == int(Act.RELU6)
    assert [r.pass_name for r in report.rewrites] == ["fuse_conv_bn_act", "pointwise_conv_to_gemm"]
    x = rng.standard_normal((1, 2, 6, 6))
    assert rel_error(run(out, x), run(g, x)) <= 1e-4


# -- pipeline ------------------------------------------------------------------

def test_pipeline_idempotent_on_mobilenet():
    g = build_reference_graph("mobilenet_v1", resolution=64)
    once, _ = run_fusion_pipeline(g)
    twice, report = run_fusion_pipeline(once)
    assert report.rewrites == []
    assert twice == once


def test_mobilenet_fusion_counts():
    g = build_reference_graph("mobilenet_v1", resolution=64)
    out, report = run_fusion_pipeline(g)
    counts = {k: kinds(out).count(k) for k in set(kinds(out))}
    assert counts[Kind.FUSED_CONV_BN_ACT] == 14  # first 3x3 conv plus 13 depthwise
    assert counts[Kind.GEMM] == 13
    assert Kind.BATCHNORM not in counts
    assert report.nodes_after == len(out.nodes) < report.nodes_before == len(g.nodes)


@pytest.mark.parametrize("name", REFERENCE_MODELS)
def test_reference_graphs_equivalent_after_fusion(name):
    g = build_reference_graph(name)
    out, _ = run_fusion_pipeline(g)
    r = np.random.default_rng(7)
    for _ in range(3):
        x = r.standard_normal(input_shape(g))
        assert rel_error(run(out, x), run(g, x)) <= 1e-4


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_random_graphs_semantics_preserved(seed):
    g = random_graph(seed, fuse=False)
    r = np.random.default_rng(seed)
    x = r.standard_normal(input_shape(g))
    for p in (fuse_conv_bn_act, rewrite_pointwise_conv_to_gemm, run_fusion_pipeline):
        out, report = p(g)
        assert len(out.nodes) <= len(g.nodes) + report.adapters
        before = {n.id for n in g.nodes}
        after = {n.id for n in out.nodes}
        for rw in report.rewrites:
            assert set(rw.consumed) <= before and rw.produced in after
        assert rel_error(run(out, x), run(g, x)) <= 1e-4
        assert p(out)[0] == out


def test_report_text():
    _, report = run_fusion_pipeline(conv_bn_relu(k=1))
    text = str(report)
    assert text.splitlines()[0] == "fusion: 4 -> 2 nodes, 2 rewrites"
    assert "fuse_conv_bn_act: [1, 2, 3] -> 3" in text
    assert "pointwise_conv_to_gemm: [3] -> 3" in text
    assert str(FusionReport()).startswith("fusion: 0 -> 0 nodes")
