import numpy as np
import pytest

import rxf.ops as ops
from rxf import RngState, Tape, Tensor, build_network, conv_weight_as_matrix, residual_aggregate, reverse_grad, split
from rxf.errors import ShapeError
from rxf.layers import EVAL, BatchNorm, Conv2D, ForwardCtx, MaxPool2


def test_build_mini_resnet_block_count_and_output_dim():
    net = build_network({"family": "mini-resnet", "depth": 8, "width": 1,
                         "classes": 10, "input_shape": [1, 28, 28]}, seed=0)
    assert net.depth == 8
    out = net.forward(Tensor(np.zeros((2, 1, 28, 28), dtype=np.float32)), EVAL)
    assert out.data.shape == (2, 10)


def test_build_small_cnn_zero_image_logits():
    net = build_network({"family": "small-cnn", "classes": 5, "input_shape": [1, 28, 28]}, seed=0)
    out = net.forward(Tensor(np.zeros((1, 1, 28, 28), dtype=np.float32)), EVAL)
    assert out.data.shape == (1, 5)
    assert np.all(np.isfinite(out.data))


def test_build_deterministic_under_seed():
    arch = {"family": "small-cnn", "classes": 3, "input_shape": [1, 12, 12]}
    a = build_network(arch, seed=42)
    b = build_network(arch, seed=42)
    for (_, pa), (_, pb) in zip(a.parameters(), b.parameters()):
        assert np.array_equal(pa.data, pb.data)


def test_unknown_family_rejected():
    with pytest.raises(ShapeError, match="unknown architecture family"):
        build_network({"family": "transformer", "classes": 2, "input_shape": [1, 8, 8]}, seed=0)


def test_split_index_arithmetic():
    net = build_network({"family": "mini-resnet", "depth": 10, "classes": 4,
                         "input_shape": [1, 16, 16]}, seed=0)
    extractor, submodel = split(net, 4)
    assert extractor.depth == 6 and submodel.depth == 4
    assert net.split_index == 6


def test_split_k_equals_L_empty_extractor():
    net = build_network({"family": "small-cnn", "classes": 3, "input_shape": [1, 12, 12]}, seed=0)
    extractor, submodel = split(net, net.depth)
    assert extractor.depth == 0 and submodel.depth == net.depth


def test_split_k_zero_rejected():
    net = build_network({"family": "small-cnn", "classes": 3, "input_shape": [1, 12, 12]}, seed=0)
    with pytest.raises(ShapeError):
        split(net, 0)


def test_split_marks_extractor_frozen():
    net = build_network({"family": "small-cnn", "classes": 3, "input_shape": [1, 12, 12]}, seed=1)
    extractor, submodel = split(net, 2)
    assert all(not p.requires_grad for _, p in extractor.parameters())
    assert all(p.requires_grad for _, p in submodel.parameters())


def test_composition_identity_for_every_k():
    net = build_network({"family": "small-cnn", "classes": 4, "input_shape": [1, 12, 12]}, seed=3)
    x = RngState(4, "comp").uniform(0, 1, (3, 1, 12, 12))
    full = net.forward(Tensor(x), EVAL).data
    for k in range(1, net.depth + 1):
        extractor, submodel = split(net, k)
        via_views = submodel.forward(extractor.forward(Tensor(x), EVAL), EVAL).data
        assert np.array_equal(full, via_views)


def test_bn_training_standardizes_batch():
    layer = BatchNorm(1)
    x = Tensor(np.array([[0.0], [2.0]], dtype=np.float32))
    out = layer.forward(x, ForwardCtx(training=True))
    assert abs(out.data[0, 0] + 1.0) < 1e-4
    assert abs(out.data[1, 0] - 1.0) < 1e-4


def test_bn_inference_identity_stats():
    layer = BatchNorm(2)
    x = np.array([[0.5, -1.5]], dtype=np.float32)
    out = layer.forward(Tensor(x), EVAL)
    assert np.allclose(out.data, x / np.sqrt(1.0 + layer.eps), atol=1e-7)


def test_bn_running_stat_update_rule():
    layer = BatchNorm(1, momentum=0.1)
    x = Tensor(np.array([[0.5], [1.5]], dtype=np.float32))  # batch mean 1.0
    layer.forward(x, ForwardCtx(training=True))
    assert abs(layer.running_mean[0] - 0.1) < 1e-6


def test_bn_training_needs_batch_of_two():
    layer = BatchNorm(2)
    with pytest.raises(ShapeError, match="batch size"):
        layer.forward(Tensor(np.zeros((1, 2), dtype=np.float32)), ForwardCtx(training=True))


def test_bn_frozen_stats_do_not_move():
    layer = BatchNorm(1)
    layer.stats_frozen = True
    before = layer.running_mean.copy(), layer.running_var.copy()
    layer.forward(Tensor(np.array([[3.0], [5.0]], dtype=np.float32)), ForwardCtx(training=True))
    assert np.array_equal(layer.running_mean, before[0])
    assert np.array_equal(layer.running_var, before[1])


def test_bn_inference_independent_of_batch_composition():
    rng = RngState(9, "bn")
    layer = BatchNorm(4)
    layer.running_mean = rng.normal((4,))
    layer.running_var = rng.uniform(0.5, 2.0, (4,))
    x = rng.normal((6, 4))
    full = layer.forward(Tensor(x), EVAL).data
    parts = np.concatenate([layer.forward(Tensor(x[i : i + 2]), EVAL).data for i in range(0, 6, 2)])
    assert np.array_equal(full, parts)
    perm = RngState(10, "perm").permutation(6)
    assert np.array_equal(layer.forward(Tensor(x[perm]), EVAL).data, full[perm])


def test_residual_aggregate_convex_halves():
    a, b = Tensor([2.0, 4.0]), Tensor([0.0, 0.0])
    out = residual_aggregate([a, b], "convex")
    assert np.array_equal(out.data, np.array([1.0, 2.0], dtype=np.float32))


def test_residual_aggregate_convex_fixed_point():
    v = Tensor([0.5, -1.0])
    out = residual_aggregate([v, Tensor(v.data), Tensor(v.data)], "convex")
    assert np.allclose(out.data, v.data, atol=1e-7)


def test_residual_aggregate_sum():
    out = residual_aggregate([Tensor([1.0, 1.0]), Tensor([1.0, 1.0])], "sum")
    assert np.array_equal(out.data, np.array([2.0, 2.0], dtype=np.float32))


def test_residual_aggregate_shape_mismatch():
    with pytest.raises(ShapeError):
        residual_aggregate([Tensor([1.0]), Tensor([1.0, 2.0])], "sum")


@pytest.mark.parametrize("mode,expected", [("sum", 1.0), ("convex", 0.5)])
def test_residual_aggregate_gradient(mode, expected):
    a = Tensor([1.0, 2.0], requires_grad=True)
    b = Tensor([3.0, 4.0], requires_grad=True)
    with Tape() as tape:
        loss = ops.sum_all(residual_aggregate([a, b], mode))
    reverse_grad(tape, loss)
    assert np.allclose(a.grad, expected)
    assert np.allclose(b.grad, expected)


def test_convex_aggregation_non_expansive_per_input():
    rng = RngState(2, "agg")
    for _ in range(50):
        a = rng.normal((8,), dtype=np.float64)
        a2 = rng.normal((8,), dtype=np.float64)
        b = rng.normal((8,), dtype=np.float64)
        lhs = residual_aggregate([Tensor(a), Tensor(b)], "convex").data \
            - residual_aggregate([Tensor(a2), Tensor(b)], "convex").data
        assert np.linalg.norm(lhs) <= 0.5 * np.linalg.norm(a - a2) + 1e-9


def test_conv_weight_matrix_shape():
    layer = Conv2D(3, 8, 3, rng=RngState(0, "c"))
    assert conv_weight_as_matrix(layer).shape == (8, 27)


def test_conv_weight_matrix_degenerate_kernel():
    layer = Conv2D(1, 1, 1, rng=RngState(0, "c"))
    m = conv_weight_as_matrix(layer)
    assert m.shape == (1, 1)
    assert m[0, 0] == layer.W.data[0, 0, 0, 0]


def test_conv_weight_matrix_round_trip_and_shared_storage():
    layer = Conv2D(3, 8, 3, rng=RngState(1, "c"))
    bank = layer.W.data.copy()
    m = conv_weight_as_matrix(layer)
    assert np.array_equal(m.reshape(8, 3, 3, 3), bank)
    m[0, 0] = 7.25  # view writes through to the filter bank
    assert layer.W.data[0, 0, 0, 0] == np.float32(7.25)


def test_maxpool_requires_even_dims():
    with pytest.raises(ShapeError):
        MaxPool2().forward(Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32)), EVAL)


def test_penultimate_tap():
    net = build_network({"family": "small-cnn", "classes": 3, "input_shape": [1, 12, 12]}, seed=0)
    x = Tensor(RngState(1, "pen").uniform(0, 1, (2, 1, 12, 12)))
    logits, pen = net.forward_penultimate(x, EVAL)
    head = net.last_dense()
    manual = head.forward(pen, EVAL)
    assert np.array_equal(logits.data, manual.data)
