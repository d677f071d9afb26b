import math

import numpy as np
import pytest

from dbkd.errors import ConfigInvalid, ShapeMismatch
from dbkd.oracle import (ConvLayer, DenseLayer, FlattenLayer, MaxPoolLayer,
                         NativeNet, NativeOracle, ReluLayer, SoftmaxLayer,
                         load_net, native_forward, predict_batch, save_net)
from dbkd.tensors import ImageTensor, RandomSource

from conftest import random_net
from reference_net import reference_forward


def _uniform_image(rng, shape=(1, 8, 8)):
    return rng.random(shape, dtype=np.float32)


def test_zero_dense_gives_uniform_probs():
    net = NativeNet((1, 2, 2), [
        FlattenLayer(),
        DenseLayer(np.zeros((4, 4), np.float32), np.zeros(4, np.float32)),
        SoftmaxLayer(),
    ])
    img = ImageTensor(np.random.default_rng(0).random((1, 2, 2)).astype(np.float32))
    probs = native_forward(net, img)
    assert np.allclose(probs.probs, 0.25, atol=1e-6)


def test_zero_conv_kernels_give_uniform_probs():
    net = NativeNet((1, 4, 4), [
        ConvLayer(np.zeros((2, 1, 3, 3), np.float32), np.zeros(2, np.float32), 1, 1),
        ReluLayer(),
        FlattenLayer(),
        DenseLayer(np.ones((3, 32), np.float32), np.zeros(3, np.float32)),
        SoftmaxLayer(),
    ])
    img = ImageTensor(np.random.default_rng(1).random((1, 4, 4)).astype(np.float32))
    probs = native_forward(net, img)
    assert np.allclose(probs.probs, 1 / 3, atol=1e-6)


def test_identity_kernel_reproduces_interior():
    kernel = np.zeros((1, 1, 3, 3), np.float32)
    kernel[0, 0, 1, 1] = 1.0
    layer = ConvLayer(kernel, np.zeros(1, np.float32), 1, 0)
    net_layers = [layer, FlattenLayer(),
                  DenseLayer(np.eye(36, dtype=np.float32), np.zeros(36, np.float32)),
                  SoftmaxLayer()]
    net = NativeNet((1, 8, 8), net_layers)
    rng = np.random.default_rng(2)
    img = rng.random((1, 8, 8)).astype(np.float32)
    # run just the conv through the reference path to isolate the feature map
    from reference_net import _conv
    feature = _conv(img.astype(np.float64), layer)
    assert np.allclose(feature[0], img[0, 1:7, 1:7], atol=1e-7)
    net.forward(img[None])  # and the full net composes


def test_two_class_linear_net_matches_scalar_softmax():
    # weights [1, -1] on a single-pixel image
    net = NativeNet((1, 1, 1), [
        FlattenLayer(),
        DenseLayer(np.array([[1.0], [-1.0]], np.float32), np.zeros(2, np.float32)),
        SoftmaxLayer(),
    ])
    v = 0.73
    probs = net.forward(np.full((1, 1, 1, 1), v, np.float32))[0]
    expected0 = 1.0 / (1.0 + math.exp(-2 * v))
    assert abs(float(probs[0]) - expected0) < 1e-6
    assert abs(float(probs[1]) - (1 - expected0)) < 1e-6


def test_predict_batch_cardinality_and_counter(base_rng):
    net = random_net(base_rng.substream("pb-net"))
    oracle = NativeOracle(net)
    rng = np.random.default_rng(5)
    images = [ImageTensor(rng.random((1, 8, 8)).astype(np.float32)) for _ in range(32)]
    probs = predict_batch(oracle, images)
    assert len(probs) == 32
    assert oracle.query_count == 32
    predict_batch(oracle, images[:5])
    assert oracle.query_count == 37


def test_predict_batch_preserves_order(base_rng):
    net = random_net(base_rng.substream("order-net"))
    oracle = NativeOracle(net)
    rng = np.random.default_rng(6)
    images = [ImageTensor(rng.random((1, 8, 8)).astype(np.float32)) for _ in range(8)]
    batch = predict_batch(oracle, images)
    singles = [predict_batch(oracle, [img])[0] for img in images]
    for got, want in zip(batch, singles):
        assert np.allclose(got.probs, want.probs, atol=1e-6)


def test_shape_mismatch_raises(base_rng):
    oracle = NativeOracle(random_net(base_rng.substream("shape-net")))
    with pytest.raises(ShapeMismatch):
        oracle.predict_array(np.zeros((2, 1, 9, 9), np.float32))


def test_purity_identical_batches(base_rng):
    oracle = NativeOracle(random_net(base_rng.substream("pure-net")))
    rng = np.random.default_rng(7)
    stack = rng.random((16, 1, 8, 8)).astype(np.float32)
    a = oracle.predict_array(stack)
    b = oracle.predict_array(stack)
    assert np.array_equal(a, b)


def test_batch_invariance(base_rng):
    oracle = NativeOracle(random_net(base_rng.substream("bi-net")))
    rng = np.random.default_rng(8)
    stack = rng.random((12, 1, 8, 8)).astype(np.float32)
    whole = oracle.predict_array(stack)
    parts = np.concatenate([oracle.predict_array(stack[:5]),
                            oracle.predict_array(stack[5:])])
    assert np.allclose(whole, parts, atol=1e-6)


def test_native_forward_matches_nested_loop_reference(base_rng):
    rng = base_rng.substream("ref-check")
    img_rng = np.random.default_rng(9)
    for trial in range(100):
        channels = (int(rng.integers(2, 5)),) if trial % 2 == 0 else \
                   (int(rng.integers(2, 4)), int(rng.integers(2, 4)))
        net = random_net(rng, input_shape=(1, 8, 8), n_classes=3,
                         conv_channels=channels)
        img = img_rng.random((1, 8, 8)).astype(np.float32)
        fast = net.forward(img[None])[0]
        slow = reference_forward(net, img)
        assert np.abs(fast - slow).max() < 1e-5


def test_forward_handles_stride_and_larger_pool(base_rng):
    # stride-2 conv and a 3x3/stride-1 pool exercise the generic paths
    rng = base_rng.substream("stride-net")
    layers = [
        ConvLayer(rng.standard_normal((3, 1, 3, 3)).astype(np.float32) * 0.4,
                  rng.standard_normal(3).astype(np.float32) * 0.1, stride=2, padding=1),
        ReluLayer(),
        MaxPoolLayer(3, 1),
        FlattenLayer(),
        DenseLayer(rng.standard_normal((2, 12)).astype(np.float32) * 0.3,
                   np.zeros(2, np.float32)),
        SoftmaxLayer(),
    ]
    net = NativeNet((1, 8, 8), layers)
    img = np.random.default_rng(11).random((1, 8, 8)).astype(np.float32)
    fast = net.forward(img[None])[0]
    slow = reference_forward(net, img)
    assert np.abs(fast - slow).max() < 1e-5


def test_layer_composition_validated():
    with pytest.raises(ConfigInvalid):
        NativeNet((1, 4, 4), [FlattenLayer(),
                              DenseLayer(np.zeros((2, 99), np.float32),
                                         np.zeros(2, np.float32)),
                              SoftmaxLayer()])
    with pytest.raises(ConfigInvalid):
        NativeNet((1, 4, 4), [FlattenLayer()])  # no softmax head


def test_weights_round_trip(tmp_path, base_rng):
    net = random_net(base_rng.substream("io-net"), conv_channels=(3, 5))
    path = tmp_path / "net.dbkn"
    save_net(path, net)
    loaded = load_net(path)
    img = np.random.default_rng(12).random((1, 8, 8)).astype(np.float32)
    assert np.array_equal(net.forward(img[None]), loaded.forward(img[None]))


def test_corrupt_weights_rejected(tmp_path, base_rng):
    net = random_net(base_rng.substream("bad-net"))
    path = tmp_path / "net.dbkn"
    save_net(path, net)
    raw = path.read_bytes()
    (tmp_path / "trunc.dbkn").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ConfigInvalid):
        load_net(tmp_path / "trunc.dbkn")
    (tmp_path / "magic.dbkn").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ConfigInvalid):
        load_net(tmp_path / "magic.dbkn")
