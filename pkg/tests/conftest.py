import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from dbkd.oracle import (ConvLayer, DenseLayer, FlattenLayer, MaxPoolLayer,
                         NativeNet, ReluLayer, SoftmaxLayer)
from dbkd.tensors import RandomSource


def random_net(rng: RandomSource, input_shape=(1, 8, 8), n_classes=3,
               conv_channels=(4,), kernel=3, stride=1, padding=1) -> NativeNet:
    """A small random conv net for oracle tests."""
    c, h, w = input_shape
    layers = []
    in_ch = c
    for out_ch in conv_channels:
        wts = rng.standard_normal((out_ch, in_ch, kernel, kernel)).astype(np.float32) * 0.5
        layers += [ConvLayer(wts, rng.standard_normal(out_ch).astype(np.float32) * 0.1,
                             stride, padding),
                   ReluLayer(), MaxPoolLayer(2, 2)]
        in_ch = out_ch
        h = (h + 2 * padding - kernel) // stride + 1
        w = (w + 2 * padding - kernel) // stride + 1
        h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
    layers.append(FlattenLayer())
    feat = in_ch * h * w
    layers.append(DenseLayer(rng.standard_normal((n_classes, feat)).astype(np.float32) * 0.3,
                             rng.standard_normal(n_classes).astype(np.float32) * 0.1))
    layers.append(SoftmaxLayer())
    return NativeNet(input_shape, layers)


@pytest.fixture(scope="session")
def base_rng():
    return RandomSource(20240817)
