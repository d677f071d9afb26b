"""Forward-pass-only access to the model under inspection.

`ModelOracle` is the single channel the scanner has: batches of images in,
probability vectors out. `NativeNet` evaluates a small CNN (conv / relu /
max-pool / flatten / dense / softmax) entirely in numpy; it exists so the
scanner can be exercised against desk-scale models with known ground truth.
The evaluator compiles each net into a channels-last plan with preallocated
workspaces keyed by batch size, because the annealer queries the same batch
shape tens of thousands of times.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch
from .tensors import ImageTensor, ProbVector


@dataclass
class ConvLayer:
    weights: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: np.ndarray     # (out_ch,)
    stride: int = 1
    padding: int = 0


@dataclass
class ReluLayer:
    pass


@dataclass
class MaxPoolLayer:
    size: int = 2
    stride: int = 2


@dataclass
class FlattenLayer:
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in), `in` indexed in canonical C*H*W order
    bias: np.ndarray     # (out,)


@dataclass
class SoftmaxLayer:
    pass


Layer = ConvLayer | ReluLayer | MaxPoolLayer | FlattenLayer | DenseLayer | SoftmaxLayer


def conv_out_hw(h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> tuple[int, int]:
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return oh, ow


def pool_out_hw(h: int, w: int, size: int, stride: int) -> tuple[int, int]:
    return (h - size) // stride + 1, (w - size) // stride + 1


def trace_shapes(input_shape: tuple[int, int, int], layers: list[Layer]) -> list:
    """Walk the layer list and return the shape after each layer.

    Spatial shapes are (C, H, W) tuples; flat shapes are plain ints.
    Raises ConfigInvalid when consecutive layers do not compose.
    """
    shape = input_shape
    out = []
    for li, layer in enumerate(layers):
        if isinstance(layer, ConvLayer):
            if isinstance(shape, int):
                raise ConfigInvalid(f"layer {li}: conv after flatten")
            o, c, kh, kw = layer.weights.shape
            if c != shape[0]:
                raise ConfigInvalid(f"layer {li}: conv expects {c} channels, has {shape[0]}")
            oh, ow = conv_out_hw(shape[1], shape[2], kh, kw, layer.stride, layer.padding)
            if oh < 1 or ow < 1:
                raise ConfigInvalid(f"layer {li}: conv output collapses to {oh}x{ow}")
            if layer.bias.shape != (o,):
                raise ConfigInvalid(f"layer {li}: bias shape {layer.bias.shape} != ({o},)")
            shape = (o, oh, ow)
        elif isinstance(layer, MaxPoolLayer):
            if isinstance(shape, int):
                raise ConfigInvalid(f"layer {li}: pool after flatten")
            oh, ow = pool_out_hw(shape[1], shape[2], layer.size, layer.stride)
            if oh < 1 or ow < 1:
                raise ConfigInvalid(f"layer {li}: pool output collapses to {oh}x{ow}")
            shape = (shape[0], oh, ow)
        elif isinstance(layer, FlattenLayer):
            if isinstance(shape, int):
                raise ConfigInvalid(f"layer {li}: flatten after flatten")
            shape = shape[0] * shape[1] * shape[2]
        elif isinstance(layer, DenseLayer):
            width = shape if isinstance(shape, int) else None
            if width is None:
                raise ConfigInvalid(f"layer {li}: dense requires flatten first")
            o, i = layer.weights.shape
            if i != width:
                raise ConfigInvalid(f"layer {li}: dense expects {i} inputs, has {width}")
            shape = o
        elif isinstance(layer, (ReluLayer, SoftmaxLayer)):
            pass
        else:
            raise ConfigInvalid(f"layer {li}: unknown layer kind {type(layer).__name__}")
        out.append(shape)
    return out


def _conv_gather_index(h: int, w: int, c: int, kh: int, kw: int, pad: int, stride: int):
    """Flat gather index turning a padded (B,Hp,Wp,C) buffer into im2col rows.

    Returns (idx, oh, ow) where idx has shape (P, K): P output positions,
    K = kh*kw*c taps ordered (i, j, channel) to match the weight matrix.
    """
    hp, wp = h + 2 * pad, w + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    i = np.repeat(np.arange(kh), kw * c)
    j = np.tile(np.repeat(np.arange(kw), c), kh)
    ch = np.tile(np.arange(c), kh * kw)
    oi = stride * np.repeat(np.arange(oh), ow)
    oj = stride * np.tile(np.arange(ow), oh)
    idx = ((oi[:, None] + i[None, :]) * wp + (oj[:, None] + j[None, :])) * c + ch[None, :]
    return idx.astype(np.intp), oh, ow


def _pool_gather_index(h: int, w: int, c: int, size: int, stride: int):
    """(P, win) position index over a (H,W) grid for generic max-pooling."""
    oh = (h - size) // stride + 1
    ow = (w - size) // stride + 1
    i = np.repeat(np.arange(size), size)
    j = np.tile(np.arange(size), size)
    oi = stride * np.repeat(np.arange(oh), ow)
    oj = stride * np.tile(np.arange(ow), oh)
    idx = (oi[:, None] + i[None, :]) * w + (oj[:, None] + j[None, :])
    return idx.astype(np.intp), oh, ow


class _Plan:
    """Compiled channels-last execution of one net at one batch size."""

    def __init__(self, net: "NativeNet", batch: int):
        self.batch = batch
        self.steps = []
        c, h, w = net.input_shape
        self.in_hwc = np.empty((batch, h, w, c), dtype=np.float32)
        shape = (c, h, w)
        buf = self.in_hwc
        flat_perm = None  # canonical C*H*W index -> channels-last index
        for layer in net.layers:
            if isinstance(layer, ConvLayer):
                cc, hh, ww = shape
                o, _, kh, kw = layer.weights.shape
                idx, oh, ow = _conv_gather_index(hh, ww, cc, kh, kw, layer.padding, layer.stride)
                pad_buf = np.zeros((batch, hh + 2 * layer.padding, ww + 2 * layer.padding, cc), np.float32)
                gath = np.empty((batch, idx.size), np.float32)
                out = np.empty((batch * oh * ow, o), np.float32)
                # weight matrix (K, O) ordered (i, j, channel) x out
                wmat = np.ascontiguousarray(
                    layer.weights.transpose(2, 3, 1, 0).reshape(-1, o).astype(np.float32)
                )
                self.steps.append(("conv", pad_buf, layer.padding, idx.ravel(), gath,
                                   wmat, layer.bias.astype(np.float32), out, (oh, ow, o)))
                shape = (o, oh, ow)
                buf = out
            elif isinstance(layer, ReluLayer):
                self.steps.append(("relu", buf))
            elif isinstance(layer, MaxPoolLayer):
                cc, hh, ww = shape
                oh, ow = pool_out_hw(hh, ww, layer.size, layer.stride)
                out = np.empty((batch, oh, ow, cc), np.float32)
                if layer.size == layer.stride and hh % layer.size == 0 and ww % layer.size == 0:
                    self.steps.append(("pool2", buf, (hh, ww, cc), layer.size, out))
                else:
                    idx, _, _ = _pool_gather_index(hh, ww, cc, layer.size, layer.stride)
                    pidx = (idx[:, :, None] * cc + np.arange(cc)[None, None, :]).reshape(idx.shape[0], -1)
                    gath = np.empty((batch, pidx.size), np.float32)
                    self.steps.append(("poolg", buf, (hh, ww, cc), pidx.astype(np.intp).ravel(),
                                       gath, (idx.shape[0], idx.shape[1], cc), out))
                shape = (cc, oh, ow)
                buf = out
            elif isinstance(layer, FlattenLayer):
                cc, hh, ww = shape
                # canonical order is C,H,W; internal buffers are H,W,C
                canon = np.arange(cc * hh * ww).reshape(cc, hh, ww)
                flat_perm = canon.transpose(1, 2, 0).reshape(-1)
                shape = cc * hh * ww
            elif isinstance(layer, DenseLayer):
                wts = layer.weights.astype(np.float32)
                if flat_perm is not None:
                    wts = wts[:, flat_perm]
                    flat_perm = None
                out = np.empty((batch, wts.shape[0]), np.float32)
                self.steps.append(("dense", buf, np.ascontiguousarray(wts.T),
                                   layer.bias.astype(np.float32), out))
                shape = wts.shape[0]
                buf = out
            elif isinstance(layer, SoftmaxLayer):
                self.steps.append(("softmax", buf))

    def run(self, stack: np.ndarray) -> np.ndarray:
        np.copyto(self.in_hwc, stack.transpose(0, 2, 3, 1))
        self._prev = self.in_hwc
        b = self.batch
        for step in self.steps:
            kind = step[0]
            if kind == "conv":
                _, pad_buf, pad, ridx, gath, wmat, bias, out, (oh, ow, o) = step
                src = self._prev
                if pad:
                    hh, ww = src.shape[1], src.shape[2]
                    pad_buf[:, pad:pad + hh, pad:pad + ww, :] = src
                    flat = pad_buf.reshape(b, -1)
                else:
                    flat = np.ascontiguousarray(src).reshape(b, -1)
                np.take(flat, ridx, axis=1, out=gath)
                k = wmat.shape[0]
                np.matmul(gath.reshape(-1, k), wmat, out=out)
                out += bias
                self._prev = out.reshape(b, oh, ow, o)
            elif kind == "relu":
                np.maximum(self._prev, 0.0, out=self._prev)
            elif kind == "pool2":
                _, _, (hh, ww, cc), size, out = step
                x = self._prev
                np.copyto(out, x[:, 0::size, 0::size, :][:, : out.shape[1], : out.shape[2]])
                for di in range(size):
                    for dj in range(size):
                        if di == 0 and dj == 0:
                            continue
                        np.maximum(out, x[:, di::size, dj::size, :][:, : out.shape[1], : out.shape[2]], out=out)
                self._prev = out
            elif kind == "poolg":
                _, _, (hh, ww, cc), ridx, gath, (p, win, _), out = step
                flat = np.ascontiguousarray(self._prev).reshape(b, -1)
                np.take(flat, ridx, axis=1, out=gath)
                np.max(gath.reshape(b, p, win, cc), axis=2, out=out.reshape(b, p, cc))
                self._prev = out
            elif kind == "dense":
                _, _, wts_t, bias, out = step
                np.matmul(self._prev.reshape(b, -1), wts_t, out=out)
                out += bias
                self._prev = out
            elif kind == "softmax":
                z = self._prev
                z -= z.max(axis=1, keepdims=True)
                np.exp(z, out=z)
                z /= z.sum(axis=1, keepdims=True)
        result = self._prev.copy()
        self._prev = None
        return result


class NativeNet:
    """A small feed-forward CNN with a softmax head, evaluated in numpy."""

    def __init__(self, input_shape: tuple[int, int, int], layers: list[Layer]):
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers = list(layers)
        shapes = trace_shapes(self.input_shape, self.layers)
        if not self.layers or not isinstance(self.layers[-1], SoftmaxLayer):
            raise ConfigInvalid("net must end with a softmax layer")
        if not isinstance(shapes[-1], int):
            raise ConfigInvalid("net must flatten to a class vector before softmax")
        self.class_count = shapes[-1]
        self._plans: dict[int, _Plan] = {}

    def forward(self, stack: np.ndarray) -> np.ndarray:
        """Run a (B, C, H, W) float32 batch; returns (B, n) probabilities."""
        stack = np.asarray(stack, dtype=np.float32)
        if stack.ndim != 4 or stack.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"batch shape {stack.shape} != (B, {self.input_shape})")
        b = stack.shape[0]
        plan = self._plans.get(b)
        if plan is None:
            plan = _Plan(self, b)
            if len(self._plans) < 8:  # bound the workspace cache
                self._plans[b] = plan
        return plan.run(stack)

    def __getstate__(self):
        return {"input_shape": self.input_shape, "layers": self.layers,
                "class_count": self.class_count}

    def __setstate__(self, state):
        self.input_shape = state["input_shape"]
        self.layers = state["layers"]
        self.class_count = state["class_count"]
        self._plans = {}


def native_forward(net: NativeNet, image: ImageTensor) -> ProbVector:
    """Single-image forward pass; deterministic, softmax output."""
    probs = net.forward(image.data[None])[0]
    return ProbVector(probs)


class ModelOracle:
    """Base query interface: batches of images in, probability rows out.

    Subclasses implement `_predict(stack) -> (B, n) float32`. The base class
    validates shapes, preserves order, and counts every image evaluated so
    query budgets can be reported.
    """

    def __init__(self, class_count: int, input_shape: tuple[int, int, int]):
        self.class_count = int(class_count)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.query_count = 0

    def _predict(self, stack: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def predict_array(self, stack: np.ndarray) -> np.ndarray:
        stack = np.asarray(stack, dtype=np.float32)
        if stack.ndim != 4 or stack.shape[1:] != self.input_shape:
            raise ShapeMismatch(f"batch shape {stack.shape} != (B, {self.input_shape})")
        probs = self._predict(stack)
        if probs.shape != (stack.shape[0], self.class_count):
            raise ShapeMismatch(f"oracle produced {probs.shape}, expected "
                                f"({stack.shape[0]}, {self.class_count})")
        self.query_count += stack.shape[0]
        return probs


def predict_batch(oracle: ModelOracle, images: list[ImageTensor]) -> list[ProbVector]:
    """Query the oracle on a list of images, one ProbVector per image."""
    if not images:
        return []
    stack = np.stack([img.data for img in images])
    probs = oracle.predict_array(stack)
    return [ProbVector(row) for row in probs]


class NativeOracle(ModelOracle):
    """Oracle over an in-process NativeNet; immutable after construction."""

    def __init__(self, net: NativeNet):
        super().__init__(net.class_count, net.input_shape)
        self.net = net

    def _predict(self, stack: np.ndarray) -> np.ndarray:
        return self.net.forward(stack)


# --- weights container -------------------------------------------------------
#
# Layout (little-endian):
#   magic b"DBKN", version u16
#   channels u16, height u16, width u16      input shape
#   layer_count u16
#   per layer: kind u8, then
#     conv (1):    out u16, in u16, kh u16, kw u16, stride u16, padding u16,
#                  f32 weights in (out, in, kh, kw) order, f32 bias (out)
#     relu (2):    no payload
#     maxpool (3): size u16, stride u16
#     flatten (4): no payload
#     dense (5):   out u32, in u32, f32 weights row-major (out, in), f32 bias
#     softmax (6): no payload

WEIGHTS_MAGIC = b"DBKN"
WEIGHTS_VERSION = 1


def save_net(path, net: NativeNet) -> None:
    with open(path, "wb") as fh:
        c, h, w = net.input_shape
        fh.write(struct.pack("<4sHHHHH", WEIGHTS_MAGIC, WEIGHTS_VERSION, c, h, w,
                             len(net.layers)))
        for layer in net.layers:
            if isinstance(layer, ConvLayer):
                o, ci, kh, kw = layer.weights.shape
                fh.write(struct.pack("<BHHHHHH", 1, o, ci, kh, kw, layer.stride, layer.padding))
                fh.write(layer.weights.astype("<f4").tobytes())
                fh.write(layer.bias.astype("<f4").tobytes())
            elif isinstance(layer, ReluLayer):
                fh.write(struct.pack("<B", 2))
            elif isinstance(layer, MaxPoolLayer):
                fh.write(struct.pack("<BHH", 3, layer.size, layer.stride))
            elif isinstance(layer, FlattenLayer):
                fh.write(struct.pack("<B", 4))
            elif isinstance(layer, DenseLayer):
                o, i = layer.weights.shape
                fh.write(struct.pack("<BII", 5, o, i))
                fh.write(layer.weights.astype("<f4").tobytes())
                fh.write(layer.bias.astype("<f4").tobytes())
            elif isinstance(layer, SoftmaxLayer):
                fh.write(struct.pack("<B", 6))


def load_net(path) -> NativeNet:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        magic, version, c, h, w, n_layers = struct.unpack_from("<4sHHHHH", raw, 0)
        if magic != WEIGHTS_MAGIC:
            raise ConfigInvalid(f"{path}: bad magic {magic!r}")
        if version != WEIGHTS_VERSION:
            raise ConfigInvalid(f"{path}: unsupported version {version}")
        off = 14
        layers: list[Layer] = []
        for _ in range(n_layers):
            (kind,) = struct.unpack_from("<B", raw, off)
            off += 1
            if kind == 1:
                o, ci, kh, kw, stride, pad = struct.unpack_from("<HHHHHH", raw, off)
                off += 12
                n = o * ci * kh * kw
                wts = np.frombuffer(raw, "<f4", n, off).reshape(o, ci, kh, kw).copy()
                off += 4 * n
                bias = np.frombuffer(raw, "<f4", o, off).copy()
                off += 4 * o
                layers.append(ConvLayer(wts, bias, stride, pad))
            elif kind == 2:
                layers.append(ReluLayer())
            elif kind == 3:
                size, stride = struct.unpack_from("<HH", raw, off)
                off += 4
                layers.append(MaxPoolLayer(size, stride))
            elif kind == 4:
                layers.append(FlattenLayer())
            elif kind == 5:
                o, i = struct.unpack_from("<II", raw, off)
                off += 8
                wts = np.frombuffer(raw, "<f4", o * i, off).reshape(o, i).copy()
                off += 4 * o * i
                bias = np.frombuffer(raw, "<f4", o, off).copy()
                off += 4 * o
                layers.append(DenseLayer(wts, bias))
            elif kind == 6:
                layers.append(SoftmaxLayer())
            else:
                raise ConfigInvalid(f"{path}: unknown layer kind {kind}")
        if off != len(raw):
            raise ConfigInvalid(f"{path}: {len(raw) - off} trailing bytes")
    except (struct.error, ValueError) as exc:
        raise ConfigInvalid(f"{path}: truncated or malformed weights file ({exc})") from exc
    return NativeNet((c, h, w), layers)
