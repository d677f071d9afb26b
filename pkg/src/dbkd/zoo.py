"""Test subjects for the scanner: synthetic datasets, desk-scale trained
clean/backdoored CNNs (data poisoning), and analytic planted-backdoor
oracles with exact ground truth.

The synthetic task is n well-separated classes of blob (or stripe) images
over a faint checkerboard carrier plus pixel noise. The carrier gives
warping attacks a learnable signature at 12x12 scale; the blobs keep the
classes easy for a two-conv network.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigInvalid, DivergenceDetected
from .objective import TargetLabelFn, phi_array, asr_from_rows, validate_label_fn
from .oracle import (ConvLayer, DenseLayer, FlattenLayer, MaxPoolLayer, ModelOracle,
                     NativeNet, NativeOracle, ReluLayer, SoftmaxLayer,
                     _conv_gather_index, load_net, save_net)
from .tensors import RandomSource, ValidationBatch
from .triggers import (BlendTrigger, PatchTrigger, Trigger, apply_to_stack,
                       trigger_from_json, trigger_to_json)

# --- synthetic data -----------------------------------------------------------


@dataclass(frozen=True)
class DatasetSpec:
    class_count: int = 4
    channels: int = 1
    height: int = 12
    width: int = 12
    train_per_class: int = 400
    test_per_class: int = 100
    style: str = "blob"        # "blob" or "stripe"
    noise: float = 0.10        # uniform pixel noise half-range
    carrier_amp: float = 0.25  # checkerboard carrier amplitude
    pattern_amp: float = 0.55  # class pattern amplitude
    base: float = 0.10

    def __post_init__(self):
        if self.class_count < 2:
            raise ConfigInvalid("need at least 2 classes")
        if self.height < 8 or self.width < 8:
            raise ConfigInvalid("images must be at least 8x8")
        if self.style not in ("blob", "stripe"):
            raise ConfigInvalid(f"unknown style {self.style!r}")

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.channels, self.height, self.width)


@dataclass
class SyntheticDataset:
    spec: DatasetSpec
    train_x: np.ndarray  # (N, C, H, W) float32 in [0,1]
    train_y: np.ndarray  # (N,) int64
    test_x: np.ndarray
    test_y: np.ndarray

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def validation_batch(self, size: int, rng: RandomSource) -> ValidationBatch:
        """Class-stratified sample from the test split."""
        idx = _stratified_indices(self.test_y, self.class_count, size, rng)
        return ValidationBatch.from_arrays(self.test_x[idx], self.test_y[idx],
                                           self.class_count)

    def per_class_batches(self, per_class: int, rng: RandomSource) -> dict[int, ValidationBatch]:
        out = {}
        for c in range(self.class_count):
            pool = np.flatnonzero(self.test_y == c)
            take = pool[:per_class] if per_class <= len(pool) else pool
            take = rng.permutation(take)[:per_class]
            out[c] = ValidationBatch.from_arrays(self.test_x[take], self.test_y[take],
                                                 self.class_count)
        return out


def _stratified_indices(labels: np.ndarray, n: int, size: int, rng: RandomSource) -> np.ndarray:
    per = [np.flatnonzero(labels == c) for c in range(n)]
    picks = []
    for c in range(n):
        per[c] = rng.permutation(per[c])
    i = 0
    while len(picks) < size:
        c = i % n
        pos = i // n
        if pos < len(per[c]):
            picks.append(per[c][pos])
        i += 1
        if i > size * n + n:
            break
    return np.array(picks[:size], dtype=np.intp)


def _class_pattern(spec: DatasetSpec, c: int) -> np.ndarray:
    h, w = spec.height, spec.width
    rows = np.arange(h, dtype=np.float64)[:, None]
    cols = np.arange(w, dtype=np.float64)[None, :]
    if spec.style == "blob":
        angle = 2.0 * math.pi * c / spec.class_count
        radius = min(h, w) / 3.4
        cy = (h - 1) / 2.0 + radius * math.sin(angle)
        cx = (w - 1) / 2.0 + radius * math.cos(angle)
        sigma = min(h, w) / 6.5
        return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2 * sigma ** 2))
    # stripes: class-dependent orientation and period
    angle = math.pi * c / spec.class_count
    period = 3.0 + (c % 3)
    phase = (rows * math.cos(angle) + cols * math.sin(angle)) / period
    return 0.5 + 0.5 * np.sin(2.0 * math.pi * phase)


def make_dataset(spec: DatasetSpec, rng: RandomSource) -> SyntheticDataset:
    """Deterministic class-balanced train/test splits, test drawn separately."""
    h, w = spec.height, spec.width
    checker = ((np.add.outer(np.arange(h), np.arange(w)) % 2)).astype(np.float64)
    patterns = [_class_pattern(spec, c) for c in range(spec.class_count)]

    def draw(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        xs, ys = [], []
        for c in range(spec.class_count):
            base = (spec.base + spec.carrier_amp * checker
                    + spec.pattern_amp * patterns[c])
            noise = rng.uniform(-spec.noise, spec.noise,
                                size=(per_class, spec.channels, h, w))
            imgs = np.clip(base[None, None] + noise, 0.0, 1.0).astype(np.float32)
            xs.append(imgs)
            ys.append(np.full(per_class, c, dtype=np.int64))
        x = np.concatenate(xs)
        y = np.concatenate(ys)
        order = rng.permutation(len(y))
        return x[order], y[order]

    train_x, train_y = draw(spec.train_per_class)
    test_x, test_y = draw(spec.test_per_class)
    return SyntheticDataset(spec, train_x, train_y, test_x, test_y)


# --- poisoning ----------------------------------------------------------------


@dataclass(frozen=True)
class PoisonSpec:
    kind: str                 # template kind of the planted trigger
    trigger: Trigger
    label_fn: TargetLabelFn
    fraction: float = 0.10
    # Per-sample jitter applied to the trigger while poisoning (never to the
    # ground-truth trigger itself). Real attacks survive augmentation
    # pipelines, which widens the basin the model learns; desk-scale models
    # need the same widening or the backdoor degenerates to an exact-match
    # lookup. Zero keeps exact-application semantics.
    pattern_jitter: float = 0.0
    origin_jitter: int = 0
    mask_dropout: float = 0.0  # patch only: chance to skip each mask cell

    def __post_init__(self):
        if not 0.0 < self.fraction < 1.0:
            raise ConfigInvalid("poison fraction must be in (0, 1)")
        if self.pattern_jitter < 0 or self.origin_jitter < 0 or self.mask_dropout < 0:
            raise ConfigInvalid("jitter amounts must be non-negative")


@dataclass
class PoisonResult:
    dataset: SyntheticDataset       # poisoned train split, untouched test split
    poisoned_indices: np.ndarray
    triggered_test_x: np.ndarray    # eligible test samples with the trigger applied
    triggered_test_targets: np.ndarray  # phi(y) for those samples


def _eligible(labels: np.ndarray, fn: TargetLabelFn) -> np.ndarray:
    from .objective import One2One
    if isinstance(fn, One2One):
        return np.flatnonzero(labels == fn.s)
    return np.arange(len(labels))


def _jittered(trig: Trigger, spec: PoisonSpec, image_shape, rng: RandomSource) -> Trigger:
    if spec.pattern_jitter <= 0 and spec.origin_jitter <= 0 and spec.mask_dropout <= 0:
        return trig
    _, ih, iw = image_shape
    if isinstance(trig, PatchTrigger):
        pattern = trig.pattern
        if spec.pattern_jitter > 0:
            noise = rng.uniform(-spec.pattern_jitter, spec.pattern_jitter,
                                size=pattern.shape)
            pattern = np.clip(pattern + noise, 0.0, 1.0).astype(np.float32)
        r0, c0 = trig.origin
        if spec.origin_jitter > 0:
            j = spec.origin_jitter
            r0 = int(np.clip(r0 + rng.integers(-j, j + 1), 0, ih - trig.height))
            c0 = int(np.clip(c0 + rng.integers(-j, j + 1), 0, iw - trig.width))
        mask = trig.shape_mask
        if spec.mask_dropout > 0:
            keep = rng.random(mask.shape) >= spec.mask_dropout
            thinned = mask & keep
            if thinned.any():
                mask = thinned
        return PatchTrigger(pattern, (r0, c0), mask)
    if isinstance(trig, BlendTrigger) and spec.pattern_jitter > 0:
        noise = rng.uniform(-spec.pattern_jitter, spec.pattern_jitter,
                            size=trig.pattern.shape)
        pattern = np.clip(trig.pattern + noise, 0.0, 1.0).astype(np.float32)
        return replace(trig, pattern=pattern)
    if isinstance(trig, NoiseTrigger) and spec.pattern_jitter > 0:
        jitter = rng.uniform(-spec.pattern_jitter * trig.bound,
                             spec.pattern_jitter * trig.bound,
                             size=trig.pattern.shape)
        pattern = np.clip(trig.pattern + jitter, -trig.bound, trig.bound).astype(np.float32)
        return replace(trig, pattern=pattern)
    return trig


def poison_dataset(ds: SyntheticDataset, spec: PoisonSpec, rng: RandomSource) -> PoisonResult:
    """Replace a fraction of eligible train samples with triggered, relabeled
    copies; the test split is untouched. Also returns a triggered test split
    for ground-truth ASR measurement."""
    validate_label_fn(spec.label_fn, ds.class_count)
    pool = _eligible(ds.train_y, spec.label_fn)
    count = int(round(spec.fraction * len(pool)))
    count = max(1, count)
    chosen = rng.permutation(pool)[:count]
    train_x = ds.train_x.copy()
    train_y = ds.train_y.copy()
    if spec.pattern_jitter > 0 or spec.origin_jitter > 0:
        for i in chosen:
            jt = _jittered(spec.trigger, spec, ds.spec.image_shape, rng)
            train_x[i] = apply_to_stack(jt, train_x[i][None])[0]
    else:
        train_x[chosen] = apply_to_stack(spec.trigger, train_x[chosen])
    train_y[chosen] = phi_array(spec.label_fn, train_y[chosen], ds.class_count)
    test_pool = _eligible(ds.test_y, spec.label_fn)
    trig_x = apply_to_stack(spec.trigger, ds.test_x[test_pool])
    trig_t = phi_array(spec.label_fn, ds.test_y[test_pool], ds.class_count)
    poisoned = SyntheticDataset(ds.spec, train_x, train_y, ds.test_x, ds.test_y)
    return PoisonResult(poisoned, chosen, trig_x, trig_t)


# --- training -----------------------------------------------------------------


@dataclass(frozen=True)
class ArchSpec:
    """A conv-relu-pool stack followed by one dense softmax head."""

    conv_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    pool: int = 2

    def build_layers(self, input_shape, class_count, rng: RandomSource) -> list:
        c, h, w = input_shape
        layers = []
        in_ch = c
        for out_ch in self.conv_channels:
            fan_in = in_ch * self.kernel * self.kernel
            wts = (rng.standard_normal((out_ch, in_ch, self.kernel, self.kernel))
                   * math.sqrt(2.0 / fan_in)).astype(np.float32)
            layers.append(ConvLayer(wts, np.zeros(out_ch, np.float32), stride=1,
                                    padding=self.kernel // 2))
            layers.append(ReluLayer())
            layers.append(MaxPoolLayer(self.pool, self.pool))
            in_ch = out_ch
            h //= self.pool
            w //= self.pool
        layers.append(FlattenLayer())
        fan_in = in_ch * h * w
        wts = (rng.standard_normal((class_count, fan_in))
               * math.sqrt(2.0 / fan_in)).astype(np.float32)
        layers.append(DenseLayer(wts, np.zeros(class_count, np.float32)))
        layers.append(SoftmaxLayer())
        return layers


@dataclass
class TrainReport:
    train_accuracy: float
    test_accuracy: float
    losses: list[float] = field(default_factory=list)


class _ConvState:
    """Channels-last conv training state with im2col caching."""

    def __init__(self, layer: ConvLayer, h: int, w: int):
        o, c, kh, kw = layer.weights.shape
        self.kh, self.kw, self.c, self.o = kh, kw, c, o
        self.pad = layer.padding
        self.h, self.w = h, w
        # forward weight matrix (kh*kw*C, O), taps ordered (i, j, channel)
        self.wmat = np.ascontiguousarray(
            layer.weights.transpose(2, 3, 1, 0).reshape(-1, o).astype(np.float32))
        self.bias = layer.bias.astype(np.float32).copy()
        self.idx, self.oh, self.ow = _conv_gather_index(h, w, c, kh, kw, self.pad, 1)
        # backward: full correlation of dOut with the flipped kernel
        bpad = kh - 1 - self.pad
        self.bidx, bh, bw = _conv_gather_index(self.oh, self.ow, o, kh, kw, bpad, 1)
        assert (bh, bw) == (h, w)
        self.v_w = np.zeros_like(self.wmat)
        self.v_b = np.zeros_like(self.bias)

    def rot_mat(self) -> np.ndarray:
        # (kh*kw*O, C): flipped-kernel matrix for the input gradient
        wm = self.wmat.reshape(self.kh, self.kw, self.c, self.o)
        rot = wm[::-1, ::-1].transpose(0, 1, 3, 2)  # (kh, kw, O, C)
        return np.ascontiguousarray(rot.reshape(-1, self.c))

    def to_layer(self) -> ConvLayer:
        wts = self.wmat.reshape(self.kh, self.kw, self.c, self.o).transpose(3, 2, 0, 1)
        return ConvLayer(np.ascontiguousarray(wts), self.bias.copy(), 1, self.pad)


def _pad_hwc(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    b, h, w, c = x.shape
    out = np.zeros((b, h + 2 * pad, w + 2 * pad, c), np.float32)
    out[:, pad:pad + h, pad:pad + w] = x
    return out


def _gather(x: np.ndarray, idx: np.ndarray) -> np.ndarray:
    b = x.shape[0]
    return x.reshape(b, -1)[:, idx.ravel()].reshape(b * idx.shape[0], idx.shape[1])


def train_model(ds: SyntheticDataset, arch: ArchSpec, epochs: int, rng: RandomSource,
                lr: float = 0.08, momentum: float = 0.9, batch_size: int = 32,
                aug_prob: float = 0.45, aug_max_side: int = 4,
                ) -> tuple[NativeNet, TrainReport]:
    """Mini-batch SGD with cross-entropy on the conv/relu/pool/dense stack.

    Deterministic given the RandomSource. Raises DivergenceDetected when the
    loss goes non-finite.

    Random-patch augmentation (a small box of uniform noise stamped on a
    fraction of each minibatch, labels unchanged) keeps small nets from
    being trivially flipped by tiny adversarial patches. Poisoned samples
    still carry their trigger with the flipped label, so planted backdoors
    stay learnable.
    """
    spec = ds.spec
    c, h, w = spec.image_shape
    n = ds.class_count
    if arch.pool != 2:
        raise ConfigInvalid("training supports pool size 2 only")
    layers = arch.build_layers(spec.image_shape, n, rng)
    convs: list[_ConvState] = []
    hh, ww = h, w
    for layer in layers:
        if isinstance(layer, ConvLayer):
            convs.append(_ConvState(layer, hh, ww))
        elif isinstance(layer, MaxPoolLayer):
            if hh % layer.size or ww % layer.size:
                raise ConfigInvalid("image dims must divide by the pooling factor")
            hh //= layer.size
            ww //= layer.size
    dense = [l for l in layers if isinstance(l, DenseLayer)][0]
    feat = dense.weights.shape[1]
    # canonical C,H,W column order -> channels-last order used in training
    last_c = arch.conv_channels[-1] if arch.conv_channels else c
    canon = np.arange(feat).reshape(last_c, hh, ww).transpose(1, 2, 0).reshape(-1)
    w_dense = np.ascontiguousarray(dense.weights[:, canon].T.astype(np.float32))
    b_dense = dense.bias.astype(np.float32).copy()
    v_wd = np.zeros_like(w_dense)
    v_bd = np.zeros_like(b_dense)

    def forward(xb: np.ndarray, train: bool):
        acts = []
        cur = np.ascontiguousarray(xb.transpose(0, 2, 3, 1))
        for cs in convs:
            cols = _gather(_pad_hwc(cur, cs.pad), cs.idx)
            z = cols @ cs.wmat + cs.bias
            z = z.reshape(-1, cs.oh, cs.ow, cs.o)
            relu_mask = z > 0
            z = z * relu_mask
            bsz = z.shape[0]
            win = z.reshape(bsz, cs.oh // 2, 2, cs.ow // 2, 2, cs.o)
            win = win.transpose(0, 1, 3, 2, 4, 5).reshape(bsz, (cs.oh // 2) * (cs.ow // 2), 4, cs.o)
            arg = win.argmax(axis=2)
            pooled = np.take_along_axis(win, arg[:, :, None, :], axis=2)[:, :, 0, :]
            pooled = pooled.reshape(bsz, cs.oh // 2, cs.ow // 2, cs.o)
            if train:
                acts.append((cols, relu_mask, arg, z.shape))
            cur = pooled
        flat = cur.reshape(cur.shape[0], -1)
        logits = flat @ w_dense + b_dense
        logits -= logits.max(axis=1, keepdims=True)
        ez = np.exp(logits)
        probs = ez / ez.sum(axis=1, keepdims=True)
        return probs, flat, acts

    def backward(xb, probs, flat, acts, onehot, lr_t):
        nonlocal w_dense, b_dense
        bsz = xb.shape[0]
        dlogits = (probs - onehot) / bsz
        d_wd = flat.T @ dlogits
        d_bd = dlogits.sum(axis=0)
        dflat = dlogits @ w_dense.T
        v_wd[:] = momentum * v_wd - lr_t * d_wd
        v_bd[:] = momentum * v_bd - lr_t * d_bd
        w_dense += v_wd
        b_dense += v_bd
        cur_grad = dflat
        for ci in range(len(convs) - 1, -1, -1):
            cs = convs[ci]
            cols, relu_mask, arg, zshape = acts[ci]
            poh, pow_ = cs.oh // 2, cs.ow // 2
            dpool = cur_grad.reshape(bsz, poh * pow_, cs.o)
            dwin = np.zeros((bsz, poh * pow_, 4, cs.o), np.float32)
            np.put_along_axis(dwin, arg[:, :, None, :], dpool[:, :, None, :], axis=2)
            dz = dwin.reshape(bsz, poh, pow_, 2, 2, cs.o).transpose(0, 1, 3, 2, 4, 5)
            dz = np.ascontiguousarray(dz).reshape(zshape)
            dz = dz * relu_mask
            dflat2 = dz.reshape(-1, cs.o)
            d_w = cols.T @ dflat2
            d_b = dflat2.sum(axis=0)
            if ci > 0:
                bcols = _gather(_pad_hwc(dz, cs.kh - 1 - cs.pad), cs.bidx)
                dx = bcols @ cs.rot_mat()
                cur_grad = dx.reshape(bsz, cs.h, cs.w, cs.c)
            cs.v_w[:] = momentum * cs.v_w - lr_t * d_w
            cs.v_b[:] = momentum * cs.v_b - lr_t * d_b
            cs.wmat += cs.v_w
            cs.bias += cs.v_b

    def augment(xb: np.ndarray) -> None:
        if aug_prob <= 0:
            return
        hit = rng.random(len(xb)) < aug_prob
        for i in np.flatnonzero(hit):
            ah = int(rng.integers(1, aug_max_side + 1))
            aw = int(rng.integers(1, aug_max_side + 1))
            r0 = int(rng.integers(0, h - ah + 1))
            c0 = int(rng.integers(0, w - aw + 1))
            xb[i, :, r0:r0 + ah, c0:c0 + aw] = rng.random((c, ah, aw), dtype=np.float32)

    n_train = len(ds.train_y)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(n_train)
        lr_t = lr * (0.5 ** (epoch // 6))
        epoch_loss = 0.0
        for start in range(0, n_train - batch_size + 1, batch_size):
            idx = order[start:start + batch_size]
            xb = ds.train_x[idx]
            augment(xb)
            onehot = np.zeros((len(idx), n), np.float32)
            onehot[np.arange(len(idx)), ds.train_y[idx]] = 1.0
            probs, flat, acts = forward(xb, train=True)
            loss = float(-np.mean(np.log(probs[np.arange(len(idx)), ds.train_y[idx]] + 1e-9)))
            if not math.isfinite(loss):
                raise DivergenceDetected(f"loss became {loss} at epoch {epoch}")
            epoch_loss += loss
            backward(xb, probs, flat, acts, onehot, lr_t)
        losses.append(epoch_loss)

    # assemble the trained NativeNet (canonical layouts)
    out_layers = []
    conv_i = 0
    for layer in layers:
        if isinstance(layer, ConvLayer):
            out_layers.append(convs[conv_i].to_layer())
            conv_i += 1
        elif isinstance(layer, DenseLayer):
            wts = w_dense.T[:, np.argsort(canon)]
            out_layers.append(DenseLayer(np.ascontiguousarray(wts), b_dense.copy()))
        else:
            out_layers.append(layer)
    net = NativeNet(spec.image_shape, out_layers)
    report = TrainReport(
        train_accuracy=_accuracy(net, ds.train_x, ds.train_y),
        test_accuracy=_accuracy(net, ds.test_x, ds.test_y),
        losses=losses)
    return net, report


def _accuracy(net: NativeNet, x: np.ndarray, y: np.ndarray, chunk: int = 256) -> float:
    hits = 0
    for start in range(0, len(y), chunk):
        probs = net.forward(x[start:start + chunk])
        hits += int((probs.argmax(axis=1) == y[start:start + chunk]).sum())
    return hits / len(y)


def ground_truth_asr(net: NativeNet, poison: PoisonResult, chunk: int = 256) -> float:
    """Eq.-2 ASR of the planted trigger on the triggered test split."""
    x, t = poison.triggered_test_x, poison.triggered_test_targets
    total = 0.0
    for start in range(0, len(t), chunk):
        probs = net.forward(x[start:start + chunk])
        total += asr_from_rows(probs, t[start:start + chunk]) * len(t[start:start + chunk])
    return total / len(t)


# --- analytic oracles ---------------------------------------------------------


class PrototypeOracle(ModelOracle):
    """Noise-free clean stand-in: softmax over negative distances to one
    prototype image per class. Robust to small patches by construction."""

    def __init__(self, prototypes: np.ndarray, sharpness: float = 40.0):
        n, c, h, w = prototypes.shape
        super().__init__(n, (c, h, w))
        self.prototypes = prototypes.astype(np.float32)
        self.sharpness = float(sharpness)

    def _predict(self, stack: np.ndarray) -> np.ndarray:
        flat = stack.reshape(stack.shape[0], -1).astype(np.float64)
        protos = self.prototypes.reshape(self.class_count, -1).astype(np.float64)
        d2 = ((flat[:, None, :] - protos[None]) ** 2).mean(axis=2)
        z = -self.sharpness * d2
        z -= z.max(axis=1, keepdims=True)
        ez = np.exp(z)
        return (ez / ez.sum(axis=1, keepdims=True)).astype(np.float32)


PRESENCE_TOL = 0.1
BLEND_PRESENCE_ALPHA = 0.95


class AnalyticBackdoorOracle(ModelOracle):
    """Wraps a clean oracle; inputs carrying the planted trigger (within a
    max-abs tolerance over the trigger region) get a one-hot on phi(y_hat),
    everything else is delegated unchanged."""

    def __init__(self, spec: PoisonSpec, base: ModelOracle):
        super().__init__(base.class_count, base.input_shape)
        trig = spec.trigger
        if isinstance(trig, PatchTrigger):
            pass
        elif isinstance(trig, BlendTrigger):
            if not (trig.alpha >= BLEND_PRESENCE_ALPHA).any():
                raise ConfigInvalid(
                    "analytic blend oracle needs alpha cells >= "
                    f"{BLEND_PRESENCE_ALPHA} so presence is decidable")
        else:
            raise ConfigInvalid("analytic oracle supports patch or blend triggers")
        self.spec = spec
        self.base = base

    def _presence(self, stack: np.ndarray) -> np.ndarray:
        trig = self.spec.trigger
        if isinstance(trig, PatchTrigger):
            r0, c0 = trig.origin
            region = stack[:, :, r0:r0 + trig.height, c0:c0 + trig.width]
            diff = np.abs(region[:, :, trig.shape_mask] - trig.pattern[:, trig.shape_mask][None])
        else:
            cells = trig.alpha >= BLEND_PRESENCE_ALPHA
            diff = np.abs(stack[:, :, cells] - trig.pattern[:, cells][None])
        return diff.reshape(stack.shape[0], -1).max(axis=1) <= PRESENCE_TOL

    def _predict(self, stack: np.ndarray) -> np.ndarray:
        probs = self.base.predict_array(stack)
        hit = self._presence(stack)
        if hit.any():
            y_hat = probs.argmax(axis=1)
            targets = phi_array(self.spec.label_fn, y_hat, self.class_count)
            onehot = np.zeros_like(probs)
            onehot[np.arange(len(y_hat)), targets] = 1.0
            probs = np.where(hit[:, None], onehot, probs)
        return probs


def analytic_backdoor_oracle(spec: PoisonSpec, base: ModelOracle) -> ModelOracle:
    return AnalyticBackdoorOracle(spec, base)


def prototype_oracle_for(spec: DatasetSpec, sharpness: float = 40.0) -> PrototypeOracle:
    """Clean analytic oracle whose prototypes are the noise-free class images."""
    h, w = spec.height, spec.width
    checker = ((np.add.outer(np.arange(h), np.arange(w)) % 2)).astype(np.float64)
    protos = []
    for c in range(spec.class_count):
        img = spec.base + spec.carrier_amp * checker + spec.pattern_amp * _class_pattern(spec, c)
        protos.append(np.clip(img, 0.0, 1.0)[None].repeat(spec.channels, axis=0))
    return PrototypeOracle(np.stack(protos).astype(np.float32), sharpness)


# --- zoo building ---------------------------------------------------------------

ASR_FLOOR = 0.95       # attack effectiveness bar for backdoored entries
ACC_FLOOR = 0.90       # clean-accuracy floor for every entry
TWIN_ACC_DROP = 0.03   # max clean-accuracy drop vs the clean twin

# Poisoning recipe used for trained zoo entries. The jitter mirrors the
# robustness real attacks inherit from augmentation pipelines; see PoisonSpec.
ZOO_PATTERN_JITTER = 0.25
ZOO_ORIGIN_JITTER = 1
ZOO_MASK_DROPOUT = 0.30
ZOO_BLEND_ALPHA = 0.25


@dataclass(frozen=True)
class AttackRecipe:
    kind: str                  # patch | blend | warp | noise
    strategy: str = "all2one"  # all2one | one_shift | one2one
    count: int = 1

    def __post_init__(self):
        if self.kind not in ("patch", "blend", "warp", "noise"):
            raise ConfigInvalid(f"unknown attack kind {self.kind!r}")
        if self.strategy not in ("all2one", "one_shift", "one2one"):
            raise ConfigInvalid(f"unknown strategy {self.strategy!r}")


@dataclass(frozen=True)
class ZooBuildConfig:
    dataset: DatasetSpec = DatasetSpec()
    clean_count: int = 8
    attacks: tuple[AttackRecipe, ...] = (AttackRecipe("patch", "all2one", 8),)
    arch: ArchSpec = ArchSpec()
    epochs: int = 8
    fraction: float = 0.15
    max_attempts: int = 4
    noise_bound: float = 0.10


@dataclass
class ZooEntry:
    entry_id: str
    backdoored: bool
    net: NativeNet
    poison: PoisonSpec | None
    strategy: str | None
    clean_accuracy: float
    attack_asr: float | None
    train_stream: str


@dataclass
class Zoo:
    config: ZooBuildConfig
    seed: int
    dataset: SyntheticDataset
    entries: list[ZooEntry]

    def entry(self, entry_id: str) -> ZooEntry:
        for e in self.entries:
            if e.entry_id == entry_id:
                return e
        raise KeyError(entry_id)


def _draw_trigger(recipe: AttackRecipe, cfg: ZooBuildConfig, rng: RandomSource) -> Trigger:
    spec = cfg.dataset
    c, h, w = spec.image_shape
    if recipe.kind == "patch":
        # Bernoulli 0/1 pattern, random location, 3x3 box
        pattern = (rng.random((c, 3, 3)) < 0.5).astype(np.float32)
        r0 = int(rng.integers(0, h - 2))
        c0 = int(rng.integers(0, w - 2))
        return PatchTrigger(pattern, (r0, c0), np.ones((3, 3), dtype=bool))
    if recipe.kind == "blend":
        pattern = rng.random((c, h, w), dtype=np.float32)
        alpha = np.full((h, w), ZOO_BLEND_ALPHA, dtype=np.float32)
        return BlendTrigger(pattern, alpha)
    if recipe.kind == "warp":
        k = int(rng.choice((3, 4, 5, 6)))
        grid = rng.uniform(-1.0, 1.0, size=(k, k, 2)).astype(np.float32)
        strength = float(rng.uniform(0.25, 0.75))
        from .triggers import WarpTrigger
        return WarpTrigger(grid, strength)
    pattern = rng.uniform(-cfg.noise_bound, cfg.noise_bound,
                          size=(c, h, w)).astype(np.float32)
    from .triggers import NoiseTrigger
    return NoiseTrigger(pattern, cfg.noise_bound)


def _draw_label_fn(recipe: AttackRecipe, n: int, rng: RandomSource) -> TargetLabelFn:
    from .objective import All2One, All2AllOneShift, One2One
    if recipe.strategy == "all2one":
        return All2One(int(rng.integers(0, n)))
    if recipe.strategy == "one_shift":
        return All2AllOneShift()
    s = int(rng.integers(0, n))
    t = int(rng.integers(0, n - 1))
    if t >= s:
        t += 1
    return One2One(s, t)


def _poison_spec_for(recipe: AttackRecipe, cfg: ZooBuildConfig, fraction: float,
                     rng: RandomSource) -> PoisonSpec:
    trig = _draw_trigger(recipe, cfg, rng)
    fn = _draw_label_fn(recipe, cfg.dataset.class_count, rng)
    jitter = {"patch": ZOO_PATTERN_JITTER, "blend": ZOO_PATTERN_JITTER,
              "noise": 0.5, "warp": 0.0}[recipe.kind]
    return PoisonSpec(recipe.kind, trig, fn, fraction=fraction,
                      pattern_jitter=jitter,
                      origin_jitter=ZOO_ORIGIN_JITTER if recipe.kind == "patch" else 0,
                      mask_dropout=ZOO_MASK_DROPOUT if recipe.kind == "patch" else 0.0)


def build_zoo(cfg: ZooBuildConfig, seed: int, progress=None) -> Zoo:
    """Train the configured clean and backdoored entries.

    Backdoored entries share the training stream (hence initialization and
    shuffling) with a clean twin, retrying with more epochs and a higher
    poison fraction until the attack clears the ASR floor without hurting
    clean accuracy. Deterministic given the seed.
    """
    root = RandomSource(seed)
    ds = make_dataset(cfg.dataset, root.substream("dataset"))
    entries: list[ZooEntry] = []

    def note(msg):
        if progress is not None:
            progress(msg)

    clean_nets: dict[int, tuple[NativeNet, float, str]] = {}
    for i in range(cfg.clean_count):
        for attempt in range(cfg.max_attempts):
            stream = f"train:{i}:a{attempt}"
            epochs = cfg.epochs + 4 * attempt
            net, rep = train_model(ds, cfg.arch, epochs, root.substream(stream))
            if rep.test_accuracy >= ACC_FLOOR:
                break
        else:
            raise ConfigInvalid(f"clean entry {i} never reached accuracy {ACC_FLOOR}")
        clean_nets[i] = (net, rep.test_accuracy, stream)
        entries.append(ZooEntry(f"clean-{i}", False, net, None, None,
                                rep.test_accuracy, None, stream))
        note(f"clean-{i}: accuracy {rep.test_accuracy:.3f}")

    twin = 0
    serial = 0
    for recipe in cfg.attacks:
        for j in range(recipe.count):
            twin_i = twin % max(1, len(clean_nets))
            twin_stream = (clean_nets[twin_i][2] if clean_nets
                           else f"train:solo{serial}:a0")
            twin_acc = clean_nets[twin_i][1] if clean_nets else 1.0
            entry_id = f"{recipe.kind}-{recipe.strategy}-{j}"
            built = None
            for attempt in range(cfg.max_attempts):
                fraction = min(0.30, cfg.fraction * (1.5 ** attempt))
                epochs = cfg.epochs + 4 * attempt
                pspec = _poison_spec_for(
                    recipe, cfg, fraction,
                    root.substream(f"poisonspec:{entry_id}:a{attempt}"))
                poison = poison_dataset(ds, pspec,
                                        root.substream(f"poison:{entry_id}:a{attempt}"))
                stream = twin_stream if attempt == 0 else f"train:{entry_id}:a{attempt}"
                net, rep = train_model(poison.dataset, cfg.arch, epochs,
                                       root.substream(stream))
                gt_asr = ground_truth_asr(net, poison)
                ok = (gt_asr >= ASR_FLOOR and rep.test_accuracy >= ACC_FLOOR
                      and rep.test_accuracy >= twin_acc - TWIN_ACC_DROP)
                note(f"{entry_id} attempt {attempt}: acc {rep.test_accuracy:.3f} "
                     f"asr {gt_asr:.3f}{' ok' if ok else ''}")
                if ok:
                    built = ZooEntry(entry_id, True, net, pspec, recipe.strategy,
                                     rep.test_accuracy, gt_asr, stream)
                    break
            if built is None:
                raise ConfigInvalid(f"{entry_id}: attack never reached the "
                                    f"{ASR_FLOOR} ASR bar")
            entries.append(built)
            twin += 1
            serial += 1
    return Zoo(cfg, seed, ds, entries)


# --- manifest + weight files ----------------------------------------------------


def _label_fn_to_dict(fn: TargetLabelFn) -> dict:
    from .objective import All2One, All2AllOneShift, One2One
    if isinstance(fn, All2One):
        return {"strategy": "all2one", "t": fn.t}
    if isinstance(fn, All2AllOneShift):
        return {"strategy": "one_shift"}
    if isinstance(fn, One2One):
        return {"strategy": "one2one", "s": fn.s, "t": fn.t}
    raise ConfigInvalid(f"unknown label function {type(fn).__name__}")


def label_fn_from_dict(doc: dict) -> TargetLabelFn:
    from .objective import All2One, All2AllOneShift, One2One
    strategy = doc.get("strategy")
    if strategy == "all2one":
        return All2One(int(doc["t"]))
    if strategy == "one_shift":
        return All2AllOneShift()
    if strategy == "one2one":
        return One2One(int(doc["s"]), int(doc["t"]))
    raise ConfigInvalid(f"unknown strategy {strategy!r}")


def save_zoo(zoo: Zoo, out_dir) -> None:
    """Manifest JSON plus one weights file per entry."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries_doc = []
    for e in zoo.entries:
        weights = f"{e.entry_id}.dbkn"
        save_net(out / weights, e.net)
        doc = {"id": e.entry_id, "backdoored": e.backdoored, "weights": weights,
               "clean_accuracy": e.clean_accuracy, "attack_asr": e.attack_asr,
               "train_stream": e.train_stream, "poison": None}
        if e.poison is not None:
            doc["poison"] = {
                "kind": e.poison.kind,
                "fraction": e.poison.fraction,
                "label_fn": _label_fn_to_dict(e.poison.label_fn),
                "trigger": json.loads(trigger_to_json(e.poison.trigger)),
                "strategy": e.strategy,
            }
        entries_doc.append(doc)
    spec = zoo.config.dataset
    manifest = {
        "schema_version": 1,
        "seed": zoo.seed,
        "dataset": {"class_count": spec.class_count, "channels": spec.channels,
                    "height": spec.height, "width": spec.width,
                    "train_per_class": spec.train_per_class,
                    "test_per_class": spec.test_per_class, "style": spec.style,
                    "noise": spec.noise, "carrier_amp": spec.carrier_amp,
                    "pattern_amp": spec.pattern_amp, "base": spec.base},
        "entries": entries_doc,
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
        fh.write("\n")


@dataclass
class ZooManifestEntry:
    entry_id: str
    backdoored: bool
    weights_path: Path
    clean_accuracy: float
    attack_asr: float | None
    poison_kind: str | None
    label_fn: TargetLabelFn | None
    trigger: Trigger | None
    strategy: str | None


def load_zoo_manifest(zoo_dir) -> tuple[dict, list[ZooManifestEntry]]:
    zoo_dir = Path(zoo_dir)
    with open(zoo_dir / "manifest.json") as fh:
        manifest = json.load(fh)
    entries = []
    for doc in manifest["entries"]:
        poison = doc.get("poison")
        entries.append(ZooManifestEntry(
            entry_id=doc["id"],
            backdoored=doc["backdoored"],
            weights_path=zoo_dir / doc["weights"],
            clean_accuracy=doc["clean_accuracy"],
            attack_asr=doc.get("attack_asr"),
            poison_kind=poison["kind"] if poison else None,
            label_fn=label_fn_from_dict(poison["label_fn"]) if poison else None,
            trigger=trigger_from_json(json.dumps(poison["trigger"])) if poison else None,
            strategy=poison.get("strategy") if poison else None,
        ))
    return manifest, entries
