"""Numeric substrate: image tensors, probability vectors, labeled batches,
and a seedable random source used by every stochastic component.

Images are canonically C x H x W float32 with intensities in [0, 1].
All file I/O converts to this layout at the boundary.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigInvalid, ShapeMismatch

PROB_SUM_TOL = 1e-5


def as_image_array(data) -> np.ndarray:
    """Coerce to a C x H x W float32 array without validating the range."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 3:
        raise ShapeMismatch(f"image data must be C x H x W, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class ImageTensor:
    """A single image: C x H x W intensities, every element in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = as_image_array(self.data)
        if arr.shape[0] not in (1, 3):
            raise ShapeMismatch(f"channel count must be 1 or 3, got {arr.shape[0]}")
        if arr.size == 0:
            raise ShapeMismatch("image must be non-empty")
        lo, hi = float(arr.min()), float(arr.max())
        if lo < 0.0 or hi > 1.0:
            raise ValueError(f"intensities outside [0,1]: min={lo}, max={hi}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True)
class ProbVector:
    """Per-class probabilities; elements in [0,1] summing to 1 within 1e-5."""

    probs: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.probs, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ShapeMismatch(f"probability vector must be 1-D, got {arr.shape}")
        if float(arr.min()) < 0.0 or float(arr.max()) > 1.0:
            raise ValueError("probabilities outside [0,1]")
        total = float(np.sum(arr, dtype=np.float64))
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise ValueError(f"probabilities sum to {total}, expected 1 +/- {PROB_SUM_TOL}")
        arr = arr.copy()
        arr.flags.writeable = False
        object.__setattr__(self, "probs", arr)

    @property
    def class_count(self) -> int:
        return self.probs.shape[0]

    def argmax(self) -> int:
        return int(np.argmax(self.probs))


@dataclass(frozen=True)
class LabeledSample:
    image: ImageTensor
    label: int


class ValidationBatch:
    """A small set of clean labeled images sharing one shape.

    Keeps a stacked (B, C, H, W) float32 view of the images so hot paths can
    operate on the whole batch with one array op.
    """

    def __init__(self, samples: list[LabeledSample], class_count: int):
        if not samples:
            raise ConfigInvalid("validation batch must be non-empty")
        if class_count < 1:
            raise ConfigInvalid("class_count must be >= 1")
        shape = samples[0].image.shape
        for s in samples:
            if s.image.shape != shape:
                raise ShapeMismatch("all batch images must share one shape")
            if not 0 <= s.label < class_count:
                raise ConfigInvalid(f"label {s.label} outside [0, {class_count})")
        self.samples = list(samples)
        self.class_count = class_count
        self.stack = np.stack([s.image.data for s in samples]).astype(np.float32)
        self.stack.flags.writeable = False
        self.labels = np.array([s.label for s in samples], dtype=np.int64)
        self.labels.flags.writeable = False

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return self.samples[0].image.shape

    @staticmethod
    def from_arrays(stack: np.ndarray, labels, class_count: int) -> "ValidationBatch":
        samples = [
            LabeledSample(ImageTensor(img), int(lab)) for img, lab in zip(stack, labels)
        ]
        return ValidationBatch(samples, class_count)


def clamp_image(img: ImageTensor) -> ImageTensor:
    """Clip every intensity into [0, 1]; shape is unchanged."""
    return ImageTensor(np.clip(img.data, 0.0, 1.0))


def clamp_array(arr: np.ndarray) -> np.ndarray:
    """Array-level clamp used by trigger application before rewrapping."""
    return np.clip(arr, 0.0, 1.0)


def _stream_key(name: str) -> int:
    """Stable 64-bit key for a named substream (SHA-256 prefix)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RandomSource:
    """Seedable random source: PCG64 behind numpy's Generator.

    The same seed yields the same draw stream on every platform (numpy
    pins PCG64 stream stability). Substreams derive deterministically from
    (seed, name) so each component can be reproduced in isolation.
    """

    seed: int
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        self.generator = np.random.Generator(np.random.PCG64(np.random.SeedSequence(self.seed)))

    def substream(self, name: str) -> "RandomSource":
        child = RandomSource.__new__(RandomSource)
        child.seed = self.seed
        seq = np.random.SeedSequence(entropy=self.seed, spawn_key=(_stream_key(name),))
        child.generator = np.random.Generator(np.random.PCG64(seq))
        return child

    # Thin passthroughs so call sites read like a Generator.
    def random(self, *args, **kwargs):
        return self.generator.random(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self.generator.uniform(*args, **kwargs)

    def integers(self, *args, **kwargs):
        return self.generator.integers(*args, **kwargs)

    def standard_normal(self, *args, **kwargs):
        return self.generator.standard_normal(*args, **kwargs)

    def permutation(self, *args, **kwargs):
        return self.generator.permutation(*args, **kwargs)

    def choice(self, *args, **kwargs):
        return self.generator.choice(*args, **kwargs)
