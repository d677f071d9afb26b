"""Binary container for labeled image batches.

Layout (all integers little-endian):

    offset  size  field
    0       4     magic bytes b"DBKD"
    4       2     version (u16), currently 1
    6       4     n_samples (u32)
    10      2     channels (u16)
    12      2     height (u16)
    14      2     width (u16)
    16      2     class_count (u16)
    18      ...   per sample: label (u16) followed by channels*height*width
                  raw float32 intensities, little-endian, C x H x W order

Intensities must already be in [0, 1]; readers validate on load.
"""

from __future__ import annotations

import struct

import numpy as np

from .errors import ConfigInvalid
from .tensors import ValidationBatch

MAGIC = b"DBKD"
VERSION = 1
_HEADER = struct.Struct("<4sHIHHHH")


def write_batch(path, batch: ValidationBatch) -> None:
    b, c, h, w = batch.stack.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, b, c, h, w, batch.class_count))
        for i in range(b):
            fh.write(struct.pack("<H", int(batch.labels[i])))
            fh.write(batch.stack[i].astype("<f4").tobytes())


def read_batch(path) -> ValidationBatch:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise ConfigInvalid(f"{path}: truncated header")
    magic, version, n, c, h, w, n_classes = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ConfigInvalid(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ConfigInvalid(f"{path}: unsupported version {version}")
    per_image = c * h * w
    record = 2 + 4 * per_image
    expected = _HEADER.size + n * record
    if len(raw) != expected:
        raise ConfigInvalid(f"{path}: size {len(raw)} != expected {expected}")
    stack = np.empty((n, c, h, w), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    off = _HEADER.size
    for i in range(n):
        (labels[i],) = struct.unpack_from("<H", raw, off)
        off += 2
        stack[i] = np.frombuffer(raw, dtype="<f4", count=per_image, offset=off).reshape(c, h, w)
        off += 4 * per_image
    return ValidationBatch.from_arrays(stack, labels, n_classes)
