"""SAPT tensor files and image-classification datasets.

SAPT layout (all integers little-endian)::

    offset 0   magic   b"SAPT"
    offset 4   version u8 (= 1)
    offset 5   dtype   u8 (0 = f32, 1 = f64, 2 = u32)
    offset 6   ndim    u8
    offset 7   dims    ndim x u32
    then       payload row-major scalars
"""

import json
import math
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import rng as rngmod
from .autodiff import Tensor
from .errors import FormatError, InputError, ValidationError

MAGIC = b"SAPT"
VERSION = 1
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<u4")}
_KINDS = {("f", 4): 0, ("f", 8): 1, ("u", 4): 2}


def encode_tensor(t):
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    code = _KINDS.get((arr.dtype.kind, arr.dtype.itemsize))
    if code is None:
        raise InputError(f"SAPT cannot store dtype {arr.dtype}")
    if arr.ndim > 255:
        raise InputError("SAPT supports at most 255 dimensions")
    if any(d > 0xFFFFFFFF for d in arr.shape):
        raise InputError("dimension exceeds u32 range")
    header = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes()


def decode_tensor(buf):
    """Parse SAPT bytes into a Tensor whose dtype matches the file."""
    if len(buf) < 7:
        raise FormatError("truncated header", offset=len(buf))
    if buf[:4] != MAGIC:
        raise FormatError(f"bad magic {bytes(buf[:4])!r}", offset=0)
    version, code, ndim = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", offset=4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}", offset=5)
    dims_end = 7 + 4 * ndim
    if len(buf) < dims_end:
        raise FormatError("truncated dimension list", offset=len(buf))
    dims = struct.unpack_from(f"<{ndim}I", buf, 7)
    dtype = _CODES[code]
    expected = math.prod(dims) * dtype.itemsize
    payload = len(buf) - dims_end
    if payload < expected:
        raise FormatError(f"payload holds {payload} bytes, expected {expected}", offset=len(buf))
    if payload > expected:
        raise FormatError(f"{payload - expected} trailing bytes after payload", offset=dims_end + expected)
    arr = np.frombuffer(buf, dtype=dtype, count=math.prod(dims), offset=dims_end).reshape(dims)
    arr = arr.astype(dtype.newbyteorder("="))
    return Tensor(arr, dtype=arr.dtype)


def write_tensor(path, t):
    Path(path).write_bytes(encode_tensor(t))


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)
        validate(self)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx):
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split)


def validate(ds):
    if ds.images.ndim != 4:
        raise ValidationError(f"images must be [N, C, H, W], got shape {ds.images.shape}")
    if ds.labels.shape != (ds.images.shape[0],):
        raise ValidationError(f"{ds.images.shape[0]} images but labels have shape {ds.labels.shape}")
    if ds.num_classes < 1:
        raise ValidationError("class count must be positive")
    bad = np.flatnonzero(ds.labels >= ds.num_classes)
    if bad.size:
        raise ValidationError(f"label {ds.labels[bad[0]]} >= class count {ds.num_classes}", index=int(bad[0]))
    flat = ds.images.reshape(len(ds.images), -1)
    bad = np.flatnonzero(~np.all(np.isfinite(flat) & (flat >= 0) & (flat <= 255), axis=1))
    if bad.size:
        raise ValidationError("pixel value outside [0, 255]", index=int(bad[0]))


def save_dataset(ds, directory):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_tensor(d / "images.sapt", np.asarray(ds.images, dtype=np.float64))
    write_tensor(d / "labels.sapt", ds.labels)
    (d / "meta.json").write_text(json.dumps({"num_classes": ds.num_classes, "split": ds.split}, indent=2) + "\n")


def load_dataset(directory, num_classes=None):
    """Load and validate ``images.sapt`` / ``labels.sapt`` from ``directory``.

    The class count comes from ``meta.json`` when present, else from
    ``num_classes``, else from the largest label.
    """
    d = Path(directory)
    for name in ("images.sapt", "labels.sapt"):
        if not (d / name).is_file():
            raise ValidationError(f"{d / name} not found")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").is_file() else {}
    images = read_tensor(d / "images.sapt").data
    labels = read_tensor(d / "labels.sapt").data
    if labels.dtype != np.uint32:
        raise ValidationError(f"labels must be u32, got {labels.dtype}")
    if num_classes is None:
        num_classes = meta.get("num_classes", int(labels.max()) + 1 if labels.size else 1)
    return Dataset(images.astype(np.float64, copy=False), labels, int(num_classes), meta.get("split", "train"))


def grating(label, classes, image_size, channels=1, contrast=1.0, phase_shift=0.0):
    """Smooth oriented grating for ``label`` around mid-grey.

    Orientation and base phase are spread evenly over ``classes``;
    ``contrast = 1`` spans the full [0, 255] range.
    """
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    theta = math.pi * label / classes
    freq = 1.0 + (label % 2)
    phase = 2 * math.pi * label / classes + phase_shift
    out = np.empty((channels, image_size, image_size))
    for ch in range(channels):
        wave = np.sin(2 * math.pi * freq * (xx * math.cos(theta) + yy * math.sin(theta)) + phase + ch)
        out[ch] = 127.5 * (1 + contrast * wave)
    return out


def templates(classes, image_size, channels=1, contrast=1.0):
    return np.stack([grating(c, classes, image_size, channels, contrast) for c in range(classes)])


def synth_dataset(n_per_class, classes, image_size, noise_std, seed, channels=1, split="train",
                  contrast=1.0, phase_jitter=0.0):
    """Class gratings plus clipped Gaussian pixel noise; deterministic in ``seed`` and ``split``.

    ``phase_jitter`` (radians) draws a uniform per-example phase offset in
    ``[-phase_jitter, phase_jitter]``; at 0 every example of a class shares
    one template.
    """
    for name, v in (("n_per_class", n_per_class), ("classes", classes), ("image_size", image_size)):
        if v < 1:
            raise InputError(f"{name} must be positive")
    if noise_std < 0:
        raise InputError("noise_std must be non-negative")
    if not 0 < contrast <= 1:
        raise InputError("contrast must lie in (0, 1]")
    if phase_jitter < 0:
        raise InputError("phase_jitter must be non-negative")
    gen = rngmod.stream(seed, "synth", split)
    labels = np.repeat(np.arange(classes), n_per_class)
    if phase_jitter > 0:
        shifts = gen.uniform(-phase_jitter, phase_jitter, size=len(labels))
        images = np.stack([grating(c, classes, image_size, channels, contrast, s) for c, s in zip(labels, shifts)])
    else:
        images = templates(classes, image_size, channels, contrast)[labels]
    if noise_std > 0:
        images = np.clip(images + gen.normal(0.0, noise_std, size=images.shape), 0, 255)
    order = gen.permutation(len(labels))
    return Dataset(images[order], labels[order], classes, split)


def atomic_write_text(path, text):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)
