"""Weight container format, CIFAR-10 binary ingestion, synthetic data.

Container layout (all integers little-endian):
    magic "TYT1" | version u32 = 1 | entry count u32
    per entry: name length u32, name bytes (UTF-8), dtype u8 (0=f32, 1=f64),
               ndim u32, each dim u64, raw row-major data
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TYT1"
VERSION = 1
_DTYPE_CODE = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# Standard CIFAR-10 per-channel statistics applied after scaling to [0, 1].
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


class ContainerError(Exception):
    pass


class BadMagicError(ContainerError):
    pass


class TruncatedFileError(ContainerError):
    pass


class DuplicateNameError(ContainerError):
    pass


@dataclass
class WeightContainer:
    """Ordered named arrays (f32/f64 only)."""

    entries: list = field(default_factory=list)  # list[(name, ndarray)]

    def __post_init__(self):
        seen = set()
        for name, arr in self.entries:
            if name in seen:
                raise DuplicateNameError(f"duplicate entry name {name!r}")
            seen.add(name)
            if arr.dtype not in (np.dtype("<f4"), np.dtype("<f8")):
                raise ContainerError(f"unsupported dtype {arr.dtype} for {name!r}")

    def add(self, name: str, arr: np.ndarray):
        if any(name == n for n, _ in self.entries):
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        arr = np.asarray(arr)
        if arr.dtype not in _DTYPE_CODE:
            arr = arr.astype(np.float32)
        self.entries.append((name, arr))

    def names(self):
        return [n for n, _ in self.entries]

    def as_dict(self):
        return dict(self.entries)

    def __len__(self):
        return len(self.entries)


def write_container(path, container: WeightContainer):
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(container.entries)))
        for name, arr in container.entries:
            raw = name.encode("utf-8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            # note: ascontiguousarray would promote 0-d arrays to shape (1,)
            arr = np.asarray(arr, order="C")
            f.write(struct.pack("<BI", _DTYPE_CODE[np.dtype(arr.dtype).newbyteorder("<")],
                                arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def read_container(path) -> WeightContainer:
    with open(path, "rb") as f:
        blob = f.read()
    view = memoryview(blob)
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(blob):
            raise TruncatedFileError(f"file truncated while reading {what}")
        chunk = view[off:off + n]
        off += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise BadMagicError(f"bad magic in {path!r}: expected {MAGIC!r}")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ContainerError(f"unsupported container version {version}")

    entries = []
    seen = set()
    for i in range(count):
        (nlen,) = struct.unpack("<I", take(4, f"entry {i} name length"))
        name = bytes(take(nlen, f"entry {i} name")).decode("utf-8")
        if name in seen:
            raise DuplicateNameError(f"duplicate entry name {name!r}")
        seen.add(name)
        code, ndim = struct.unpack("<BI", take(5, f"entry {i} dtype/ndim"))
        if code not in _CODE_DTYPE:
            raise ContainerError(f"unknown dtype code {code} in entry {name!r}")
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim, f"entry {i} dims"))
        dtype = _CODE_DTYPE[code]
        nbytes = int(math.prod(dims)) * dtype.itemsize
        data = np.frombuffer(take(nbytes, f"entry {i} data"), dtype=dtype)
        entries.append((name, data.reshape(dims).copy()))
    if off != len(blob):
        raise ContainerError(f"{len(blob) - off} trailing bytes after last entry")
    return WeightContainer(entries)


def load_cifar10(directory):
    """Parse the standard CIFAR-10 binary batches in a directory.

    Returns ((train_images, train_labels), (test_images, test_labels)) with
    images as N x 3 x 32 x 32 f32, scaled to [0,1] and per-channel normalized
    with CIFAR_MEAN / CIFAR_STD.
    """
    train_files = [os.path.join(directory, f"data_batch_{i}.bin") for i in range(1, 6)]
    test_files = [os.path.join(directory, "test_batch.bin")]
    return _read_cifar_files(train_files), _read_cifar_files(test_files)


def _read_cifar_files(paths):
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            blob = f.read()
        if len(blob) % 3073:
            raise ValueError(f"{path!r}: size {len(blob)} is not a multiple of 3073")
        records = np.frombuffer(blob, dtype=np.uint8).reshape(-1, 3073)
        lab = records[:, 0]
        if lab.max(initial=0) > 9:
            raise ValueError(f"{path!r}: label byte out of range 0-9")
        img = records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
        img -= np.asarray(CIFAR_MEAN, dtype=np.float32)[None, :, None, None]
        img /= np.asarray(CIFAR_STD, dtype=np.float32)[None, :, None, None]
        images.append(img)
        labels.append(lab.astype(np.int64))
    return np.concatenate(images), np.concatenate(labels)


_M64 = (1 << 64) - 1


def _splitmix64(seed):
    state = seed & _M64
    while True:
        state = (state + 0x9E3779B97F4A7C15) & _M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
        yield z ^ (z >> 31)


class Xoshiro256StarStar:
    """Integer-seeded PRNG with platform-independent output."""

    def __init__(self, seed: int):
        sm = _splitmix64(seed)
        self._s = [next(sm) for _ in range(4)]

    def next_u64(self) -> int:
        s = self._s
        result = ((s[1] * 5 & _M64) << 7 | (s[1] * 5 & _M64) >> 57) & _M64
        result = (result * 9) & _M64
        t = (s[1] << 17) & _M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = ((s[3] << 45) | (s[3] >> 19)) & _M64
        return result

    def uniforms(self, count: int) -> np.ndarray:
        out = np.empty(count, dtype=np.float64)
        for i in range(count):
            out[i] = (self.next_u64() >> 11) * (1.0 / (1 << 53))
        return out

    def normals(self, count: int) -> np.ndarray:
        n = (count + 1) // 2
        u1 = np.maximum(self.uniforms(n), 1e-300)
        u2 = self.uniforms(n)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        pair = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
        return pair[:count]


@dataclass(frozen=True)
class SyntheticDataset:
    images: np.ndarray  # N x 3 x 16 x 16 f32
    labels: np.ndarray  # N ints in [0, 4)
    seed: int


def gen_synthetic(n: int, seed: int) -> SyntheticDataset:
    """Deterministic 4-class toy dataset of 16x16 diagonal waves.

    Class k draws pixel(ch, x, y) = sin(2*pi*(k+1)*(x+y)/16 + phi) + noise
    with a per-image phase phi ~ U[0, 2*pi) and per-pixel N(0, 0.1^2) noise;
    labels assigned round-robin.  Regeneration from the same seed is bitwise
    identical on any platform.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = Xoshiro256StarStar(seed)
    xg, yg = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    diag = (xg + yg).astype(np.float64)
    images = np.empty((n, 3, 16, 16), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        k = i % 4
        phi = 2.0 * np.pi * rng.uniforms(1)[0]
        base = np.sin(2.0 * np.pi * (k + 1) * diag / 16.0 + phi)
        noise = 0.1 * rng.normals(3 * 16 * 16).reshape(3, 16, 16)
        images[i] = (base[None, :, :] + noise).astype(np.float32)
        labels[i] = k
    return SyntheticDataset(images, labels, seed)
