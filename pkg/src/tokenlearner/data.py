"""Synthetic desk-scale classification tasks and the TLDS1 dataset file.

File layout, all little-endian: the 5-byte magic ``b"TLDS1"``, then u32
``count, T, H, W, C, K``, then per sample ``T*H*W*C`` float32 pixels in
row-major ``[T, H, W, C]`` order followed by a u32 label.
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError

MAGIC = b"TLDS1"
_HEADER = struct.Struct("<6I")
TASKS = ("locate-patch", "count-blobs", "moving-blob-direction")
# moving-blob-direction classes, as (drow, dcol) per frame
DIRECTIONS = ((0, 1), (0, -1), (1, 0), (-1, 0))


@dataclass(frozen=True)
class TaskSpec:
    """``blob`` is the side of the bright square, ``noise`` the background std."""

    kind: str = "locate-patch"
    size: int = 32
    classes: int = 4
    noise: float = 0.1
    seed: int = 0
    frames: int = 1
    blob: int = 6

    def validate(self) -> None:
        if self.kind not in TASKS:
            raise ConfigError(f"unknown task {self.kind!r}; expected one of {TASKS}", "kind")
        if self.size < 4 or self.blob < 1 or self.noise < 0:
            raise ConfigError("need size >= 4, blob >= 1, noise >= 0", "size")
        if self.kind == "locate-patch":
            if self.classes != 4 or self.frames != 1:
                raise ConfigError("locate-patch has 4 classes (quadrants) and 1 frame", "classes")
            if self.blob > self.size // 2:
                raise ConfigError("blob must fit inside a quadrant", "blob")
        elif self.kind == "count-blobs":
            if self.classes < 1 or self.frames != 1:
                raise ConfigError("count-blobs needs classes >= 1 and 1 frame", "classes")
            if (self.size // self.blob) ** 2 < self.classes:
                raise ConfigError(f"{self.classes} blobs of side {self.blob} do not fit", "blob")
        else:
            if self.classes != 4 or self.frames < 2:
                raise ConfigError("moving-blob-direction has 4 classes and >= 2 frames", "frames")
            if self.blob + self.frames - 1 > self.size:
                raise ConfigError("blob path leaves the frame", "blob")

    @classmethod
    def from_dict(cls, doc: dict) -> TaskSpec:
        unknown = sorted(set(doc) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown field(s) {unknown}")
        spec = cls(**doc)
        spec.validate()
        return spec

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    """``images`` is ``[n, T, H, W, C]`` float32, ``labels`` is ``[n]`` int64."""

    images: np.ndarray
    labels: np.ndarray
    classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> Dataset:
        return Dataset(self.images[index], self.labels[index], self.classes)


def quadrant(row: int, col: int, size: int) -> int:
    """0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
    return 2 * int(row >= size // 2) + int(col >= size // 2)


def _locate(rng, spec: TaskSpec, img: np.ndarray) -> int:
    label = int(rng.integers(4))
    half = spec.size // 2
    r0, c0 = (label // 2) * half, (label % 2) * half
    r = r0 + int(rng.integers(half - spec.blob + 1))
    c = c0 + int(rng.integers(half - spec.blob + 1))
    img[0, r:r + spec.blob, c:c + spec.blob, :] += 1.0
    return label


def _count(rng, spec: TaskSpec, img: np.ndarray) -> int:
    label = int(rng.integers(spec.classes))
    cells = spec.size // spec.blob
    # non-overlapping blobs: pick distinct cells of a blob-sized lattice
    for cell in rng.choice(cells * cells, label + 1, replace=False):
        r, c = (cell // cells) * spec.blob, (cell % cells) * spec.blob
        img[0, r:r + spec.blob, c:c + spec.blob, :] += 1.0
    return label


def _moving(rng, spec: TaskSpec, img: np.ndarray) -> int:
    label = int(rng.integers(4))
    travel = spec.frames - 1
    start = []
    for d in DIRECTIONS[label]:
        lo, hi = (travel if d < 0 else 0), spec.size - spec.blob - (travel if d > 0 else 0)
        start.append(int(rng.integers(lo, hi + 1)))
    dr, dc = DIRECTIONS[label]
    for t in range(spec.frames):
        r, c = start[0] + dr * t, start[1] + dc * t
        img[t, r:r + spec.blob, c:c + spec.blob, :] += 1.0
    return label


_GENERATORS = {"locate-patch": _locate, "count-blobs": _count, "moving-blob-direction": _moving}


def make_dataset(spec: TaskSpec, n: int) -> Dataset:
    """``n`` samples; a pure function of ``(spec, n)``."""
    spec.validate()
    if n < 1:
        raise ConfigError(f"need at least one sample, got {n}", "n")
    rng = np.random.default_rng(spec.seed)
    images = np.zeros((n, spec.frames, spec.size, spec.size, 1), dtype=np.float32)
    labels = np.zeros(n, dtype=np.int64)
    gen = _GENERATORS[spec.kind]
    for i in range(n):
        img = rng.standard_normal(images.shape[1:]) * spec.noise
        labels[i] = gen(rng, spec, img)
        images[i] = img
    return Dataset(images, labels, spec.classes)


def save_dataset(path, data: Dataset) -> None:
    n, t, h, w, c = data.images.shape
    pixels = np.ascontiguousarray(data.images, dtype="<f4").reshape(n, -1)
    records = np.empty(n, dtype=[("pixels", "<f4", (t * h * w * c,)), ("label", "<u4")])
    records["pixels"] = pixels
    records["label"] = data.labels
    Path(path).write_bytes(MAGIC + _HEADER.pack(n, t, h, w, c, data.classes) + records.tobytes())


def load_dataset(path) -> Dataset:
    blob = Path(path).read_bytes()
    if not blob.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a TLDS1 dataset (bad magic)")
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    n, t, h, w, c, k = _HEADER.unpack_from(blob, len(MAGIC))
    dtype = np.dtype([("pixels", "<f4", (t * h * w * c,)), ("label", "<u4")])
    body = blob[len(MAGIC) + _HEADER.size:]
    if len(body) != n * dtype.itemsize:
        raise CheckpointError(f"{path}: expected {n} records of {dtype.itemsize} bytes, got {len(body)} bytes")
    records = np.frombuffer(body, dtype=dtype)
    images = records["pixels"].astype(np.float32).reshape(n, t, h, w, c)
    labels = records["label"].astype(np.int64)
    if n and labels.max() >= k:
        raise CheckpointError(f"{path}: label {labels.max()} outside {k} classes")
    return Dataset(images, labels, k)


def generate_dataset(spec: TaskSpec, n: int, path) -> Dataset:
    data = make_dataset(spec, n)
    save_dataset(path, data)
    return data
