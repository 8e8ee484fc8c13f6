"""Image dataset readers: CIFAR-10 binary batches, IDX files, PPM directories."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sgmap import read_ppm

CIFAR_RECORD = 1 + 3 * 32 * 32
IDX_DTYPES = {0x08: np.uint8, 0x09: np.int8, 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


class FormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: np.ndarray  # N×C×H×W in [0, 1]
    labels: np.ndarray | None = None
    split: str = "all"
    source: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got shape {self.images.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.images):
                raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
            if len(self.labels) and self.labels.min() < 0:
                raise ValueError("labels must be non-negative")

    def __len__(self):
        return len(self.images)

    def subset(self, start: int, stop: int, split: str) -> "Dataset":
        labels = None if self.labels is None else self.labels[start:stop]
        return Dataset(self.images[start:stop], labels, split, f"{self.source}[{start}:{stop}]")


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_cifar10_binary(paths) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(paths, (str, Path)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        data = _read_bytes(path)
        if len(data) % CIFAR_RECORD:
            whole = len(data) // CIFAR_RECORD
            raise FormatError(f"{path}: incomplete record {whole}", whole * CIFAR_RECORD)
        rec = np.frombuffer(data, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        bad = np.flatnonzero(rec[:, 0] > 9)
        if bad.size:
            raise FormatError(f"{path}: label {rec[bad[0], 0]} out of range", int(bad[0]) * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return np.concatenate(images), np.concatenate(labels)


def write_cifar10_binary(path, images, labels):
    """Inverse of :func:`read_cifar10_binary` for [0, 1] images."""
    pixels = np.round(np.asarray(images) * 255).astype(np.uint8).reshape(len(images), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], pixels], axis=1)
    Path(path).write_bytes(rec.tobytes())


def read_idx(path) -> np.ndarray:
    data = _read_bytes(path)
    if len(data) < 4:
        raise FormatError(f"{path}: missing IDX magic", 0)
    zero, dtype_code, ndim = struct.unpack(">HBB", data[:4])
    if zero != 0 or dtype_code not in IDX_DTYPES:
        raise FormatError(f"{path}: bad IDX magic {data[:4].hex()}", 0)
    head = 4 + 4 * ndim
    if len(data) < head:
        raise FormatError(f"{path}: truncated IDX dimensions", len(data))
    dims = struct.unpack(f">{ndim}I", data[4:head])
    dtype = np.dtype(IDX_DTYPES[dtype_code])
    need = int(np.prod(dims)) * dtype.itemsize
    if len(data) - head != need:
        raise FormatError(f"{path}: expected {need} payload bytes for dims {dims}, found {len(data) - head}",
                          head + min(need, len(data) - head))
    return np.frombuffer(data, dtype=dtype, offset=head).reshape(dims)


def write_idx(path, array):
    array = np.asarray(array)
    code = {np.dtype(np.uint8): 0x08, np.dtype(np.int8): 0x09}[array.dtype]
    head = struct.pack(">HBB", 0, code, array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    data = head + array.tobytes()
    path = Path(path)
    path.write_bytes(gzip.compress(data, mtime=0) if path.suffix == ".gz" else data)


def read_ppm_dir(directory) -> tuple[np.ndarray, np.ndarray | None]:
    directory = Path(directory)
    files = sorted(directory.glob("*.ppm"))
    if not files:
        raise FormatError(f"{directory}: no .ppm files")
    images = []
    for f in files:
        pix = read_ppm(f)
        images.append(np.transpose(pix, (2, 0, 1)) / 255.0)
    shapes = {im.shape for im in images}
    if len(shapes) != 1:
        raise FormatError(f"{directory}: mixed image shapes {sorted(shapes)}")
    labels = None
    label_file = directory / "labels.csv"
    if label_file.exists():
        with open(label_file, newline="") as fh:
            table = {row[0]: int(row[1]) for row in csv.reader(fh) if row and row[0] != "filename"}
        missing = [f.name for f in files if f.name not in table]
        if missing:
            raise FormatError(f"{label_file}: no label for {missing[0]}")
        labels = np.array([table[f.name] for f in files], dtype=np.int64)
    return np.stack(images), labels


def load_dataset(descriptor: str, split: str = "all") -> Dataset:
    """Load ``cifar10:PATH[,PATH...]``, ``idx:IMAGES[,LABELS]`` or ``ppm:DIR``."""
    kind, sep, rest = descriptor.partition(":")
    if not sep or not rest:
        raise ValueError(f"dataset descriptor {descriptor!r} must look like KIND:PATH")
    parts = [p for p in rest.split(",") if p]
    if kind == "cifar10":
        images, labels = read_cifar10_binary(parts)
    elif kind == "idx":
        raw = read_idx(parts[0])
        if raw.ndim == 3:
            raw = raw[:, None]
        images = raw.astype(np.float64) / 255.0
        labels = read_idx(parts[1]).astype(np.int64) if len(parts) > 1 else None
    elif kind == "ppm":
        images, labels = read_ppm_dir(parts[0])
    else:
        raise ValueError(f"unsupported dataset kind {kind!r}")
    return Dataset(images, labels, split, descriptor)
