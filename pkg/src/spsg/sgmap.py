"""Sample-gradient heatmaps and netpbm image I/O."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


@dataclass
class Heatmap:
    values: np.ndarray
    pool: int
    image_id: str | None = None

    @property
    def shape(self):
        return self.values.shape


def sg_map(pixel_gradient, pool: int = 2, image_id=None) -> Heatmap:
    """abs -> per-channel max normalization -> grayscale -> ``pool``×``pool`` mean."""
    g = np.abs(np.asarray(pixel_gradient, dtype=np.float64))
    if g.ndim == 2:
        g = g[None]
    if pool < 1:
        raise ValueError("pool must be >= 1")
    c, h, w = g.shape
    peak = g.reshape(c, -1).max(axis=1)
    g = np.divide(g, peak[:, None, None], out=np.zeros_like(g), where=peak[:, None, None] > 0)
    if c == 3:
        gray = np.tensordot(LUMA, g, axes=1)
    elif c == 1:
        gray = g[0]
    else:
        raise ValueError(f"expected 1 or 3 channels, got {c}")
    hp, wp = h // pool, w // pool
    pooled = gray[:hp * pool, :wp * pool].reshape(hp, pool, wp, pool).mean(axis=(1, 3))
    return Heatmap(np.clip(pooled, 0.0, 1.0), pool, image_id)


def quantize(values) -> np.ndarray:
    return np.round(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)


def color_ramp(values) -> np.ndarray:
    """Blue (0) to red (1) through purple; returns H×W×3 uint8."""
    q = quantize(values)
    return np.stack([q, np.zeros_like(q), 255 - q], axis=-1)


def write_pgm(path, values) -> Path:
    """Write a [0, 1] array as an 8-bit binary PGM."""
    q = quantize(values)
    h, w = q.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes())
    return path


def write_ppm(path, rgb) -> Path:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    path = Path(path)
    path.write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())
    return path


def render(hm: Heatmap, path, color: bool = False) -> Path:
    if color:
        return write_ppm(path, color_ramp(hm.values))
    return write_pgm(path, hm.values)


def _read_netpbm(data: bytes, magic: bytes):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        if pos >= len(data):
            raise ValueError("truncated netpbm header")
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"expected {magic.decode()} file, got {tokens[0][:2]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    return w, h, maxval, pos + 1


def encode_pgm(samples) -> bytes:
    """Binary PGM of non-negative integers (16-bit when the max exceeds 255)."""
    samples = np.asarray(samples)
    maxval = max(int(samples.max()), 1) if samples.size else 1
    if samples.size and int(samples.min()) < 0 or maxval > 65535:
        raise ValueError("PGM samples must lie in [0, 65535]")
    h, w = samples.shape
    body = samples.astype(">u2" if maxval > 255 else "u1").tobytes()
    return f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + body


def decode_pgm(data: bytes) -> np.ndarray:
    w, h, maxval, pos = _read_netpbm(data, b"P5")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    n = w * h * dtype.itemsize
    if len(data) - pos < n:
        raise ValueError("truncated PGM data")
    return np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(h, w).astype(np.int64)


def read_pgm(path) -> np.ndarray:
    """Raw integer samples of a binary PGM."""
    return decode_pgm(Path(path).read_bytes())


def read_ppm(path) -> np.ndarray:
    """H×W×3 integer samples of a binary PPM."""
    data = Path(path).read_bytes()
    w, h, maxval, pos = _read_netpbm(data, b"P6")
    dtype = np.dtype(">u2" if maxval > 255 else "u1")
    n = w * h * 3 * dtype.itemsize
    if len(data) - pos < n:
        raise ValueError(f"{path}: truncated PPM data")
    return np.frombuffer(data[pos:pos + n], dtype=dtype).reshape(h, w, 3).astype(np.int64)
