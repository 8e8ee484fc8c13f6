"""Superpixel gradient queries and the offline query set.

For an image ``x`` with base label ``p`` the differenced quantity is the
scalar loss ``-log P(p | x)`` reconstructed from the victim's answer (see
:func:`scalarize`).  A superpixel gradient perturbs every pixel of superpixel
``j`` in channel ``c`` by ``+eps`` and takes the forward difference; the
stored value is divided by the superpixel size so that it estimates the mean
pixel gradient over the superpixel.
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import PROB_FLOOR
from .oracle import QueryMode, QueryResponse, VictimOracle
from .sgmap import decode_pgm, encode_pgm
from .superpixel import Segmentation, segment

DEFAULT_EPSILON = 1e-5
FLIP_POLICIES = ("surrogate", "zero")

QS_MAGIC = b"SPSGQS1\n"
QS_VERSION = 1


class QuerySetIntegrityError(ValueError):
    pass


def scalarize(response: QueryResponse, base_label: int, flip_policy: str = "surrogate") -> float:
    """Loss-like scalar for forward differencing.

    Probability mode: ``-log P(base_label)``.  Hard-label mode: ``-log ŷ``
    while the top label is still ``base_label``; after a flip the surrogate
    ``-log(1 - ŷ)`` bounds the base-label probability from above.
    """
    if response.mode is QueryMode.PROBABILITY:
        return -math.log(max(float(response.probs[base_label]), PROB_FLOOR))
    if response.top_label == base_label:
        return -math.log(max(response.top_prob, PROB_FLOOR))
    if flip_policy not in FLIP_POLICIES:
        raise ValueError(f"unknown flip policy {flip_policy!r}")
    return -math.log(max(1.0 - response.top_prob, PROB_FLOOR))


def pixel_fd_gradient(oracle: VictimOracle, image, epsilon: float = DEFAULT_EPSILON,
                      image_id=None, batch_size: int = 256, flip_policy: str = "surrogate") -> np.ndarray:
    """Per-pixel forward differences; issues C·H·W + 1 queries."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    image = np.asarray(image, dtype=np.float64)
    base = oracle.query(image, image_id)
    p = base.top_label
    f0 = scalarize(base, p, flip_policy)
    flat = image.ravel()
    n = flat.size
    grad = np.empty(n)
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(n, start + batch_size))
        batch = np.repeat(flat[None], len(idx), axis=0)
        batch[np.arange(len(idx)), idx] += epsilon
        responses = oracle.query_batch(batch.reshape(len(idx), *image.shape), image_id)
        for k, r in zip(idx, responses):
            if r.top_label != p and flip_policy == "zero":
                grad[k] = 0.0
            else:
                grad[k] = (scalarize(r, p, flip_policy) - f0) / epsilon
    return grad.reshape(image.shape)


@dataclass
class SuperpixelGradientRecord:
    image_id: str
    image: np.ndarray
    base: QueryResponse
    epsilon: float
    segmentation: Segmentation | None = None
    g: np.ndarray | None = None  # J×C mean-convention superpixel gradients
    perturbed: np.ndarray | None = None  # J×C object array of QueryResponse

    @property
    def has_gradient(self) -> bool:
        return self.segmentation is not None

    @property
    def base_label(self) -> int:
        return self.base.top_label

    def perturbation(self, j: int, c: int) -> np.ndarray:
        """The queried image ``x + eps·E_j^c``."""
        x = self.image.copy()
        x[c][self.segmentation.labels == j] += self.epsilon
        return x


def perturbation_batch(image, labels, n_segments, epsilon) -> np.ndarray:
    """All ``x + eps·E_j^c`` stacked in (j, c) order."""
    c = image.shape[0]
    onehot = (labels[None] == np.arange(n_segments)[:, None, None]).astype(np.float64)
    out = np.repeat(np.repeat(image[None], n_segments, axis=0)[:, None], c, axis=1)
    for ch in range(c):
        out[:, ch, ch] += epsilon * onehot
    return out.reshape(n_segments * c, *image.shape)


def superpixel_fd_gradient(oracle: VictimOracle, image, seg: Segmentation,
                           epsilon: float = DEFAULT_EPSILON, image_id=None,
                           flip_policy: str = "surrogate") -> SuperpixelGradientRecord:
    """Forward differences per (superpixel, channel); issues C·J + 1 queries."""
    if epsilon <= 0:
        raise ValueError("epsilon must be > 0")
    image = np.asarray(image, dtype=np.float64)
    if seg.labels.shape != image.shape[1:]:
        raise ValueError(f"segmentation {seg.labels.shape} does not match image {image.shape[1:]}")
    base = oracle.query(image, image_id)
    p = base.top_label
    f0 = scalarize(base, p, flip_policy)
    J, C = seg.n_segments, image.shape[0]
    responses = oracle.query_batch(perturbation_batch(image, seg.labels, J, epsilon), image_id)
    sizes = seg.sizes
    g = np.empty((J, C))
    perturbed = np.empty((J, C), dtype=object)
    for k, r in enumerate(responses):
        j, c = divmod(k, C)
        perturbed[j, c] = r
        if r.top_label != p and flip_policy == "zero":
            g[j, c] = 0.0
        else:
            g[j, c] = (scalarize(r, p, flip_policy) - f0) / epsilon / sizes[j]
    return SuperpixelGradientRecord(str(image_id), image, base, float(epsilon), seg, g, perturbed)


@dataclass
class QuerySet:
    header: dict
    records: list = field(default_factory=list)
    ledger: dict = field(default_factory=dict)

    @property
    def mode(self) -> QueryMode:
        return QueryMode(self.header["query_mode"])

    @property
    def epsilon(self) -> float:
        return float(self.header["epsilon"])

    def __len__(self):
        return len(self.records)

    @property
    def gradient_records(self):
        return [r for r in self.records if r.has_gradient]


def build_query_set(oracle: VictimOracle, images, method: str = "quickshift", params=None,
                    epsilon: float = DEFAULT_EPSILON, gradient_fraction: float = 0.09,
                    seed: int = 0, image_ids=None, flip_policy: str = "surrogate") -> QuerySet:
    """Query every image once; gradient-query a seeded random subset.

    ``gradient_fraction`` of the images (rounded) receive full superpixel
    gradient queries; the rest are label-only records.
    """
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("build_query_set needs at least one image")
    if not 0.0 <= gradient_fraction <= 1.0:
        raise ValueError("gradient_fraction must lie in [0, 1]")
    if flip_policy not in FLIP_POLICIES:
        raise ValueError(f"unknown flip policy {flip_policy!r}")
    params = dict(params or {})
    image_ids = [str(i) for i in (image_ids if image_ids is not None else range(len(images)))]
    n_grad = int(round(gradient_fraction * len(images)))
    chosen = set(np.random.default_rng(seed).choice(len(images), n_grad, replace=False).tolist())
    start = oracle.ledger.total_queries
    records = []
    seg_params = None
    for i, (image, image_id) in enumerate(zip(images, image_ids)):
        try:
            if i in chosen:
                seg = segment(image, method, **params)
                seg_params = seg.params
                records.append(superpixel_fd_gradient(oracle, image, seg, epsilon, image_id, flip_policy))
            else:
                base = oracle.query(image, image_id)
                records.append(SuperpixelGradientRecord(image_id, image, base, float(epsilon)))
        except Exception as exc:
            raise RuntimeError(f"query set construction failed on image {image_id}") from exc
    if seg_params is None:
        from .superpixel import DEFAULT_PARAMS
        seg_params = {**DEFAULT_PARAMS[method], **params}
    header = {
        "format_version": str(QS_VERSION),
        "epsilon": repr(float(epsilon)),
        "segmentation_method": method,
        "segmentation_params": json.dumps(seg_params, sort_keys=True),
        "query_mode": oracle.mode.value,
        "scalar_functional": "neg_log_prob_of_base_label",
        "flip_policy": flip_policy,
        "gradient_convention": "mean",
        "input_clipping": "none",
        "round_decimals": str(oracle.round_decimals),
        "victim_fingerprint": oracle.fingerprint,
        "seed": str(int(seed)),
        "gradient_fraction": repr(float(gradient_fraction)),
        "num_classes": str(oracle.num_classes),
        "image_shape": "x".join(map(str, oracle.input_shape)),
    }
    ledger = {"total_queries": oracle.ledger.total_queries - start, "images": len(images),
              "gradient_images": n_grad}
    return QuerySet(header, records, ledger)


# ---------------------------------------------------------------- file format

_MODE_CODE = {QueryMode.PROBABILITY: 0, QueryMode.HARD_LABEL: 1}
_CODE_MODE = {v: k for k, v in _MODE_CODE.items()}


def _encode_header(header: dict) -> bytes:
    lines = []
    for key in sorted(header):
        value = str(header[key])
        if "\n" in value or "=" in key:
            raise ValueError(f"header entry {key!r} is not representable")
        lines.append(f"{key} = {value}")
    return ("\n".join(lines) + "\n").encode("utf-8")


def _decode_header(data: bytes) -> dict:
    header = {}
    for line in data.decode("utf-8").splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise QuerySetIntegrityError(f"malformed header line {line!r}")
        header[key] = value
    return header


def _pack_response(r: QueryResponse, k: int) -> bytes:
    out = struct.pack("<Id", r.top_label, r.top_prob)
    if r.mode is QueryMode.PROBABILITY:
        out += np.asarray(r.probs, dtype="<f8").tobytes()
    return out


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise QuerySetIntegrityError(f"truncated data at byte {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, n: int) -> np.ndarray:
        return np.frombuffer(self.take(8 * n), dtype="<f8").astype(np.float64)

    def response(self, mode: QueryMode, k: int) -> QueryResponse:
        label, prob = self.unpack("<Id")
        probs = self.array(k) if mode is QueryMode.PROBABILITY else None
        return QueryResponse(mode, int(label), float(prob), probs)


def _encode_record(rec: SuperpixelGradientRecord, mode: QueryMode, k: int) -> bytes:
    ident = rec.image_id.encode("utf-8")
    out = [struct.pack("<H", len(ident)), ident,
           struct.pack("<Bd", _MODE_CODE[mode], rec.epsilon),
           struct.pack("<B", int(rec.has_gradient)),
           struct.pack("<III", *rec.image.shape),
           np.asarray(rec.image, dtype="<f8").tobytes(),
           _pack_response(rec.base, k)]
    if rec.has_gradient:
        pgm = encode_pgm(rec.segmentation.labels)
        J, C = rec.g.shape
        out += [struct.pack("<II", J, C), struct.pack("<I", len(pgm)), pgm,
                np.asarray(rec.g, dtype="<f8").tobytes()]
        out += [_pack_response(rec.perturbed[j, c], k) for j in range(J) for c in range(C)]
    return b"".join(out)


def _decode_record(data: bytes, header: dict) -> SuperpixelGradientRecord:
    mode = QueryMode(header["query_mode"])
    k = int(header["num_classes"])
    epsilon = float(header["epsilon"])
    rd = _Reader(data)
    (n,) = rd.unpack("<H")
    image_id = rd.take(n).decode("utf-8")
    mode_code, rec_eps = rd.unpack("<Bd")
    if _CODE_MODE.get(mode_code) is not mode or rec_eps != epsilon:
        raise QuerySetIntegrityError(f"record {image_id}: policy fields disagree with header")
    (has_gradient,) = rd.unpack("<B")
    shape = rd.unpack("<III")
    image = rd.array(int(np.prod(shape))).reshape(shape)
    base = rd.response(mode, k)
    rec = SuperpixelGradientRecord(image_id, image, base, rec_eps)
    if has_gradient:
        J, C = rd.unpack("<II")
        (pgm_len,) = rd.unpack("<I")
        labels = decode_pgm(rd.take(pgm_len))
        params = json.loads(header["segmentation_params"])
        rec.segmentation = Segmentation(labels, header["segmentation_method"], params)
        if rec.segmentation.n_segments != J or C != shape[0]:
            raise QuerySetIntegrityError(f"record {image_id}: gradient shape disagrees with label map")
        rec.g = rd.array(J * C).reshape(J, C)
        rec.perturbed = np.empty((J, C), dtype=object)
        for j in range(J):
            for c in range(C):
                rec.perturbed[j, c] = rd.response(mode, k)
    if rd.pos != len(data):
        raise QuerySetIntegrityError(f"record {image_id}: {len(data) - rd.pos} trailing bytes")
    return rec


def query_set_bytes(qs: QuerySet) -> bytes:
    header = dict(qs.header)
    for key, value in qs.ledger.items():
        header[f"ledger_{key}"] = str(value)
    mode = QueryMode(header["query_mode"])
    k = int(header["num_classes"])
    head = _encode_header(header)
    parts = [QS_MAGIC, bytes([QS_VERSION]), struct.pack("<I", len(head)), head,
             struct.pack("<I", len(qs.records))]
    for rec in qs.records:
        body = _encode_record(rec, mode, k)
        parts += [struct.pack("<I", len(body)), body, struct.pack("<I", zlib.crc32(body))]
    blob = b"".join(parts)
    return blob + struct.pack("<I", zlib.crc32(blob))


def save_query_set(qs: QuerySet, path):
    Path(path).write_bytes(query_set_bytes(qs))


def query_set_from_bytes(data: bytes) -> QuerySet:
    if len(data) < len(QS_MAGIC) + 1 + 4 or not data.startswith(QS_MAGIC):
        raise QuerySetIntegrityError("missing SPSGQS1 magic")
    (trailer,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != trailer:
        raise QuerySetIntegrityError("trailer checksum mismatch (corrupt or truncated file)")
    rd = _Reader(data[:-4])
    rd.take(len(QS_MAGIC))
    (version,) = rd.unpack("<B")
    if version != QS_VERSION:
        raise QuerySetIntegrityError(f"unsupported query-set version {version}")
    (hlen,) = rd.unpack("<I")
    header = _decode_header(rd.take(hlen))
    ledger = {}
    for key in [k for k in header if k.startswith("ledger_")]:
        ledger[key[len("ledger_"):]] = int(header.pop(key))
    (count,) = rd.unpack("<I")
    records = []
    for _ in range(count):
        (n,) = rd.unpack("<I")
        body = rd.take(n)
        (crc,) = rd.unpack("<I")
        if zlib.crc32(body) != crc:
            raise QuerySetIntegrityError(f"record {len(records)} checksum mismatch")
        records.append(_decode_record(body, header))
    if rd.pos != len(rd.data):
        raise QuerySetIntegrityError("trailing bytes after last record")
    return QuerySet(header, records, ledger)


def load_query_set(path) -> QuerySet:
    return query_set_from_bytes(Path(path).read_bytes())
