"""Black-box access to a victim network.

:class:`VictimOracle` is the only object attack code receives.  It answers
queries in one fixed :class:`QueryMode`, counts every answered query in a
:class:`QueryLedger` and forwards each query to an optional defense monitor
in query order.
"""
from __future__ import annotations

import enum
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np

from .nn import Network, ShapeError


class QueryMode(str, enum.Enum):
    PROBABILITY = "probability"
    HARD_LABEL = "hard_label"


@dataclass(frozen=True)
class QueryResponse:
    mode: QueryMode
    top_label: int
    top_prob: float
    probs: np.ndarray | None = None

    def to_hard_label(self, decimals: int | None = 4) -> "QueryResponse":
        top = self.top_prob if decimals is None else round(self.top_prob, decimals)
        return QueryResponse(QueryMode.HARD_LABEL, self.top_label, top)

    def __eq__(self, other):
        if not isinstance(other, QueryResponse):
            return NotImplemented
        same_probs = (self.probs is None and other.probs is None) or (
            self.probs is not None and other.probs is not None
            and np.array_equal(self.probs, other.probs)
        )
        return (self.mode == other.mode and self.top_label == other.top_label
                and self.top_prob == other.top_prob and same_probs)

    __hash__ = None


class QueryLedger:
    """Thread-safe monotone query counter with a per-image breakdown."""

    def __init__(self):
        self._lock = threading.Lock()
        self._total = 0
        self._per_image = Counter()

    def record(self, image_id, n: int = 1):
        with self._lock:
            self._total += n
            self._per_image[image_id] += n

    @property
    def total_queries(self) -> int:
        return self._total

    @property
    def per_image(self) -> dict:
        with self._lock:
            return dict(self._per_image)

    def snapshot(self) -> dict:
        with self._lock:
            return {"total_queries": self._total, "images": len(self._per_image)}


class VictimOracle:
    """Query interface around a victim :class:`~spsg.nn.Network`.

    Hard-label answers carry the top-1 label and its confidence rounded to
    ``round_decimals`` places (``None`` disables rounding).  Inputs are never
    clipped, so perturbed queries may sit slightly outside [0, 1].
    """

    CHUNK = 64

    def __init__(self, network: Network, mode=QueryMode.PROBABILITY, monitor=None,
                 round_decimals: int | None = 4):
        self._network = network
        self.mode = QueryMode(mode)
        self.monitor = monitor
        self.round_decimals = round_decimals
        self.ledger = QueryLedger()
        self._monitor_lock = threading.Lock()
        self.input_shape = network.input_shape
        self.num_classes = network.num_classes
        self.fingerprint = network.fingerprint()

    def _respond(self, probs: np.ndarray) -> QueryResponse:
        top = int(np.argmax(probs))
        if self.mode is QueryMode.PROBABILITY:
            return QueryResponse(self.mode, top, float(probs[top]), probs.copy())
        top_prob = float(probs[top])
        if self.round_decimals is not None:
            top_prob = round(top_prob, self.round_decimals)
        return QueryResponse(self.mode, top, top_prob)

    def _forward(self, images: np.ndarray) -> np.ndarray:
        # Fixed-size zero-padded chunks: a row's floating-point result then does
        # not depend on how the caller batched it, so query_batch and repeated
        # query calls answer bit-identically.
        n = len(images)
        out = []
        for start in range(0, n, self.CHUNK):
            chunk = images[start:start + self.CHUNK]
            if len(chunk) < self.CHUNK:
                pad = np.zeros((self.CHUNK - len(chunk), *chunk.shape[1:]))
                chunk = np.concatenate([chunk, pad])
            out.append(self._network.forward(chunk))
        return np.concatenate(out)[:n]

    def query_batch(self, images, image_id=None) -> list[QueryResponse]:
        images = np.asarray(images, dtype=np.float64)
        if len(images) == 0:
            return []
        if images.ndim != len(self.input_shape) + 1 or images.shape[1:] != self.input_shape:
            raise ShapeError(f"query shape {images.shape[1:]} does not match victim input {self.input_shape}")
        probs = self._forward(images)
        responses = [self._respond(p) for p in probs]
        if self.monitor is not None:
            with self._monitor_lock:
                for image, r in zip(images, responses):
                    self.monitor.observe(image, r.top_label)
        self.ledger.record(image_id, len(responses))
        return responses

    def query(self, image, image_id=None) -> QueryResponse:
        return self.query_batch(np.asarray(image, dtype=np.float64)[None], image_id)[0]

    def predict(self, images, batch_size: int = 512) -> np.ndarray:
        """Top-1 labels for many images (each counted as a query)."""
        out = []
        for i in range(0, len(images), batch_size):
            out.extend(r.top_label for r in self.query_batch(images[i:i + batch_size]))
        return np.asarray(out, dtype=np.int64)
