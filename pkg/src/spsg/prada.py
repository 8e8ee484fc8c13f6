"""Query-distribution monitor in the style of PRADA.

For each class the monitor keeps a growing set of retained queries.  A new
query's minimum L2 distance to the retained images of its predicted class is
appended to that class's distance set (and the image retained) when it
reaches ``threshold_factor`` times the class's running mean distance.  Once
the pooled distance set holds ``warmup`` values, every observation computes
the Shapiro-Wilk statistic W of the pooled set; the stream is flagged while
``W < delta``.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import ndtri

from .sgmap import write_pgm


def _poly(coefs, x):
    return sum(c * x ** k for k, c in enumerate(coefs))


def shapiro_wilk_coefficients(n: int) -> np.ndarray:
    """Royston's approximation to the Shapiro-Wilk weights (ascending order)."""
    if n < 3:
        raise ValueError("need at least 3 samples")
    if n == 3:
        return np.array([-np.sqrt(0.5), 0.0, np.sqrt(0.5)])
    m = ndtri((np.arange(1, n + 1) - 0.375) / (n + 0.25))
    mm = float(m @ m)
    c = m / np.sqrt(mm)
    u = 1.0 / np.sqrt(n)
    a = np.empty(n)
    a_n = c[-1] + _poly([0.0, 0.221157, -0.147981, -2.071190, 4.434685, -2.706056], u)
    if n > 5:
        a_n1 = c[-2] + _poly([0.0, 0.042981, -0.293762, -1.752461, 5.682633, -3.582633], u)
        phi = (mm - 2 * m[-1] ** 2 - 2 * m[-2] ** 2) / (1 - 2 * a_n ** 2 - 2 * a_n1 ** 2)
        a[2:-2] = m[2:-2] / np.sqrt(phi)
        a[-2], a[1] = a_n1, -a_n1
    else:
        phi = (mm - 2 * m[-1] ** 2) / (1 - 2 * a_n ** 2)
        a[1:-1] = m[1:-1] / np.sqrt(phi)
    a[-1], a[0] = a_n, -a_n
    return a


def normality_statistic(distances, degenerate_rtol: float = 1e-9) -> float:
    """Shapiro-Wilk W; 0 for (numerically) constant samples."""
    x = np.sort(np.asarray(distances, dtype=np.float64).ravel())
    n = len(x)
    if n < 3:
        raise ValueError("normality_statistic needs at least 3 samples")
    spread = x[-1] - x[0]
    if spread <= degenerate_rtol * max(abs(x[-1]), abs(x[0])) or spread == 0.0:
        return 0.0
    a = shapiro_wilk_coefficients(n)
    xc = x - x.mean()
    w = float((a @ xc) ** 2 / (xc @ xc))
    return min(w, 1.0)


class _GrowingRows:
    """Append-only row buffer with amortized doubling."""

    def __init__(self, width: int):
        self.data = np.empty((16, width))
        self.n = 0

    def append(self, row):
        if self.n == len(self.data):
            self.data = np.concatenate([self.data, np.empty_like(self.data)])
        self.data[self.n] = row
        self.n += 1

    @property
    def rows(self) -> np.ndarray:
        return self.data[:self.n]


@dataclass
class DistanceHistory:
    retained: dict = field(default_factory=dict)  # class -> _GrowingRows of flattened images
    distances: dict = field(default_factory=dict)  # class -> list of retained min distances
    distance_log: list = field(default_factory=list)  # (query_index, class, distance)
    w_timeline: list = field(default_factory=list)  # (query_index, W or None, flagged)


class PradaMonitor:
    def __init__(self, delta: float = 0.9, warmup: int = 100, threshold_factor: float = 0.1):
        if warmup < 3:
            raise ValueError("warmup must be at least 3")
        self.delta = delta
        self.warmup = warmup
        self.threshold_factor = threshold_factor
        self.history = DistanceHistory()
        self._pooled: list[float] = []
        self.n_observed = 0

    def _threshold(self, label: int) -> float:
        d = self.history.distances.get(label)
        return self.threshold_factor * float(np.mean(d)) if d else 0.0

    def observe(self, image, predicted_label: int) -> bool:
        x = np.asarray(image, dtype=np.float64).ravel()
        label = int(predicted_label)
        h = self.history
        idx = self.n_observed
        self.n_observed += 1
        store = h.retained.get(label)
        if store is None:
            store = h.retained[label] = _GrowingRows(x.size)
            h.distances[label] = []
            store.append(x)
        else:
            d = float(np.sqrt(np.min(np.sum((store.rows - x) ** 2, axis=1))))
            if d >= self._threshold(label):
                store.append(x)
                h.distances[label].append(d)
                h.distance_log.append((idx, label, d))
                self._pooled.append(d)
        if len(self._pooled) < self.warmup:
            h.w_timeline.append((idx, None, False))
            return False
        w = normality_statistic(self._pooled)
        flagged = w < self.delta
        h.w_timeline.append((idx, w, flagged))
        return flagged

    @property
    def flags(self) -> np.ndarray:
        return np.array([f for _, _, f in self.history.w_timeline], dtype=bool)

    def flag_rate(self, after_warmup: bool = True) -> float:
        rows = self.history.w_timeline
        if after_warmup:
            rows = [r for r in rows if r[1] is not None]
        return float(np.mean([r[2] for r in rows])) if rows else float("nan")

    def first_flag(self) -> int | None:
        for idx, _, flagged in self.history.w_timeline:
            if flagged:
                return idx
        return None

    def report(self, bins: int = 32) -> "PradaReport":
        hists = {}
        for label, d in sorted(self.history.distances.items()):
            if d:
                hists[label] = np.histogram(d, bins=bins)
        return PradaReport(list(self.history.w_timeline), list(self.history.distance_log), hists)


def replay_query_set(monitor: PradaMonitor, qs) -> PradaMonitor:
    """Feed a stored query stream (base, then (j, c) perturbations) to a monitor."""
    for rec in qs.records:
        monitor.observe(rec.image, rec.base.top_label)
        if rec.has_gradient:
            J, C = rec.g.shape
            for j in range(J):
                for c in range(C):
                    monitor.observe(rec.perturbation(j, c), rec.perturbed[j, c].top_label)
    return monitor


@dataclass
class PradaReport:
    w_timeline: list
    distance_log: list
    histograms: dict  # class -> (counts, edges)

    @property
    def empty(self) -> bool:
        return not self.w_timeline

    def write(self, out_dir) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "prada_distances.csv", out / "prada_timeline.csv"]
        with open(written[0], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_index", "class", "min_distance"])
            w.writerows((i, c, f"{d:.10g}") for i, c, d in self.distance_log)
        with open(written[1], "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["query_index", "W", "flagged"])
            w.writerows((i, "" if s is None else f"{s:.10g}", int(f)) for i, s, f in self.w_timeline)
        for label, (counts, _) in self.histograms.items():
            path = out / f"prada_hist_class{label}.pgm"
            write_pgm(path, histogram_image(counts))
            written.append(path)
        return written


def histogram_image(counts, height: int = 64, bar_width: int = 4) -> np.ndarray:
    """Bar chart in [0, 1]: white bars on black, one bar per bin."""
    counts = np.asarray(counts, dtype=np.float64)
    peak = counts.max() if counts.size and counts.max() > 0 else 1.0
    heights = np.round(counts / peak * height).astype(int)
    img = np.zeros((height, len(counts) * bar_width))
    for b, hgt in enumerate(heights):
        if hgt:
            img[height - hgt:, b * bar_width:(b + 1) * bar_width] = 1.0
    return img
