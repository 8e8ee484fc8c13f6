"""Superpixel partitions: grid, SLIC, Felzenszwalb and quickshift.

Images are C×H×W float arrays (values nominally in [0, 1]).  Every method
returns a :class:`Segmentation` whose labels are a complete, contiguous
partition ``0..J-1``.  Colour features for SLIC and quickshift are
per-channel standardized intensities rather than CIELAB.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba
import numpy as np
from scipy import ndimage
from sklearn.base import BaseEstimator, TransformerMixin

METHODS = ("grid", "slic", "felzenszwalb", "quickshift")

DEFAULT_PARAMS = {
    "grid": {"block": 8},
    "slic": {"k": 85, "compactness": 10.0, "iters": 10},
    "felzenszwalb": {"scale": 100.0, "min_size": 50, "sigma": 0.8},
    "quickshift": {"kernel_size": 4.0, "max_dist": 12.0, "ratio": 1.0},
}


@dataclass
class Segmentation:
    labels: np.ndarray
    method: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)

    @property
    def n_segments(self) -> int:
        return int(self.labels.max()) + 1

    J = n_segments

    @property
    def sizes(self) -> np.ndarray:
        return np.bincount(self.labels.ravel(), minlength=self.n_segments)

    @property
    def shape(self):
        return self.labels.shape

    def check(self):
        """Raise if the partition invariants do not hold."""
        sizes = self.sizes
        if self.labels.min() < 0 or (sizes == 0).any():
            raise ValueError("labels are not a contiguous partition")
        if sizes.sum() != self.labels.size:
            raise ValueError("label sizes do not cover the image")


def relabel(labels: np.ndarray) -> np.ndarray:
    """Map labels to 0..J-1 in order of first appearance (row-major)."""
    flat = labels.ravel()
    _, first, inverse = np.unique(flat, return_index=True, return_inverse=True)
    rank = np.empty(len(first), dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(len(first))
    return rank[inverse].reshape(labels.shape)


def _as_chw(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    if image.ndim != 3:
        raise ValueError(f"expected C×H×W image, got shape {image.shape}")
    return image


def _standardize(image: np.ndarray) -> np.ndarray:
    mean = image.mean(axis=(1, 2), keepdims=True)
    std = image.std(axis=(1, 2), keepdims=True)
    return np.where(std > 0, (image - mean) / np.where(std > 0, std, 1.0), 0.0)


# --------------------------------------------------------------------- grid

def segment_grid(image, block: int = 8) -> Segmentation:
    image = _as_chw(image)
    if block < 1:
        raise ValueError("block must be >= 1")
    _, h, w = image.shape
    cols = math.ceil(w / block)
    rows = np.arange(h)[:, None] // block
    labels = rows * cols + np.arange(w)[None, :] // block
    return Segmentation(labels, "grid", {"block": int(block)})


# ------------------------------------------------------------------- helpers

def _neighbour_pairs(labels):
    """Distinct 4-adjacent label pairs (a, b) with a != b."""
    a = np.concatenate([labels[:, :-1].ravel(), labels[:-1, :].ravel()])
    b = np.concatenate([labels[:, 1:].ravel(), labels[1:, :].ravel()])
    keep = a != b
    return a[keep], b[keep]


def enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Split labels into 4-connected components and merge orphans.

    For each label the largest component keeps it; every other component is
    merged, smallest first, into the adjacent region that is currently largest.
    """
    comp = np.zeros(labels.shape, dtype=np.int64)
    offset = 0
    owner = []  # original label of each component
    for lab in np.unique(labels):
        cc, n = ndimage.label(labels == lab)
        mask = cc > 0
        comp[mask] = cc[mask] + offset - 1
        owner.extend([lab] * n)
        offset += n
    sizes = np.bincount(comp.ravel(), minlength=offset).astype(np.int64)
    owner = np.asarray(owner)
    keep = np.zeros(offset, dtype=bool)
    for lab in np.unique(owner):
        ids = np.flatnonzero(owner == lab)
        keep[ids[np.argmax(sizes[ids])]] = True
    parent = np.arange(offset)

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    orphans = np.flatnonzero(~keep)
    if len(orphans):
        a, b = _neighbour_pairs(comp)
        adjacency = [[] for _ in range(offset)]
        for u, v in set(zip(a.tolist(), b.tolist())):
            adjacency[u].append(v)
            adjacency[v].append(u)
        for o in orphans[np.lexsort((orphans, sizes[orphans]))]:
            root_o = find(o)
            best, best_size = -1, -1
            for nb in sorted(adjacency[o]):
                r = find(nb)
                if r == root_o:
                    continue
                if sizes[r] > best_size:
                    best, best_size = r, sizes[r]
            if best >= 0:
                parent[root_o] = best
                sizes[best] += sizes[root_o]
        roots = np.array([find(i) for i in range(offset)])
        comp = roots[comp]
    return relabel(comp)


# --------------------------------------------------------------------- SLIC

def segment_slic(image, k: int = 85, compactness: float = 10.0, iters: int = 10) -> Segmentation:
    """SLIC: local k-means over (colour, x, y) with a 2S window per centre.

    ``compactness`` weighs spatial distance (in units of the grid step S)
    against colour distance in standardized units.
    """
    image = _as_chw(image)
    if k < 1:
        raise ValueError("k must be >= 1")
    params = {"k": int(k), "compactness": float(compactness), "iters": int(iters)}
    c, h, w = image.shape
    if k >= h * w:
        return Segmentation(np.arange(h * w).reshape(h, w), "slic", params)
    if k == 1:
        return Segmentation(np.zeros((h, w), dtype=np.int64), "slic", params)

    feat = _standardize(image)
    step = math.sqrt(h * w / k)
    ny = max(1, round(h / step))
    nx = max(1, round(w / step))
    ys = (np.arange(ny) + 0.5) * h / ny - 0.5
    xs = (np.arange(nx) + 0.5) * w / nx - 0.5
    cy, cx = np.meshgrid(ys, xs, indexing="ij")
    cy, cx = cy.ravel(), cx.ravel()

    # move seeds to the lowest-gradient position in their 3×3 neighbourhood
    gy = np.zeros((h, w))
    gx = np.zeros((h, w))
    gy[1:-1] = ((feat[:, 2:] - feat[:, :-2]) ** 2).sum(0)
    gx[:, 1:-1] = ((feat[:, :, 2:] - feat[:, :, :-2]) ** 2).sum(0)
    grad = gy + gx
    for i in range(len(cy)):
        y0, x0 = int(round(cy[i])), int(round(cx[i]))
        best = (grad[y0, x0], y0, x0)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                y, x = y0 + dy, x0 + dx
                if 0 <= y < h and 0 <= x < w and grad[y, x] < best[0]:
                    best = (grad[y, x], y, x)
        if best[1:] != (y0, x0):
            cy[i], cx[i] = best[1], best[2]

    cyi, cxi = np.rint(cy).astype(int), np.rint(cx).astype(int)
    centres = np.column_stack([feat[:, cyi, cxi].T, cy, cx]).astype(np.float64)
    yy, xx = np.mgrid[0:h, 0:w]
    spatial_w = (compactness / step) ** 2
    radius = int(math.ceil(step))
    labels = np.zeros((h, w), dtype=np.int64)
    for _ in range(iters):
        dist = np.full((h, w), np.inf)
        for i, cen in enumerate(centres):
            y0, x0 = int(round(cen[c])), int(round(cen[c + 1]))
            ya, yb = max(0, y0 - radius), min(h, y0 + radius + 1)
            xa, xb = max(0, x0 - radius), min(w, x0 + radius + 1)
            patch = feat[:, ya:yb, xa:xb]
            dc = ((patch - cen[:c, None, None]) ** 2).sum(0)
            ds = (yy[ya:yb, xa:xb] - cen[c]) ** 2 + (xx[ya:yb, xa:xb] - cen[c + 1]) ** 2
            d = dc + spatial_w * ds
            region = dist[ya:yb, xa:xb]
            better = d < region
            region[better] = d[better]
            labels[ya:yb, xa:xb][better] = i
        # pixels never reached (possible once centres drift) keep their old label
        for i in range(len(centres)):
            m = labels == i
            if m.any():
                centres[i, :c] = feat[:, m].mean(axis=1)
                centres[i, c] = yy[m].mean()
                centres[i, c + 1] = xx[m].mean()
    return Segmentation(enforce_connectivity(labels), "slic", params)


# ------------------------------------------------------------- felzenszwalb

@numba.njit(cache=True)
def _find(parent, i):
    root = i
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


@numba.njit(cache=True)
def _felzenszwalb_merge(n, ea, eb, ew, k, min_size):
    parent = np.arange(n)
    size = np.ones(n, dtype=np.int64)
    internal = np.zeros(n)
    for e in range(len(ew)):
        ra = _find(parent, ea[e])
        rb = _find(parent, eb[e])
        if ra == rb:
            continue
        w = ew[e]
        if w <= min(internal[ra] + k / size[ra], internal[rb] + k / size[rb]):
            if ra > rb:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
            internal[ra] = w
    for e in range(len(ew)):
        ra = _find(parent, ea[e])
        rb = _find(parent, eb[e])
        if ra != rb and (size[ra] < min_size or size[rb] < min_size):
            if ra > rb:
                ra, rb = rb, ra
            parent[rb] = ra
            size[ra] += size[rb]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        out[i] = _find(parent, i)
    return out


def segment_felzenszwalb(image, scale: float = 100.0, min_size: int = 50, sigma: float = 0.8) -> Segmentation:
    """Graph-based merging on the 4-connected pixel grid.

    Edge weights are Euclidean colour differences of the (optionally
    Gaussian-smoothed) image; the merge threshold is ``scale/255 / |C|``.
    """
    image = _as_chw(image)
    if scale <= 0:
        raise ValueError("scale must be > 0")
    params = {"scale": float(scale), "min_size": int(min_size), "sigma": float(sigma)}
    c, h, w = image.shape
    if sigma > 0:
        image = np.stack([ndimage.gaussian_filter(ch, sigma, mode="nearest") for ch in image])
    idx = np.arange(h * w).reshape(h, w)
    ea = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    eb = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    flat = image.reshape(c, -1)
    ew = np.sqrt(((flat[:, ea] - flat[:, eb]) ** 2).sum(0))
    order = np.argsort(ew, kind="stable")
    roots = _felzenszwalb_merge(h * w, ea[order], eb[order], ew[order], scale / 255.0, int(min_size))
    return Segmentation(relabel(roots.reshape(h, w)), "felzenszwalb", params)


# --------------------------------------------------------------- quickshift

@numba.njit(cache=True)
def _quickshift_links(feat, kernel_size, max_dist, radius):
    nf, h, w = feat.shape
    inv = 1.0 / (2.0 * kernel_size * kernel_size)
    density = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            acc = 0.0
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    d = (yy - y) ** 2 + (xx - x) ** 2
                    for f in range(nf):
                        diff = feat[f, yy, xx] - feat[f, y, x]
                        d += diff * diff
                    acc += math.exp(-d * inv)
            density[y, x] = acc
    parent = np.empty(h * w, dtype=np.int64)
    limit = max_dist * max_dist
    for y in range(h):
        for x in range(w):
            me = y * w + x
            best, best_d = me, np.inf
            # scan in ascending linear index so equal distances keep the lowest index
            for yy in range(max(0, y - radius), min(h, y + radius + 1)):
                for xx in range(max(0, x - radius), min(w, x + radius + 1)):
                    other = yy * w + xx
                    if density[yy, xx] > density[y, x] or (
                        density[yy, xx] == density[y, x] and other < me
                    ):
                        d = (yy - y) ** 2 + (xx - x) ** 2
                        for f in range(nf):
                            diff = feat[f, yy, xx] - feat[f, y, x]
                            d += diff * diff
                        if d < best_d:
                            best, best_d = other, d
            parent[me] = best if best_d <= limit else me
    return parent


def segment_quickshift(image, kernel_size: float = 4.0, max_dist: float = 12.0, ratio: float = 1.0) -> Segmentation:
    """Quickshift mode seeking in joint (ratio·colour, y, x) space.

    Density is a Gaussian Parzen estimate over a (6σ+1)² window; each pixel
    links to the nearest pixel of strictly higher rank within the window,
    where rank orders by density and then by lower linear index.  Links longer
    than ``max_dist`` are cut and the resulting trees are the superpixels.
    """
    image = _as_chw(image)
    if kernel_size <= 0 or max_dist <= 0:
        raise ValueError("kernel_size and max_dist must be > 0")
    params = {"kernel_size": float(kernel_size), "max_dist": float(max_dist), "ratio": float(ratio)}
    _, h, w = image.shape
    feat = np.ascontiguousarray(_standardize(image) * ratio)
    radius = max(1, int(math.ceil(3 * kernel_size)))
    parent = _quickshift_links(feat, float(kernel_size), float(max_dist), radius)
    # pointer jumping to the tree roots
    while True:
        nxt = parent[parent]
        if np.array_equal(nxt, parent):
            break
        parent = nxt
    return Segmentation(relabel(parent.reshape(h, w)), "quickshift", params)


# ------------------------------------------------------------------ facade

_SEGMENTERS = {
    "grid": segment_grid,
    "slic": segment_slic,
    "felzenszwalb": segment_felzenszwalb,
    "quickshift": segment_quickshift,
}


def segment(image, method: str = "quickshift", **params) -> Segmentation:
    if method not in _SEGMENTERS:
        raise ValueError(f"unknown segmentation method {method!r}")
    merged = {**DEFAULT_PARAMS[method], **params}
    return _SEGMENTERS[method](image, **merged)


class SuperpixelSegmenter(BaseEstimator, TransformerMixin):
    """Stateless transformer mapping N×C×H×W images to N×H×W label maps."""

    def __init__(self, method="quickshift", params=None):
        self.method = method
        self.params = params

    def fit(self, X=None, y=None):
        return self

    def segment(self, image) -> Segmentation:
        return segment(image, self.method, **(self.params or {}))

    def transform(self, X):
        return np.stack([self.segment(x).labels for x in X])
