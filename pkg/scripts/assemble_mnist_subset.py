"""Assemble a 15k real-MNIST IDX fixture from locally available package data.

Sources (no dataset download involved):
  * the npm ``mnist`` package (10k digits, JSON, intensities rounded to 1e-3)
  * the ``mlxtend`` wheel (5k digits, ``mlxtend/data/data/mnist_5k.csv.gz``)

Usage::

    npm pack mnist && tar xzf mnist-*.tgz
    pip download --no-deps mlxtend
    python scripts/assemble_mnist_subset.py package/src/digits mlxtend-*.whl data/
"""
import argparse
import gzip
import io
import json
import struct
import zipfile
from pathlib import Path

import numpy as np


def write_idx(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">BBBB", 0, 0, 0x08, array.ndim)
    header += b"".join(struct.pack(">I", d) for d in array.shape)
    with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
        fh.write(header + array.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir")
    ap.add_argument("mlxtend_wheel")
    ap.add_argument("out_dir")
    args = ap.parse_args()

    images, labels = [], []
    for k in range(10):
        with open(Path(args.digits_dir) / f"{k}.json") as fh:
            flat = np.asarray(json.load(fh)["data"], dtype=np.float64).reshape(-1, 784)
        images.append(np.round(flat * 255.0))
        labels.append(np.full(len(flat), k))
    with zipfile.ZipFile(args.mlxtend_wheel) as zf:
        raw = gzip.decompress(zf.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",")
    images.append(table[:, :-1])
    labels.append(table[:, -1])

    x = np.clip(np.vstack(images), 0, 255).astype(np.uint8).reshape(-1, 28, 28)
    y = np.concatenate(labels).astype(np.uint8)
    # fixed shuffle so every split draws from both sources
    order = np.random.default_rng(20240601).permutation(len(y))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_idx(out / "mnist15k-images-idx3-ubyte.gz", x[order])
    write_idx(out / "mnist15k-labels-idx1-ubyte.gz", y[order])
    print(f"wrote {len(y)} images to {out}")


if __name__ == "__main__":
    main()
