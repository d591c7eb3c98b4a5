#!/usr/bin/env python3
"""Write the 5000-image MNIST subset bundled with mlxtend as gzipped IDX files.

Usage: mnist_subset.py <mnist_5k.csv.gz or mlxtend wheel> <out-dir>

Produces a stratified split: 400 train + 100 test images per class, shuffled
with a fixed seed, using the standard MNIST file names.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def load(path):
    if path.endswith(".whl"):
        raw = zipfile.ZipFile(path).read("mlxtend/data/data/mnist_5k.csv.gz")
    else:
        raw = open(path, "rb").read()
    data = np.loadtxt(io.BytesIO(gzip.decompress(raw)), delimiter=",")
    return data[:, :-1].astype(np.uint8), data[:, -1].astype(np.uint8)


def write_idx(path, arr):
    magic = struct.pack(">BBBB", 0, 0, 0x08, arr.ndim)
    dims = b"".join(struct.pack(">I", d) for d in arr.shape)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(magic + dims + arr.tobytes())


def main():
    images, labels = load(sys.argv[1])
    out = sys.argv[2]
    rng = np.random.default_rng(20180605)
    train, test = [], []
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(labels == c))
        test.extend(idx[:100])
        train.extend(idx[100:])
    for name, sel in (("train", rng.permutation(train)), ("t10k", rng.permutation(test))):
        write_idx(f"{out}/{name}-images-idx3-ubyte.gz", images[sel].reshape(-1, 28, 28))
        write_idx(f"{out}/{name}-labels-idx1-ubyte.gz", labels[sel])


if __name__ == "__main__":
    main()
