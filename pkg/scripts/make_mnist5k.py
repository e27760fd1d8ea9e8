"""Convert the 5000-sample MNIST subset shipped with mlxtend into IDX files.

Usage:
    pip download --no-deps mlxtend -d /tmp/mlx
    python scripts/make_mnist5k.py /tmp/mlx/mlxtend-*.whl tests/data/mnist5k

The subset (500 images per digit, drawn from the official MNIST training
set) is split per class into 400 training and 100 held-out images. The
held-out part is written under the t10k-* names so the standard loader
treats it as the test split.
"""
import argparse
import gzip
import io
import struct
import zipfile
from pathlib import Path

import numpy as np

MEMBER = "mlxtend/data/data/mnist_5k.csv.gz"
HELD_OUT_PER_CLASS = 100


def write_idx(path, images, labels_path, labels):
    rows = cols = 28
    header = struct.pack(">IIII", 2051, len(images), rows, cols)
    with open(path, "wb") as fh:
        fh.write(gzip.compress(header + images.astype(np.uint8).tobytes(), mtime=0))
    header = struct.pack(">II", 2049, len(labels))
    with open(labels_path, "wb") as fh:
        fh.write(gzip.compress(header + labels.astype(np.uint8).tobytes(), mtime=0))


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("wheel", type=Path)
    parser.add_argument("out_dir", type=Path)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    raw = gzip.decompress(zipfile.ZipFile(args.wheel).read(MEMBER))
    table = np.loadtxt(io.BytesIO(raw), delimiter=",").astype(np.int64)
    pixels, labels = table[:, :-1], table[:, -1]
    assert pixels.shape == (5000, 784) and pixels.min() >= 0 and pixels.max() <= 255

    rng = np.random.default_rng(args.seed)
    train_idx, test_idx = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        test_idx.extend(idx[:HELD_OUT_PER_CLASS])
        train_idx.extend(idx[HELD_OUT_PER_CLASS:])
    train_idx = np.sort(np.array(train_idx))
    test_idx = np.sort(np.array(test_idx))

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train-images-idx3-ubyte.gz", pixels[train_idx],
              args.out_dir / "train-labels-idx1-ubyte.gz", labels[train_idx])
    write_idx(args.out_dir / "t10k-images-idx3-ubyte.gz", pixels[test_idx],
              args.out_dir / "t10k-labels-idx1-ubyte.gz", labels[test_idx])
    print(f"wrote {len(train_idx)} train / {len(test_idx)} held-out images to {args.out_dir}")


if __name__ == "__main__":
    main()
