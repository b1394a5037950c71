#!/usr/bin/env python3
"""Build the bundled MNIST subset (IDX format) from the npm `mnist` package.

The npm package `mnist` (v1.1.0, MIT license) ships 10,000 MNIST digits as
per-class JSON arrays of pixel intensities in [0,1], rounded to 3 decimals.
Pixels are restored to their original bytes with round(v * 255), the samples
are interleaved with a fixed seed, and written as two IDX splits:

    train: 6000 images   test: 4000 images

Usage:
    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python3 tools/mnist_subset_from_npm.py package/src/digits data/mnist
"""
import json
import random
import struct
import sys
from pathlib import Path


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 2051, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 2049, len(labels)))
        f.write(bytes(labels))


def main():
    digits_dir, out_dir = Path(sys.argv[1]), Path(sys.argv[2])
    samples = []
    for digit in range(10):
        flat = json.loads((digits_dir / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for i in range(0, len(flat), 784):
            pixels = [min(255, max(0, round(v * 255))) for v in flat[i:i + 784]]
            samples.append((pixels, digit))
    random.Random(20240611).shuffle(samples)
    train, test = samples[:6000], samples[6000:]
    out_dir.mkdir(parents=True, exist_ok=True)
    write_images(out_dir / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(out_dir / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(out_dir / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(out_dir / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"wrote {len(train)} train / {len(test)} test samples to {out_dir}")


if __name__ == "__main__":
    main()
