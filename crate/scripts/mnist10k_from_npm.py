#!/usr/bin/env python3
"""Build a 10k-digit MNIST subset in IDX format from the `mnist` npm package.

The npm package (https://www.npmjs.com/package/mnist) ships 10,000 MNIST
digits as JSON pixel arrays scaled to [0, 1] with three decimals. This script
restores the original bytes, shuffles with a fixed seed, and writes an
8000/2000 train/test split using the standard MNIST file names:

    <out>/train-images-idx3-ubyte.gz   <out>/train-labels-idx1-ubyte.gz
    <out>/t10k-images-idx3-ubyte.gz    <out>/t10k-labels-idx1-ubyte.gz

Usage:
    npm pack mnist && tar xzf mnist-*.tgz
    python3 scripts/mnist10k_from_npm.py package/src/digits data/mnist10k
"""
import gzip
import json
import os
import random
import struct
import sys

N_TRAIN = 8000
SEED = 20190123


def load_digits(digits_dir):
    samples = []
    for label in range(10):
        with open(os.path.join(digits_dir, f"{label}.json")) as fh:
            flat = json.load(fh)["data"]
        assert len(flat) % 784 == 0, f"{label}.json: length {len(flat)} not a multiple of 784"
        for i in range(0, len(flat), 784):
            pixels = bytes(min(255, max(0, round(v * 255))) for v in flat[i : i + 784])
            samples.append((pixels, label))
    return samples


def write_split(out_dir, prefix, samples):
    images = struct.pack(">IIII", 2051, len(samples), 28, 28) + b"".join(p for p, _ in samples)
    labels = struct.pack(">II", 2049, len(samples)) + bytes(l for _, l in samples)
    with gzip.GzipFile(os.path.join(out_dir, f"{prefix}-images-idx3-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(images)
    with gzip.GzipFile(os.path.join(out_dir, f"{prefix}-labels-idx1-ubyte.gz"), "wb", mtime=0) as fh:
        fh.write(labels)


def main():
    if len(sys.argv) != 3:
        sys.exit(__doc__)
    digits_dir, out_dir = sys.argv[1], sys.argv[2]
    samples = load_digits(digits_dir)
    random.Random(SEED).shuffle(samples)
    os.makedirs(out_dir, exist_ok=True)
    write_split(out_dir, "train", samples[:N_TRAIN])
    write_split(out_dir, "t10k", samples[N_TRAIN:])
    print(f"wrote {N_TRAIN} train / {len(samples) - N_TRAIN} test digits to {out_dir}")


if __name__ == "__main__":
    main()
