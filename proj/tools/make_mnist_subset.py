#!/usr/bin/env python3
"""Builds the bundled desk-scale MNIST subset as IDX files.

Source: the digits shipped in the `mnist` npm package (10,000 MNIST digits,
grayscale, stored as per-digit JSON arrays of pixel/255 values rounded to three
decimals; rounding back to bytes is exact). A seeded shuffle selects disjoint
train and test subsets.

    npm install mnist
    python3 tools/make_mnist_subset.py node_modules/mnist/src/digits data/mnist
"""

import argparse
import json
import pathlib
import random
import struct


def load_digits(src: pathlib.Path):
    samples = []
    for digit in range(10):
        flat = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(flat) % 784 == 0
        for k in range(len(flat) // 784):
            pixels = bytes(round(v * 255) for v in flat[k * 784:(k + 1) * 784])
            samples.append((pixels, digit))
    return samples


def write_idx(prefix: pathlib.Path, samples):
    with open(f"{prefix}-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(samples), 28, 28))
        for pixels, _ in samples:
            f.write(pixels)
    with open(f"{prefix}-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, len(samples)))
        f.write(bytes(label for _, label in samples))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("digits_dir", type=pathlib.Path)
    ap.add_argument("out_dir", type=pathlib.Path)
    ap.add_argument("--n-train", type=int, default=2000)
    ap.add_argument("--n-test", type=int, default=1000)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    samples = load_digits(args.digits_dir)
    random.Random(args.seed).shuffle(samples)
    assert args.n_train + args.n_test <= len(samples)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_idx(args.out_dir / "train", samples[:args.n_train])
    write_idx(args.out_dir / "test", samples[args.n_train:args.n_train + args.n_test])


if __name__ == "__main__":
    main()
