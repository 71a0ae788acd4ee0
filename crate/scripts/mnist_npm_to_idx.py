#!/usr/bin/env python3
"""Convert the digit JSON files shipped in the npm `mnist` package into IDX files.

Usage: mnist_npm_to_idx.py PACKAGE_DIR OUT_DIR [--test N]

PACKAGE_DIR is the unpacked package (the one holding src/digits/0.json ...).
Images are shuffled with a fixed seed, the last N become the t10k files.
"""
import argparse
import json
import random
import struct
from pathlib import Path


def write_images(path, images):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, len(images), 28, 28))
        for img in images:
            f.write(bytes(img))


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, len(labels)))
        f.write(bytes(labels))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("package_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    ap.add_argument("--test", type=int, default=2000)
    args = ap.parse_args()

    samples = []
    for digit in range(10):
        data = json.loads((args.package_dir / "src" / "digits" / f"{digit}.json").read_text())["data"]
        for start in range(0, len(data) - 783, 784):
            pixels = [min(255, max(0, round(v * 255))) for v in data[start : start + 784]]
            samples.append((pixels, digit))
    random.Random(0).shuffle(samples)
    train, test = samples[: -args.test], samples[-args.test :]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    write_images(args.out_dir / "train-images-idx3-ubyte", [s[0] for s in train])
    write_labels(args.out_dir / "train-labels-idx1-ubyte", [s[1] for s in train])
    write_images(args.out_dir / "t10k-images-idx3-ubyte", [s[0] for s in test])
    write_labels(args.out_dir / "t10k-labels-idx1-ubyte", [s[1] for s in test])
    print(f"{len(train)} train, {len(test)} test -> {args.out_dir}")


if __name__ == "__main__":
    main()
