#!/usr/bin/env python3
"""Writes the 8x8 digits set as IDX files: 1000 training rows, the rest eval.

Pixel values 0..16 are rescaled to 0..255. Rows are shuffled with a fixed
seed so both splits cover every class.
"""
import argparse
import pathlib
import struct

import numpy as np
from sklearn.datasets import load_digits


def write_images(path, images):
    n, h, w = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, h, w))
        f.write(images.astype(np.uint8).tobytes())


def write_labels(path, labels):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(labels.astype(np.uint8).tobytes())


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out_dir", type=pathlib.Path)
    parser.add_argument("--train", type=int, default=1000)
    args = parser.parse_args()

    digits = load_digits()
    images = np.rint(digits.images * 255.0 / 16.0)
    order = np.random.default_rng(0).permutation(len(images))
    images, labels = images[order], digits.target[order]

    args.out_dir.mkdir(parents=True, exist_ok=True)
    t = args.train
    write_images(args.out_dir / "digits-train-images.idx", images[:t])
    write_labels(args.out_dir / "digits-train-labels.idx", labels[:t])
    write_images(args.out_dir / "digits-eval-images.idx", images[t:])
    write_labels(args.out_dir / "digits-eval-labels.idx", labels[t:])


if __name__ == "__main__":
    main()
