#!/usr/bin/env python3
"""Build the gzipped IDX fixtures under data/ from redistributable sources.

MNIST: the 5,000-image subset shipped inside the mlxtend wheel
(`pip download --no-deps mlxtend`), 500 images per class.
Fashion-MNIST: the per-class JSON arrays in the `fashion-mnist` npm package
(`npm pack fashion-mnist`), 7,000 images per class.

Usage: make_fixtures.py MLXTEND_WHEEL FASHION_NPM_DIR OUT_DIR
"""
import gzip
import json
import os
import random
import struct
import sys
import zipfile


def write_idx_images(path, images, rows=28, cols=28):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">IIII", 0x00000803, len(images), rows, cols))
        for img in images:
            f.write(bytes(img))


def write_idx_labels(path, labels):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">II", 0x00000801, len(labels)))
        f.write(bytes(labels))


def emit(out_dir, name, train, test):
    d = os.path.join(out_dir, name)
    os.makedirs(d, exist_ok=True)
    for split, samples in (("train", train), ("t10k", test)):
        write_idx_images(os.path.join(d, f"{split}-images-idx3-ubyte.gz"), [s[0] for s in samples])
        write_idx_labels(os.path.join(d, f"{split}-labels-idx1-ubyte.gz"), [s[1] for s in samples])


def main():
    wheel, fashion_dir, out_dir = sys.argv[1:4]
    rng = random.Random(20200711)

    z = zipfile.ZipFile(wheel)
    csv = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz")).decode()
    mnist = []
    for line in csv.strip().split("\n"):
        vals = [int(float(v)) for v in line.split(",")]
        mnist.append((vals[:-1], vals[-1]))
    rng.shuffle(mnist)
    emit(out_dir, "mnist-5k", mnist[:4000], mnist[4000:])
    emit(out_dir, "fixture-200", mnist[:200], mnist[4000:4100])

    # Within each class file the first 6,000 rows are training images and the
    # last 1,000 are test images.
    train, test = [], []
    for label in range(10):
        with open(os.path.join(fashion_dir, "src", "clothes", f"{label}.json")) as f:
            rows = [r for r in json.load(f)["data"] if len(r) == 784]
        train += [(r, label) for r in rows[:600]]
        test += [(r, label) for r in rows[6000:6100]]
    rng.shuffle(train)
    rng.shuffle(test)
    emit(out_dir, "fashion-7k", train, test)


if __name__ == "__main__":
    main()
