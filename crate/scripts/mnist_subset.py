#!/usr/bin/env python3
"""Convert the 10k-digit MNIST subset shipped in the npm `mnist` package to IDX.

Usage: npm pack mnist && tar xzf mnist-*.tgz && python3 scripts/mnist_subset.py package/src/digits data/mnist-subset

Each class file is split 80/20 into train/test, then both splits are shuffled
with a fixed seed. Output files are gzip-compressed IDX.
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(struct.pack(">I", magic))
        for d in dims:
            f.write(struct.pack(">I", d))
        f.write(payload)


def main(src, dst):
    src, dst = Path(src), Path(dst)
    dst.mkdir(parents=True, exist_ok=True)
    train, test = [], []
    for label in range(10):
        data = json.loads((src / f"{label}.json").read_text())["data"]
        images = [data[i * 784:(i + 1) * 784] for i in range(len(data) // 784)]
        cut = int(round(0.8 * len(images)))
        train += [(img, label) for img in images[:cut]]
        test += [(img, label) for img in images[cut:]]
    rng = random.Random(20240601)
    for name, split in (("train", train), ("t10k", test)):
        rng.shuffle(split)
        pixels = bytes(min(255, max(0, round(v * 255))) for img, _ in split for v in img)
        labels = bytes(label for _, label in split)
        write_idx(dst / f"{name}-images-idx3-ubyte.gz", 0x803, (len(split), 28, 28), pixels)
        write_idx(dst / f"{name}-labels-idx1-ubyte.gz", 0x801, (len(split),), labels)
        print(name, len(split))


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
