#!/usr/bin/env python3
"""Rebuild the bundled MNIST subset as gzipped IDX files.

Source: the 10,000 MNIST digits shipped in the npm package `mnist@1.1.0`
(`npm pack mnist@1.1.0`). Pixels there are stored as byte/255 rounded to
three decimals, so round(v * 255) recovers the original bytes exactly.

Per digit, samples with index % 10 < 7 go to the train split and the rest
to the test split. Each split is then shuffled with a fixed seed.

Usage: build_mnist_subset.py <path/to/package/src/digits> <out_dir>
"""
import gzip
import json
import random
import struct
import sys
from pathlib import Path


def write_idx(path, magic, dims, payload):
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in dims)
    with gzip.GzipFile(path, "wb", mtime=0) as f:
        f.write(header + payload)


def main():
    src, out = Path(sys.argv[1]), Path(sys.argv[2])
    out.mkdir(parents=True, exist_ok=True)
    splits = {"train": [], "t10k": []}
    for digit in range(10):
        data = json.loads((src / f"{digit}.json").read_text())["data"]
        assert len(data) % 784 == 0
        for i in range(len(data) // 784):
            px = bytes(int(round(v * 255)) for v in data[i * 784:(i + 1) * 784])
            splits["train" if i % 10 < 7 else "t10k"].append((px, digit))
    rng = random.Random(20230601)
    for name, samples in splits.items():
        rng.shuffle(samples)
        n = len(samples)
        write_idx(out / f"{name}-images-idx3-ubyte.gz", 0x803, (n, 28, 28),
                  b"".join(p for p, _ in samples))
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", 0x801, (n,),
                  bytes(l for _, l in samples))
        print(name, n)


if __name__ == "__main__":
    main()
