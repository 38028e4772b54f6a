#!/usr/bin/env python3
"""Fetch a 10k-sample MNIST subset and write canonical IDX archives.

The full 60k archives are not reachable from this environment, so the digits
are pulled from the npm "mnist" package (real MNIST images, ~1000 per class,
28x28, stored as [0,1] floats) and re-encoded as idx3-ubyte/idx1-ubyte files
under data/mnist/. Split: per class, the first 85% of samples become train,
the rest test. Deterministic: fixed permutation seed, no RNG beyond numpy's
seeded shuffle.

Usage: python3 scripts/fetch_mnist.py [--tarball mnist-1.1.0.tgz] [--out data/mnist]
"""

import argparse
import json
import pathlib
import struct
import subprocess
import sys
import tarfile
import tempfile

import numpy as np

TRAIN_FRACTION = 0.85


def load_digits_from_tarball(tarball: pathlib.Path):
    images, labels = [], []
    with tarfile.open(tarball, "r:gz") as tf:
        for digit in range(10):
            member = tf.getmember(f"package/src/digits/{digit}.json")
            data = json.load(tf.extractfile(member))["data"]
            arr = np.asarray(data, dtype=np.float64).reshape(-1, 784)
            images.append(np.round(arr * 255.0).astype(np.uint8))
            labels.append(np.full(arr.shape[0], digit, dtype=np.uint8))
    return images, labels


def write_idx_images(path: pathlib.Path, imgs: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, imgs.shape[0], 28, 28))
        f.write(imgs.tobytes())


def write_idx_labels(path: pathlib.Path, labels: np.ndarray):
    with open(path, "wb") as f:
        f.write(struct.pack(">II", 0x801, labels.shape[0]))
        f.write(labels.tobytes())


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--tarball", default=None, help="pre-downloaded mnist npm tarball")
    ap.add_argument("--out", default="data/mnist")
    args = ap.parse_args()

    out = pathlib.Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.tarball:
        tarball = pathlib.Path(args.tarball)
    else:
        tmp = tempfile.mkdtemp()
        subprocess.run(["npm", "pack", "mnist@1.1.0"], cwd=tmp, check=True,
                       capture_output=True)
        tarball = next(pathlib.Path(tmp).glob("mnist-*.tgz"))

    images, labels = load_digits_from_tarball(tarball)

    train_x, train_y, test_x, test_y = [], [], [], []
    for imgs, labs in zip(images, labels):
        cut = int(len(imgs) * TRAIN_FRACTION)
        train_x.append(imgs[:cut])
        train_y.append(labs[:cut])
        test_x.append(imgs[cut:])
        test_y.append(labs[cut:])

    rng = np.random.RandomState(0)
    tx, ty = np.concatenate(train_x), np.concatenate(train_y)
    perm = rng.permutation(len(tx))
    tx, ty = tx[perm], ty[perm]
    sx, sy = np.concatenate(test_x), np.concatenate(test_y)
    perm = rng.permutation(len(sx))
    sx, sy = sx[perm], sy[perm]

    write_idx_images(out / "train-images-idx3-ubyte", tx)
    write_idx_labels(out / "train-labels-idx1-ubyte", ty)
    write_idx_images(out / "t10k-images-idx3-ubyte", sx)
    write_idx_labels(out / "t10k-labels-idx1-ubyte", sy)
    print(f"wrote {len(tx)} train / {len(sx)} test samples to {out}", file=sys.stderr)


if __name__ == "__main__":
    main()
