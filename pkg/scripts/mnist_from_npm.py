"""Rebuild MNIST IDX files from the digit JSON shipped in the npm ``mnist`` package.

The package stores 10,000 MNIST digits as pixel/255 rounded to three decimals,
which identifies every byte uniquely. Digits are shuffled with a fixed seed
and split 5000/5000 into ``train-*`` and ``t10k-*`` files.

    npm pack mnist && tar xzf mnist-1.1.0.tgz
    python scripts/mnist_from_npm.py package/src/digits data/mnist
"""
import json
import sys
from pathlib import Path

import numpy as np

from countvae.data import write_idx


def main(digits_dir: str, out_dir: str, n_train: int = 5000, seed: int = 20240611) -> None:
    images, labels = [], []
    for d in range(10):
        flat = np.asarray(json.loads((Path(digits_dir) / f"{d}.json").read_text())["data"])
        pix = flat.reshape(-1, 784)
        as_bytes = np.rint(pix * 255.0)
        if np.max(np.abs(np.round(as_bytes / 255.0, 3) - pix)) > 1e-9:
            raise SystemExit(f"digit {d}: values do not map back to bytes")
        images.append(as_bytes.astype(np.uint8))
        labels.append(np.full(len(pix), d, dtype=np.uint8))
    images, labels = np.concatenate(images), np.concatenate(labels)
    order = np.random.default_rng(seed).permutation(len(labels))
    images, labels = images[order].reshape(-1, 28, 28), labels[order]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for prefix, sl in (("train", slice(0, n_train)), ("t10k", slice(n_train, None))):
        write_idx(out / f"{prefix}-images-idx3-ubyte.gz", images[sl])
        write_idx(out / f"{prefix}-labels-idx1-ubyte.gz", labels[sl])
    print(f"wrote {n_train} train / {len(labels) - n_train} test digits to {out}")


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
