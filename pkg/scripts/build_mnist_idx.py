"""Convert the per-digit JSON files of the npm ``mnist`` package into IDX files.

The npm package (https://www.npmjs.com/package/mnist, v1.1.0) ships 10000
MNIST digits as pixel intensities divided by 255 and rounded to 3 decimals;
multiplying by 255 and rounding recovers the original bytes exactly.

    npm pack mnist@1.1.0 && tar xzf mnist-1.1.0.tgz
    python scripts/build_mnist_idx.py package/src/digits data/mnist
"""
import argparse
import json
from pathlib import Path

import numpy as np

from ddc.data import write_idx


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("digits_dir", type=Path)
    ap.add_argument("out_dir", type=Path)
    args = ap.parse_args()

    images, labels = [], []
    for d in range(10):
        vals = np.asarray(json.loads((args.digits_dir / f"{d}.json").read_text())["data"], dtype=np.float64)
        if vals.size % 784:
            raise SystemExit(f"{d}.json: {vals.size} values is not a whole number of 28x28 images")
        px = np.rint(vals * 255).reshape(-1, 28, 28)
        images.append(px.astype(np.uint8))
        labels.append(np.full(len(px), d, dtype=np.uint8))
    x = np.concatenate(images)
    y = np.concatenate(labels)
    write_idx(args.out_dir / "npm-images-idx3-ubyte.gz", x)
    write_idx(args.out_dir / "npm-labels-idx1-ubyte.gz", y)
    print(f"wrote {len(x)} images; per class: {np.bincount(y).tolist()}")


if __name__ == "__main__":
    main()
