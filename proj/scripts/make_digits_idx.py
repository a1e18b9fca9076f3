#!/usr/bin/env python3
"""Build a small MNIST-style digit corpus in IDX format.

Uses scikit-learn's bundled 8x8 handwritten-digit scans (1797 samples,
10 classes), upscaled to 28x28 so the toolkit's RotMNIST pipeline and
model architectures apply unchanged. Output:

    data/digits-images-idx3-ubyte
    data/digits-labels-idx1-ubyte
"""

import pathlib
import struct

import numpy as np
from PIL import Image
from sklearn.datasets import load_digits


def main() -> None:
    out_dir = pathlib.Path(__file__).resolve().parent.parent / "data"
    out_dir.mkdir(exist_ok=True)

    digits = load_digits()
    n = digits.images.shape[0]
    up = np.zeros((n, 28, 28), dtype=np.uint8)
    for i, img in enumerate(digits.images):
        # 0..16 -> 0..255, bicubic upscale to 28x28
        small = np.clip(img / 16.0 * 255.0, 0, 255).astype(np.uint8)
        big = Image.fromarray(small, mode="L").resize((28, 28), Image.BICUBIC)
        up[i] = np.asarray(big, dtype=np.uint8)

    with open(out_dir / "digits-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, 28, 28))
        f.write(up.tobytes())
    with open(out_dir / "digits-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(digits.target.astype(np.uint8).tobytes())
    print(f"wrote {n} 28x28 images to {out_dir}")


if __name__ == "__main__":
    main()
