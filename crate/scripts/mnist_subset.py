#!/usr/bin/env python3
"""Write the 5,000-image MNIST sample bundled with mlxtend as IDX files.

Usage: pip download mlxtend --no-deps -d /tmp/w && \
       python3 scripts/mnist_subset.py /tmp/w/mlxtend-*.whl data/mnist5k
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def main(wheel, out_prefix):
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    table = np.loadtxt(io.StringIO(raw.decode()), delimiter=",").astype(np.uint8)
    images, labels = table[:, :-1], table[:, -1]
    n = images.shape[0]
    with open(out_prefix + "-images-idx3-ubyte", "wb") as f:
        f.write(struct.pack(">IIII", 0x00000803, n, 28, 28))
        f.write(images.tobytes())
    with open(out_prefix + "-labels-idx1-ubyte", "wb") as f:
        f.write(struct.pack(">II", 0x00000801, n))
        f.write(labels.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
