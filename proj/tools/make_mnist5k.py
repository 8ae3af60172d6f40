"""Rebuild data/mnist5k-*-idx*-ubyte.gz from the 5000-image MNIST subset bundled in mlxtend.

    pip download --no-deps mlxtend==0.24.0 -d /tmp
    python tools/make_mnist5k.py /tmp/mlxtend-0.24.0-py3-none-any.whl data

The CSV holds 784 pixel columns followed by the label, 500 images per class.
Gzip mtime is pinned to 0 so the output is byte-stable.
"""
import gzip
import io
import struct
import sys
import zipfile

import numpy as np


def write_gz(path, payload):
    with gzip.GzipFile(path, "wb", mtime=0) as gz:
        gz.write(payload)


def main(wheel, out_dir):
    with zipfile.ZipFile(wheel) as z:
        csv = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    a = np.loadtxt(io.BytesIO(csv), delimiter=",", dtype=np.int64)
    x = a[:, :-1].astype(np.uint8)
    y = a[:, -1].astype(np.uint8)
    assert x.shape == (5000, 784) and y.max() == 9
    n = len(y)
    write_gz(f"{out_dir}/mnist5k-images-idx3-ubyte.gz", struct.pack(">IIII", 0x803, n, 28, 28) + x.tobytes())
    write_gz(f"{out_dir}/mnist5k-labels-idx1-ubyte.gz", struct.pack(">II", 0x801, n) + y.tobytes())


if __name__ == "__main__":
    main(sys.argv[1], sys.argv[2])
