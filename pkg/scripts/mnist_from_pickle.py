"""Rebuild the MNIST IDX archives from the classic ``mnist.pkl.gz`` pickle.

For machines that cannot reach the canonical mirrors.  The pickle stores
pixels as ``byte / 256`` in float32, so the original bytes are recovered
exactly; its 50k/10k train/validation split is concatenated back into the
60k training set in the original order.

    python scripts/mnist_from_pickle.py path/to/mnist.pkl.gz [out_dir]

The pickle ships inside several PyPI wheels (e.g. ``mnist-hub``); a wheel
path is accepted directly.
"""

import gzip
import pickle
import sys
import zipfile
from pathlib import Path

import numpy as np

from eadtransfer.mnist import MNIST_FILES, data_dir, encode_idx


def load_pickle(path):
    path = Path(path)
    if path.suffix == ".whl":
        with zipfile.ZipFile(path) as z:
            name = next(n for n in z.namelist() if n.endswith("mnist.pkl.gz"))
            raw = z.read(name)
    else:
        raw = path.read_bytes()
    return pickle.loads(gzip.decompress(raw), encoding="latin1")


def to_bytes(x):
    scaled = np.asarray(x, dtype=np.float64) * 256.0
    if np.abs(scaled - np.round(scaled)).max() > 0:
        raise ValueError("pixels are not multiples of 1/256")
    return np.round(scaled).astype(np.uint8).reshape(-1, 28, 28)


def main(argv):
    (train, valid, test) = load_pickle(argv[1])
    out = data_dir(argv[2] if len(argv) > 2 else None)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {
        "train_images": to_bytes(np.concatenate([train[0], valid[0]])),
        "train_labels": np.concatenate([train[1], valid[1]]).astype(np.uint8),
        "test_images": to_bytes(test[0]),
        "test_labels": np.asarray(test[1], dtype=np.uint8),
    }
    for key, arr in arrays.items():
        dest = out / MNIST_FILES[key]
        dest.write_bytes(gzip.compress(encode_idx(arr), mtime=0))
        print(f"wrote {dest} {arr.shape}")


if __name__ == "__main__":
    main(sys.argv)
