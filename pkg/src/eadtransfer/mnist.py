"""MNIST ingestion: IDX parsing, normalisation, seeded subsets and targets.

Randomness throughout the package comes from numpy's PCG64 bit generator
(a portable, documented 64-bit permuted congruential generator), seeded
either with a plain integer or with a ``SeedSequence`` derived from
``(seed, index)`` pairs so that per-example streams do not depend on
scheduling order.
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 2051
LABEL_MAGIC = 2049
NUM_CLASSES = 10

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}
MNIST_MIRRORS = (
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
)
DATA_ENV = "EADTRANSFER_DATA"


class IdxParseError(ValueError):
    """Malformed IDX payload; ``offset`` is the byte where parsing failed."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def rng(seed) -> np.random.Generator:
    """PCG64 generator for an int seed or a tuple of ints."""
    if isinstance(seed, (tuple, list)):
        seed = np.random.SeedSequence([int(s) for s in seed])
    return np.random.Generator(np.random.PCG64(seed))


def derive_seed(*parts) -> int:
    """Stable 63-bit integer seed from a tuple of ints."""
    state = np.random.SeedSequence([int(p) for p in parts]).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def parse_idx(payload: bytes) -> np.ndarray:
    """Decode an uncompressed IDX image (magic 2051) or label (2049) file.

    Returns raw ``uint8`` values: ``(n, rows, cols)`` for images, ``(n,)`` for
    labels.
    """
    buf = memoryview(payload)
    if len(buf) < 8:
        raise IdxParseError("truncated header", len(buf))
    magic = struct.unpack_from(">I", buf, 0)[0]
    if magic == IMAGE_MAGIC:
        ndim = 3
    elif magic == LABEL_MAGIC:
        ndim = 1
    else:
        raise IdxParseError(f"unknown magic number {magic:#010x}", 0)
    header = 4 + 4 * ndim
    if len(buf) < header:
        raise IdxParseError("truncated dimension header", len(buf))
    dims = struct.unpack_from(f">{ndim}I", buf, 4)
    if any(d == 0 for d in dims):
        raise IdxParseError(f"zero dimension in {dims}", 4)
    count = 1
    for d in dims:
        count *= d
        if count > 2**40:
            raise IdxParseError(f"dimensions {dims} overflow", 4)
    if len(buf) < header + count:
        raise IdxParseError(f"expected {count} data bytes, found {len(buf) - header}", len(buf))
    if len(buf) > header + count:
        raise IdxParseError("trailing bytes after payload", header + count)
    data = np.frombuffer(buf, dtype=np.uint8, count=count, offset=header).reshape(dims)
    if magic == LABEL_MAGIC and data.max(initial=0) >= NUM_CLASSES:
        bad = int(np.argmax(data >= NUM_CLASSES))
        raise IdxParseError(f"label {data[bad]} out of range", header + bad)
    return data.copy()


def encode_idx(array: np.ndarray) -> bytes:
    """Inverse of :func:`parse_idx` for uint8 image stacks or label vectors."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IMAGE_MAGIC, 1: LABEL_MAGIC}[array.ndim]
    return struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes()


def normalize(raw: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Map bytes 0..255 to [0, 1]."""
    return (np.asarray(raw, dtype=np.float64) / 255.0).astype(dtype)


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # 1 x 28 x 28, values in [0, 1]
    label: int

    def __post_init__(self):
        if not 0 <= self.label < NUM_CLASSES:
            raise ValueError(f"label {self.label} out of range")
        if self.pixels.min() < 0 or self.pixels.max() > 1:
            raise ValueError("pixels must lie in [0, 1]")


@dataclass(frozen=True)
class Dataset:
    """Normalised images ``(n, 1, 28, 28)`` and integer labels ``(n,)``."""

    images: np.ndarray
    labels: np.ndarray

    def __len__(self):
        return len(self.labels)

    def __getitem__(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]))

    def take(self, indices):
        indices = np.asarray(indices)
        return Dataset(self.images[indices], self.labels[indices])

    def digest(self):
        """SHA-256 over pixels and labels; identifies a sample set in manifests."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype=np.float32).tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype=np.int64).tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class AttackGoal:
    """Targeted (reach ``target``) or non-targeted (leave ``true_class``)."""

    true_class: int
    target: int | None = None

    def __post_init__(self):
        if self.target is not None and self.target == self.true_class:
            raise ValueError("target class must differ from the true class")

    @property
    def targeted(self):
        return self.target is not None

    @property
    def label(self):
        """Class the attack loss is computed against."""
        return self.target if self.targeted else self.true_class


def sample_subset(dataset: Dataset, n: int, seed: int) -> tuple[Dataset, np.ndarray]:
    """Draw ``n`` distinct examples without replacement; returns (subset, indices)."""
    if n > len(dataset) or n < 0:
        raise ValueError(f"cannot draw {n} samples from a dataset of {len(dataset)}")
    idx = rng(seed).permutation(len(dataset))[:n]
    return dataset.take(idx), idx


def choose_target(true_label: int, seed) -> int:
    """Uniform draw over the nine classes other than ``true_label``."""
    if not 0 <= true_label < NUM_CLASSES:
        raise ValueError(f"label {true_label} out of range")
    t = int(rng(seed).integers(NUM_CLASSES - 1))
    return t if t < true_label else t + 1


def make_goals(labels, targeted: bool, seed: int) -> list[AttackGoal]:
    """One goal per label; targets are drawn from per-index seed streams."""
    if not targeted:
        return [AttackGoal(int(y)) for y in labels]
    return [AttackGoal(int(y), choose_target(int(y), (seed, i))) for i, y in enumerate(labels)]


# ---------------------------------------------------------------------------
# files


def data_dir(path=None) -> Path:
    if path is not None:
        return Path(path)
    return Path(os.environ.get(DATA_ENV, Path.home() / ".cache" / "eadtransfer" / "mnist"))


def read_idx_file(path) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if path.suffix == ".gz":
        raw = gzip.decompress(raw)
    return parse_idx(raw)


def load_mnist(split="test", path=None) -> Dataset:
    """Load the ``train`` or ``test`` split from ``path`` (or the cache dir)."""
    root = data_dir(path)
    images = read_idx_file(_find(root, MNIST_FILES[f"{split}_images"]))
    labels = read_idx_file(_find(root, MNIST_FILES[f"{split}_labels"]))
    if len(images) != len(labels):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    return Dataset(normalize(images)[:, None], labels.astype(np.int64))


def _find(root: Path, name: str) -> Path:
    for candidate in (root / name, root / name[:-3]):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name} not found in {root}")


def file_digest(path, algorithm="sha256") -> str:
    return hashlib.new(algorithm, Path(path).read_bytes()).hexdigest()


def _algorithm_for(digest):
    return {32: "md5", 40: "sha1", 64: "sha256"}[len(digest)]


def read_manifest(path=None) -> dict[str, str]:
    """Parse ``<digest>  <filename>`` lines (md5sum/sha256sum format).

    Without a path, the bundled manifest of the published archive MD5s is used.
    """
    if path is None:
        path = Path(__file__).with_name("mnist.md5")
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        digest, name = line.split(maxsplit=1)
        out[name.lstrip("*")] = digest.lower()
    return out


def verify_files(root, manifest: dict[str, str]) -> list[str]:
    """Names whose checksum does not match; missing files count as mismatches."""
    bad = []
    for name, digest in manifest.items():
        p = Path(root) / name
        if not p.exists() or file_digest(p, _algorithm_for(digest)) != digest:
            bad.append(name)
    return bad


def fetch(root, mirrors=MNIST_MIRRORS, manifest=None, timeout=60) -> list[Path]:
    """Download missing archives into ``root``; returns the paths written.

    Fresh downloads are checked against ``manifest`` and deleted on mismatch.
    Files already present are left alone (use :func:`verify_files` for those).
    """
    import urllib.request

    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    written, downloaded = [], {}
    for name in MNIST_FILES.values():
        dest = root / name
        if not dest.exists() and not (root / name[:-3]).exists():
            last = None
            for base in mirrors:
                try:
                    with urllib.request.urlopen(base + name, timeout=timeout) as r:
                        dest.write_bytes(r.read())
                    downloaded[name] = dest
                    break
                except OSError as exc:
                    last = exc
            else:
                raise OSError(f"could not download {name}: {last}")
            written.append(dest)
    if manifest:
        bad = verify_files(root, {k: v for k, v in manifest.items() if k in downloaded})
        if bad:
            for name in bad:
                downloaded[name].unlink()
            raise ValueError(f"checksum mismatch for {', '.join(bad)}")
    return written
