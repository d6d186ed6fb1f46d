"""Dataset ingestion: IRIS from CSV, the MNIST subset from IDX files."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

DATA_DIR = Path(__file__).parent / "data"

# IDX type codes -> numpy dtype (big-endian on disk)
_IDX_TYPES = {
    0x08: np.dtype(np.uint8),
    0x09: np.dtype(np.int8),
    0x0B: np.dtype(">i2"),
    0x0C: np.dtype(">i4"),
    0x0D: np.dtype(">f4"),
    0x0E: np.dtype(">f8"),
}
_IDX_CODES = {v: k for k, v in _IDX_TYPES.items()}


@dataclass
class Dataset:
    """Plaintext features and integer labels, split into train and test."""

    name: str
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray

    @property
    def n_classes(self) -> int:
        return int(max(self.y_train.max(), self.y_test.max())) + 1

    @property
    def dim(self) -> int:
        return self.x_train.shape[1]


def _open(path: Path):
    return gzip.open(path, "rb") if str(path).endswith(".gz") else open(path, "rb")


def read_idx(path: str | Path) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[0] != 0 or buf[1] != 0:
        raise ValueError(f"{path}: not an IDX file")
    dtype = _IDX_TYPES.get(buf[2])
    if dtype is None:
        raise ValueError(f"{path}: unknown IDX type code {buf[2]:#x}")
    ndim = buf[3]
    shape = struct.unpack(f">{ndim}I", buf[4:4 + 4 * ndim])
    data = np.frombuffer(buf, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(shape)):
        raise ValueError(f"{path}: expected {np.prod(shape)} items, found {data.size}")
    return data.reshape(shape).astype(dtype.newbyteorder("="))


def write_idx(path: str | Path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder(">")
    code = _IDX_CODES[dt]
    header = bytes([0, 0, code, array.ndim]) + struct.pack(f">{array.ndim}I", *array.shape)
    payload = header + array.astype(dt).tobytes()
    path = Path(path)
    if str(path).endswith(".gz"):
        # mtime=0 keeps the file bytes reproducible
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0) as fh:
            fh.write(payload)
    else:
        path.write_bytes(payload)


def stratified_split(y: np.ndarray, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; returns sorted (train_idx, test_idx)."""
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        rng.shuffle(idx)
        n_test = int(round(len(idx) * test_fraction))
        test.extend(idx[:n_test])
        train.extend(idx[n_test:])
    return np.sort(np.array(train)), np.sort(np.array(test))


def load_iris(path: str | Path | None = None, test_fraction: float = 0.1, seed: int = 0) -> Dataset:
    """IRIS: 4 features in centimetres, 3 classes, 150 rows, 90/10 stratified split."""
    path = Path(path) if path else DATA_DIR / "iris.csv"
    if not path.exists():
        raise FileNotFoundError(path)
    with path.open(newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    header, rows = rows[0], rows[1:]
    if len(header) != 5:
        raise ValueError(f"{path}: expected 4 feature columns and a label column")
    names = sorted({r[4] for r in rows})
    x = np.array([[float(v) for v in r[:4]] for r in rows])
    y = np.array([names.index(r[4]) for r in rows], dtype=np.int64)
    tr, te = stratified_split(y, test_fraction, seed)
    return Dataset("iris", x[tr], y[tr], x[te], y[te])


def pool_images(images: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool square images by `factor` and flatten, keeping the 0..255 range."""
    n, h, w = images.shape
    if h % factor or w % factor:
        raise ValueError(f"image size {h}x{w} not divisible by {factor}")
    blocks = images.reshape(n, h // factor, factor, w // factor, factor).astype(np.float64)
    return blocks.mean(axis=(2, 4)).reshape(n, -1)


def load_mnist_subset(directory: str | Path | None = None, pool: int = 2) -> Dataset:
    """The bundled 2000-train/500-test stratified MNIST subset.

    Pixels are returned in [0, 1]. With ``pool=2`` images are reduced to
    14x14 (196 features) so that the SML weight pattern, which repeats every
    256 weights, never ties two pixels of one image together.
    """
    directory = Path(directory) if directory else DATA_DIR / "mnist-subset"
    parts = {}
    for split in ("train", "t10k"):
        for kind in ("images-idx3", "labels-idx1"):
            stem = f"{split}-{kind}-ubyte"
            candidates = [directory / f"{stem}.gz", directory / stem]
            found = next((c for c in candidates if c.exists()), None)
            if found is None:
                raise FileNotFoundError(candidates[0])
            parts[split, kind[:6]] = read_idx(found)
    out = []
    for split in ("train", "t10k"):
        images = parts[split, "images"]
        x = pool_images(images, pool) if pool > 1 else images.reshape(len(images), -1).astype(np.float64)
        out += [x / 255.0, parts[split, "labels"].astype(np.int64)]
    return Dataset("mnist-subset", *out)


def load_dataset(name: str, path: str | Path | None = None, seed: int = 0) -> Dataset:
    if name == "iris":
        return load_iris(path, seed=seed)
    if name in ("mnist", "mnist-subset"):
        return load_mnist_subset(path)
    raise ValueError(f"unknown dataset {name!r}")
