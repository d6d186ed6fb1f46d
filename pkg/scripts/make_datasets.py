"""Regenerate the bundled dataset files under src/pole/data/.

IRIS comes from the copy shipped with scikit-learn. The MNIST subset is a
stratified 2000/500 draw from the 5000-image MNIST sample bundled in the
mlxtend wheel (500 images per digit), written out in IDX format.

    python scripts/make_datasets.py --mlxtend-wheel path/to/mlxtend.whl
"""
from __future__ import annotations

import argparse
import csv
import gzip
import io
import zipfile
from pathlib import Path

import numpy as np

from pole.datasets import write_idx

DATA = Path(__file__).resolve().parents[1] / "src" / "pole" / "data"
SPECIES = ["setosa", "versicolor", "virginica"]


def make_iris() -> None:
    import sklearn.datasets

    src = Path(sklearn.datasets.__file__).parent / "data" / "iris.csv"
    rows = list(csv.reader(src.open()))[1:]
    with (DATA / "iris.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sepal_length", "sepal_width", "petal_length", "petal_width", "species"])
        for r in rows:
            w.writerow(r[:4] + [SPECIES[int(r[4])]])


def make_mnist_subset(wheel: Path, n_train: int = 200, n_test: int = 50, seed: int = 0) -> None:
    with zipfile.ZipFile(wheel) as z:
        raw = gzip.decompress(z.read("mlxtend/data/data/mnist_5k.csv.gz"))
    a = np.loadtxt(io.StringIO(raw.decode()), delimiter=",").astype(np.uint8)
    images, labels = a[:, :-1].reshape(-1, 28, 28), a[:, -1]
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in range(10):
        idx = np.flatnonzero(labels == c)
        rng.shuffle(idx)
        train.extend(idx[:n_train])
        test.extend(idx[n_train:n_train + n_test])
    out = DATA / "mnist-subset"
    out.mkdir(exist_ok=True)
    for name, idx in (("train", np.sort(train)), ("t10k", np.sort(test))):
        write_idx(out / f"{name}-images-idx3-ubyte.gz", images[idx])
        write_idx(out / f"{name}-labels-idx1-ubyte.gz", labels[idx])


if __name__ == "__main__":
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--mlxtend-wheel", type=Path, required=True)
    args = ap.parse_args()
    make_iris()
    make_mnist_subset(args.mlxtend_wheel)
