"""Desk-scale datasets with deterministic train/val/test splits in [0, 1].

``mnist-subset`` reads ``$ATFS_DATA_DIR/mnist.npz`` (keras layout:
``x_train, y_train, x_test, y_test``) when present and otherwise falls back
to the 5000-image MNIST sample bundled with ``mlxtend``.  ``cifar10-subset``
needs ``$ATFS_DATA_DIR/cifar10.npz`` (same layout) or the python batches in
``$ATFS_DATA_DIR/cifar-10-batches-py``; nothing is downloaded.
"""
from __future__ import annotations

import functools
import hashlib
import logging
import os
import pickle
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

logger = logging.getLogger(__name__)

DATASETS = ("synthetic-gaussians", "synthetic-moons", "mnist-subset", "cifar10-subset")
DATA_DIR_ENV = "ATFS_DATA_DIR"


class DataError(RuntimeError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    name: str = "synthetic-gaussians"
    train: int = 200
    val: int = 50
    test: int = 50
    num_classes: int = 2
    dim: int = 2  # synthetic-gaussians only
    noise: float = 0.1  # synthetic sets only
    seed: int = 0

    def __post_init__(self):
        if self.name not in DATASETS:
            raise ValueError(f"unknown dataset {self.name!r}, expected one of {DATASETS}")
        if min(self.train, self.val, self.test) < 1:
            raise ValueError("split sizes must be >= 1")
        if self.name == "synthetic-moons" and self.num_classes != 2:
            raise ValueError("synthetic-moons has exactly 2 classes")
        if self.name in ("mnist-subset", "cifar10-subset") and self.num_classes != 10:
            raise ValueError(f"{self.name} has 10 classes")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")


@dataclass
class Split:
    x: torch.Tensor
    y: torch.Tensor
    index: np.ndarray  # row ids into the source pool

    def __len__(self):
        return len(self.y)

    def histogram(self, num_classes: int) -> list[int]:
        return np.bincount(self.y.numpy(), minlength=num_classes).tolist()


@dataclass
class Splits:
    train: Split
    val: Split
    test: Split
    num_classes: int
    input_shape: tuple

    def checksum(self) -> str:
        h = hashlib.sha256()
        for s in (self.train, self.val, self.test):
            h.update(s.x.numpy().tobytes())
            h.update(s.y.numpy().tobytes())
        return h.hexdigest()

    def histograms(self) -> dict[str, list[int]]:
        return {name: getattr(self, name).histogram(self.num_classes) for name in ("train", "val", "test")}


def data_dir() -> Path | None:
    value = os.environ.get(DATA_DIR_ENV)
    return Path(value) if value else None


def _gaussians(spec: DatasetSpec, total: int, rng: np.random.Generator):
    means = rng.uniform(0.2, 0.8, size=(spec.num_classes, spec.dim))
    y = np.arange(total) % spec.num_classes
    x = means[y] + spec.noise * rng.standard_normal((total, spec.dim))
    return np.clip(x, 0.0, 1.0), y, (spec.dim,)


def _moons(spec: DatasetSpec, total: int, rng: np.random.Generator):
    from sklearn.datasets import make_moons
    x, y = make_moons(total, noise=spec.noise, random_state=int(rng.integers(2**31)))
    # raw moons live roughly in [-1.5, 2.5] x [-1, 1.5]
    x = (x - np.array([-1.5, -1.0])) / np.array([4.0, 2.5])
    return np.clip(x, 0.0, 1.0), y, (2,)


def _load_npz_pool(path: Path):
    with np.load(path) as f:
        x = np.concatenate([f["x_train"], f["x_test"]])
        y = np.concatenate([f["y_train"], f["y_test"]]).reshape(-1)
    return x, y


def _mnist_pool():
    return _mnist_from(data_dir())


@functools.lru_cache(maxsize=2)
def _mnist_from(root: Path | None):
    if root is not None and (root / "mnist.npz").exists():
        x, y = _load_npz_pool(root / "mnist.npz")
    else:
        try:
            from mlxtend.data import mnist_data
        except ImportError as e:  # pragma: no cover
            raise DataError(f"no MNIST source: set {DATA_DIR_ENV} to a dir with mnist.npz "
                            "or install mlxtend") from e
        x, y = mnist_data()
    x = np.asarray(x, dtype=np.float32).reshape(-1, 1, 28, 28) / 255.0
    y = np.asarray(y, dtype=np.int64)
    x.setflags(write=False)  # shared through the cache
    y.setflags(write=False)
    return x, y, (1, 28, 28)


def _cifar_pool():
    root = data_dir()
    if root is None:
        raise DataError(f"cifar10-subset needs {DATA_DIR_ENV} pointing at cifar10.npz or cifar-10-batches-py")
    if (root / "cifar10.npz").exists():
        x, y = _load_npz_pool(root / "cifar10.npz")
        if x.shape[-1] == 3:
            x = x.transpose(0, 3, 1, 2)
    elif (root / "cifar-10-batches-py").is_dir():
        xs, ys = [], []
        names = [f"data_batch_{i}" for i in range(1, 6)] + ["test_batch"]
        for name in names:
            with open(root / "cifar-10-batches-py" / name, "rb") as fh:
                d = pickle.load(fh, encoding="bytes")
            xs.append(np.asarray(d[b"data"]).reshape(-1, 3, 32, 32))
            ys.append(np.asarray(d[b"labels"]))
        x, y = np.concatenate(xs), np.concatenate(ys)
    else:
        raise DataError(f"no CIFAR10 files under {root}")
    x = np.asarray(x, dtype=np.float32) / 255.0
    return x, np.asarray(y, dtype=np.int64), (3, 32, 32)


def load_dataset(spec: DatasetSpec) -> Splits:
    total = spec.train + spec.val + spec.test
    rng = np.random.default_rng(spec.seed)
    if spec.name == "synthetic-gaussians":
        x, y, shape = _gaussians(spec, total, rng)
    elif spec.name == "synthetic-moons":
        x, y, shape = _moons(spec, total, rng)
    elif spec.name == "mnist-subset":
        x, y, shape = _mnist_pool()
    else:
        x, y, shape = _cifar_pool()
    if total > len(y):
        raise DataError(f"{spec.name}: requested {total} samples but the source has {len(y)}")

    order = rng.permutation(len(y))[:total]
    cuts = np.cumsum([spec.train, spec.val])
    parts = np.split(order, cuts)
    splits = []
    for name, idx in zip(("train", "val", "test"), parts):
        counts = np.bincount(y[idx], minlength=spec.num_classes)
        if counts.min() < 1:
            raise DataError(f"{spec.name}: {name} split of size {len(idx)} misses a class; enlarge it")
        splits.append(Split(torch.as_tensor(x[idx], dtype=torch.float32),
                            torch.as_tensor(y[idx], dtype=torch.int64), idx))
    out = Splits(*splits, num_classes=spec.num_classes, input_shape=tuple(shape))
    logger.info("loaded %s: %s", spec.name, out.histograms())
    return out
