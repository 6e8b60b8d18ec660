"""Datasets: built-in synthetic tasks and the ``NRA1`` binary container."""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError

MAGIC = b"NRA1"


@dataclass
class Dataset:
    x: np.ndarray  # (N, F) float64
    y: np.ndarray  # (N,) int
    classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.ascontiguousarray(self.x, dtype=np.float64)
        self.y = np.ascontiguousarray(self.y, dtype=np.int64)
        if self.x.ndim != 2 or self.y.shape != (self.x.shape[0],):
            raise ContractError(f"dataset shapes disagree: x {self.x.shape}, y {self.y.shape}")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.classes):
            raise ContractError("labels must lie in [0, classes)")

    def __len__(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<III", len(self), self.dim, self.classes))
        h.update(self.x.astype("<f8").tobytes())
        h.update(self.y.astype("<u4").tobytes())
        return h.hexdigest()[:16]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.classes, self.name)


# -- NRA1 files ---------------------------------------------------------------


def write_dataset(path, ds: Dataset) -> None:
    """Write ``ds`` atomically: magic, u32 N, u32 F, u32 K, f64 features, u32 labels."""
    path = Path(path)
    payload = b"".join(
        [
            MAGIC,
            struct.pack("<III", len(ds), ds.dim, ds.classes),
            ds.x.astype("<f8").tobytes(),
            ds.y.astype("<u4").tobytes(),
        ]
    )
    atomic_write_bytes(path, payload)


def read_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ContractError(f"{path}: bad magic {raw[:4]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise ContractError(f"{path}: truncated header")
    n, f, k = struct.unpack_from("<III", raw, 4)
    expected = 16 + 8 * n * f + 4 * n
    if len(raw) != expected:
        raise ContractError(f"{path}: size {len(raw)} bytes, header implies {expected}")
    x = np.frombuffer(raw, dtype="<f8", count=n * f, offset=16).reshape(n, f)
    y = np.frombuffer(raw, dtype="<u4", count=n, offset=16 + 8 * n * f)
    if n and int(y.max()) >= k:
        raise ContractError(f"{path}: label {int(y.max())} >= class count {k}")
    return Dataset(x.astype(np.float64), y.astype(np.int64), k, name=Path(path).stem)


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(Path(path), text.encode("utf-8"))


# -- synthetic tasks ------------------------------------------------------------


def gaussian_shift_pair(dim: int, n_train: int, n_test: int, seed: int, shift: float = 7.0, sep: float = 1.5):
    """Two-Gaussian source task and a covariate-shifted target.

    Source classes sit at ``+/- sep * u``.  The target keeps the class geometry
    but translates every input by ``shift * d`` for a random unit ``d``, which
    moves a pretrained backbone's pre-activations into a region where its
    activations respond differently.
    """
    rng = np.random.default_rng(seed)
    u = rng.normal(size=dim)
    u /= np.linalg.norm(u)
    d = rng.normal(size=dim)
    d /= np.linalg.norm(d)

    def draw(n, offset, name):
        y = rng.integers(0, 2, size=n)
        x = rng.normal(size=(n, dim)) + np.outer(2.0 * y - 1.0, sep * u) + offset
        return Dataset(x, y, 2, name)

    zero = np.zeros(dim)
    return {
        "source_train": draw(n_train, zero, "source"),
        "source_test": draw(n_test, zero, "source"),
        "target_train": draw(n_train, shift * d, "target"),
        "target_test": draw(n_test, shift * d, "target"),
    }


def piecewise_regression_task(dim: int, n: int, seed: int, classes: int = 4) -> Dataset:
    """Labels from binned piecewise-nonlinear score of a random projection."""
    rng = np.random.default_rng(seed)
    w = rng.normal(size=dim) / np.sqrt(dim)
    x = rng.normal(size=(n, dim))
    z = x @ w
    score = np.where(z > 0, np.sin(2.0 * z), np.abs(z) ** 1.5)
    edges = np.quantile(score, np.linspace(0, 1, classes + 1)[1:-1])
    return Dataset(x, np.digitize(score, edges), classes, "piecewise")


def random_labels(dim: int, n: int, seed: int, classes: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    return Dataset(rng.normal(size=(n, dim)), rng.integers(0, classes, size=n), classes, "random")


TASKS = ("gaussian-shift", "piecewise", "file")


def load_task(task: str, dim: int, n_train: int, n_test: int, seed: int, path: str | None = None, **kw) -> dict:
    if task == "gaussian-shift":
        return gaussian_shift_pair(dim, n_train, n_test, seed, **kw)
    if task == "piecewise":
        full = piecewise_regression_task(dim, n_train + n_test, seed)
        tr, te = full.subset(slice(0, n_train)), full.subset(slice(n_train, None))
        return {"source_train": tr, "source_test": te, "target_train": tr, "target_test": te}
    if task == "file":
        if not path:
            raise ConfigError("data.path is required for task 'file'", field="data.path")
        full = read_dataset(path)
        rng = np.random.default_rng(seed)
        idx = rng.permutation(len(full))
        cut = int(round(len(full) * n_train / max(n_train + n_test, 1)))
        tr, te = full.subset(idx[:cut]), full.subset(idx[cut:])
        return {"source_train": tr, "source_test": te, "target_train": tr, "target_test": te}
    raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}", field="data.task")
