"""Multi-view datasets: file I/O, synthetic generation, minibatching, corruption."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

from .autodiff import ContractError, Rng

SCENARIOS = ("TCTI", "TITI")
FILLS = ("zero", "gaussian_noise")


class DatasetError(ValueError):
    """A dataset file or manifest is malformed."""


@dataclass
class MultiViewDataset:
    views: list[np.ndarray]
    labels: Optional[np.ndarray] = None
    name: str = "dataset"
    mask: Optional[np.ndarray] = None  # N x V, True where a view was corrupted

    def __post_init__(self):
        self.views = [np.asarray(v, dtype=np.float64) for v in self.views]
        rows = {v.shape[0] for v in self.views}
        if len(rows) != 1:
            raise DatasetError(f"views disagree on sample count: {[v.shape for v in self.views]}")
        if any(v.ndim != 2 for v in self.views):
            raise DatasetError("every view must be a 2-D matrix")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.n,):
                raise DatasetError(f"labels have shape {self.labels.shape}, expected ({self.n},)")
            if self.labels.min() < 0:
                raise DatasetError("labels must be non-negative")

    @property
    def n(self) -> int:
        return self.views[0].shape[0]

    @property
    def n_views(self) -> int:
        return len(self.views)

    @property
    def dims(self) -> list[int]:
        return [v.shape[1] for v in self.views]

    @property
    def n_classes(self) -> int:
        return int(self.labels.max()) + 1 if self.labels is not None else 0

    def subset(self, index) -> "MultiViewDataset":
        index = np.asarray(index)
        return MultiViewDataset(
            views=[v[index] for v in self.views],
            labels=None if self.labels is None else self.labels[index],
            name=self.name,
            mask=None if self.mask is None else self.mask[index],
        )


# ----------------------------------------------------------------------------
# binary matrix format: u32 rows, u32 cols, then row-major little-endian f32


def write_matrix(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    if array.ndim != 2:
        raise DatasetError("write_matrix expects a 2-D array")
    rows, cols = array.shape
    Path(path).write_bytes(struct.pack("<II", rows, cols) + np.ascontiguousarray(array, dtype="<f4").tobytes())


def read_matrix(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 8:
        raise DatasetError(f"{path}: truncated header")
    rows, cols = struct.unpack_from("<II", blob)
    expected = 8 + 4 * rows * cols
    if len(blob) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for {rows}x{cols}, found {len(blob)}")
    return np.frombuffer(blob, dtype="<f4", offset=8).reshape(rows, cols).astype(np.float64)


def _read_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [[float(x) for x in row] for row in csv.reader(fh) if row]
    if not rows:
        raise DatasetError(f"{path}: empty CSV")
    if len({len(r) for r in rows}) != 1:
        raise DatasetError(f"{path}: ragged CSV rows")
    return np.asarray(rows, dtype=np.float64)


def _read_any(path: Path, fmt: Optional[str]) -> np.ndarray:
    fmt = fmt or path.suffix.lstrip(".")
    if fmt == "bin":
        return read_matrix(path)
    if fmt == "csv":
        return _read_csv(path)
    raise DatasetError(f"{path}: unknown format {fmt!r} (expected 'bin' or 'csv')")


def save_dataset(dataset: MultiViewDataset, directory) -> Path:
    """Write ``manifest.json``, one ``view{i}.bin`` per view and ``labels.bin``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = []
    for i, v in enumerate(dataset.views):
        write_matrix(directory / f"view{i}.bin", v)
        views.append({"path": f"view{i}.bin", "format": "bin"})
    manifest = {
        "name": dataset.name,
        "dtype": "float32",
        "views": views,
        "dims": [[dataset.n, d] for d in dataset.dims],
        "labels": None,
    }
    if dataset.labels is not None:
        write_matrix(directory / "labels.bin", dataset.labels.reshape(-1, 1))
        manifest["labels"] = {"path": "labels.bin", "format": "bin"}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_dataset(manifest_path) -> MultiViewDataset:
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"{manifest_path}: cannot read manifest: {exc}") from exc
    base = manifest_path.parent
    if manifest.get("dtype", "float32") != "float32":
        raise DatasetError(f"{manifest_path}: unsupported dtype {manifest['dtype']!r}")
    entries = manifest.get("views") or []
    if not entries:
        raise DatasetError(f"{manifest_path}: no views listed")
    views = []
    for entry in entries:
        if isinstance(entry, str):
            entry = {"path": entry}
        views.append(_read_any(base / entry["path"], entry.get("format")))
    dims = manifest.get("dims")
    if dims is not None:
        if len(dims) != len(views):
            raise DatasetError(f"{manifest_path}: {len(dims)} dims entries for {len(views)} views")
        for i, (d, v) in enumerate(zip(dims, views)):
            if list(v.shape) != list(d):
                raise DatasetError(f"{manifest_path}: view {i} has shape {list(v.shape)}, manifest says {d}")
    labels = None
    lab = manifest.get("labels")
    if lab:
        if isinstance(lab, str):
            lab = {"path": lab}
        raw = _read_any(base / lab["path"], lab.get("format"))
        if raw.shape[1] != 1 or np.any(raw != np.round(raw)):
            raise DatasetError(f"{manifest_path}: labels must be a single integer column")
        labels = raw[:, 0].astype(np.int64)
    return MultiViewDataset(views=views, labels=labels, name=manifest.get("name", manifest_path.parent.name))


# ----------------------------------------------------------------------------
# synthetic data


def synth_gaussian_multiview(
    k: int = 3,
    n: int = 600,
    views: int = 2,
    dims: Sequence[int] = (10, 10),
    noise: float = 1.0,
    separation: float = 3.0,
    seed: int = 0,
) -> MultiViewDataset:
    """Gaussian clusters seen through ``views`` fixed random linear maps.

    Cluster means are the corners of a simplex scaled by ``separation``; view
    ``v`` is ``mean @ W_v + noise * eps`` with ``W_v`` a ``k x dims[v]`` Gaussian
    matrix with unit-norm rows. Labels are balanced (``n // k`` each, remainder
    spread over the first classes) and shuffled. Values are rounded to float32
    so the dataset survives a save/load round trip bit for bit.
    """
    if k < 2:
        raise ContractError(f"k must be >= 2, got {k}")
    if len(dims) != views:
        raise ContractError(f"need one dim per view: views={views}, dims={list(dims)}")
    rng = Rng(seed, 0x5EED)
    labels = rng.permutation(np.arange(n) % k)
    latent = separation * np.eye(k)[labels]
    out = []
    for v, d in enumerate(dims):
        vr = rng.fork(v)
        w = vr.normal((k, d))
        w /= np.linalg.norm(w, axis=1, keepdims=True)
        x = latent @ w + noise * vr.normal((n, d))
        out.append(x.astype(np.float32).astype(np.float64))
    return MultiViewDataset(views=out, labels=labels, name=f"synth-k{k}-n{n}-v{views}-s{seed}")


# ----------------------------------------------------------------------------
# minibatches


@dataclass
class MultiViewBatch:
    index: np.ndarray
    views: list[np.ndarray]
    labels: Optional[np.ndarray] = None
    mask: Optional[np.ndarray] = None


@dataclass
class BatchIterator:
    """Seeded shuffled minibatches; epoch ``e`` uses its own derived permutation."""

    dataset: MultiViewDataset
    batch_size: int
    seed: int = 0
    drop_last: bool = True
    shuffle: bool = True

    def __post_init__(self):
        if self.batch_size < 2:
            raise ContractError(f"batch_size must be >= 2, got {self.batch_size}")

    def order(self, epoch: int) -> np.ndarray:
        if not self.shuffle:
            return np.arange(self.dataset.n)
        return Rng(self.seed, 0xBA7C, epoch).permutation(self.dataset.n)

    def num_batches(self) -> int:
        n, b = self.dataset.n, self.batch_size
        return n // b if self.drop_last else -(-n // b)

    def epoch(self, epoch: int = 0) -> Iterator[MultiViewBatch]:
        order = self.order(epoch)
        ds = self.dataset
        for start in range(0, self.num_batches() * self.batch_size, self.batch_size):
            idx = order[start:start + self.batch_size]
            yield MultiViewBatch(
                index=idx,
                views=[v[idx] for v in ds.views],
                labels=None if ds.labels is None else ds.labels[idx],
                mask=None if ds.mask is None else ds.mask[idx],
            )

    def __iter__(self) -> Iterator[MultiViewBatch]:
        return self.epoch(0)


def batches(dataset: MultiViewDataset, batch_size: int, seed: int = 0, epoch: int = 0,
            drop_last: bool = True) -> Iterator[MultiViewBatch]:
    return BatchIterator(dataset, batch_size, seed, drop_last).epoch(epoch)


# ----------------------------------------------------------------------------
# corruption


@dataclass
class CorruptionSpec:
    scenario: str = "TCTI"
    missing_rate: float = 0.0
    fill: str = "zero"
    rng_seed: int = 0

    def validate(self) -> list[str]:
        errors = []
        if self.scenario not in SCENARIOS:
            errors.append(f"scenario must be one of {SCENARIOS}, got {self.scenario!r}")
        if not 0.0 <= self.missing_rate < 1.0:
            errors.append(f"missing_rate must lie in [0, 1), got {self.missing_rate}")
        if self.fill not in FILLS:
            errors.append(f"fill must be one of {FILLS}, got {self.fill!r}")
        return errors


def corrupt_views(dataset: MultiViewDataset, spec: CorruptionSpec) -> MultiViewDataset:
    """Destroy one uniformly chosen view of each sample selected with probability ``missing_rate``.

    Returns a new dataset whose ``mask`` marks the destroyed (sample, view) cells.
    Untouched entries are copied bit for bit.
    """
    errors = spec.validate()
    if errors:
        raise ContractError("; ".join(errors))
    rng = Rng(spec.rng_seed, 0xC0DE)
    n, nv = dataset.n, dataset.n_views
    selected = rng.random(n) < spec.missing_rate
    which = rng.integers(0, nv, n)
    mask = np.zeros((n, nv), dtype=bool)
    mask[selected, which[selected]] = True
    views = []
    for v, x in enumerate(dataset.views):
        x = x.copy()
        rows = mask[:, v]
        if spec.fill == "zero":
            x[rows] = 0.0
        else:
            scale = x.std(axis=0, keepdims=True)
            x[rows] = rng.fork(v).normal((int(rows.sum()), x.shape[1])) * scale
            x[rows] = x[rows].astype(np.float32).astype(np.float64)
        views.append(x)
    prior = dataset.mask if dataset.mask is not None else np.zeros_like(mask)
    return replace(dataset, views=views, mask=prior | mask)


def corrupt(dataset: MultiViewDataset, spec: CorruptionSpec) -> tuple[MultiViewDataset, MultiViewDataset]:
    """Return ``(train_copy, eval_copy)`` per the scenario.

    TCTI trains on clean data and evaluates on the corrupted copy; TITI uses the
    corrupted copy for both.
    """
    corrupted = corrupt_views(dataset, spec)
    if spec.scenario == "TCTI":
        clean = replace(dataset, views=[v.copy() for v in dataset.views],
                        mask=np.zeros((dataset.n, dataset.n_views), dtype=bool))
        return clean, corrupted
    return corrupted, corrupted


__all__ = [
    "DatasetError",
    "MultiViewDataset",
    "MultiViewBatch",
    "BatchIterator",
    "CorruptionSpec",
    "batches",
    "corrupt",
    "corrupt_views",
    "load_dataset",
    "save_dataset",
    "read_matrix",
    "write_matrix",
    "synth_gaussian_multiview",
]
