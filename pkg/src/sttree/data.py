"""UEA ``.ts`` ingestion, normalization, padding and batching."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import Tensor


class DataFormatError(ValueError):
    """Malformed ``.ts`` content."""


class LabelError(ValueError):
    """A class label outside the declared or known label set."""


@dataclass(frozen=True)
class Instance:
    values: np.ndarray  # (C, L) channel-major
    label: int


@dataclass
class Dataset:
    name: str
    values: np.ndarray  # (N, C, L)
    labels: np.ndarray  # (N,) int64
    class_names: list[str]
    split: str = "train"
    # length before any right-padding; explanation spans are clipped to it
    original_length: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.original_length:
            self.original_length = self.series_length

    def __len__(self) -> int:
        return self.values.shape[0]

    def __getitem__(self, i: int) -> Instance:
        return Instance(self.values[i], int(self.labels[i]))

    @property
    def instances(self) -> list[Instance]:
        return [self[i] for i in range(len(self))]

    @property
    def num_channels(self) -> int:
        return self.values.shape[1]

    @property
    def series_length(self) -> int:
        return self.values.shape[2]

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, values=self.values[idx], labels=self.labels[idx])


# ---------------------------------------------------------------------------
# parsing


def _parse_value(tok: str, lineno: int) -> float:
    tok = tok.strip()
    if tok in ("?", "NaN", "nan", ""):
        return math.nan
    try:
        return float(tok)
    except ValueError:
        raise DataFormatError(f"line {lineno}: cannot parse value {tok!r}") from None


def parse_ts(path, class_names: list[str] | None = None, split: str | None = None) -> Dataset:
    """Parse a UEA/UCR ``.ts`` file.

    Labels are indexed by first appearance in the file unless ``class_names``
    is given (e.g. the train split's names when parsing the test split).
    Missing values (``?``) are replaced by the mean of the observed values
    of that channel in the same instance.
    """
    path = os.fspath(path)
    headers: dict[str, str] = {}
    declared: list[str] | None = None
    rows: list[list[list[float]]] = []
    raw_labels: list[str] = []
    in_data = False
    n_channels = None

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if not in_data:
                if not line.startswith("@"):
                    raise DataFormatError(f"line {lineno}: expected a header, got {line[:30]!r}")
                key, _, rest = line[1:].partition(" ")
                key = key.lower()
                rest = rest.strip()
                if key == "data":
                    in_data = True
                    continue
                headers[key] = rest
                if key == "classlabel":
                    parts = rest.split()
                    if not parts:
                        raise DataFormatError(f"line {lineno}: empty @classLabel")
                    if parts[0].lower() == "true":
                        declared = parts[1:]
                continue
            if "(" in line:
                raise DataFormatError(f"line {lineno}: timestamped series are not supported")
            fields = line.split(":")
            if len(fields) < 2:
                raise DataFormatError(f"line {lineno}: expected channels and a label")
            *chans, label = fields
            if n_channels is None:
                n_channels = len(chans)
            elif len(chans) != n_channels:
                raise DataFormatError(
                    f"line {lineno}: ragged channel count {len(chans)}, expected {n_channels}"
                )
            rows.append([[_parse_value(v, lineno) for v in ch.split(",")] for ch in chans])
            raw_labels.append(label.strip())

    for required in ("problemname", "classlabel"):
        if required not in headers:
            raise DataFormatError(f"{path}: missing @{required} header")
    if not in_data:
        raise DataFormatError(f"{path}: missing @data section")
    if not rows:
        raise DataFormatError(f"{path}: no data lines")

    if "dimensions" in headers and int(headers["dimensions"]) != n_channels:
        raise DataFormatError(
            f"{path}: @dimensions {headers['dimensions']} but data has {n_channels} channels"
        )

    if class_names is None:
        class_names = []
        for lab in raw_labels:
            if lab not in class_names:
                class_names.append(lab)
    allowed = set(declared) if declared is not None else None
    index = {name: i for i, name in enumerate(class_names)}
    labels = np.empty(len(rows), dtype=np.int64)
    for n, lab in enumerate(raw_labels):
        if (allowed is not None and lab not in allowed) or lab not in index:
            raise LabelError(f"{path}: unknown class label {lab!r}")
        labels[n] = index[lab]

    length = max(len(ch) for row in rows for ch in row)
    if headers.get("equallength", "true").lower() == "true" and "serieslength" in headers:
        declared_len = int(headers["serieslength"])
        if declared_len != length:
            raise DataFormatError(f"{path}: @seriesLength {declared_len} but data has {length}")
    values = np.empty((len(rows), n_channels, length))
    for n, row in enumerate(rows):
        for c, ch in enumerate(row):
            arr = np.asarray(ch, dtype=np.float64)
            missing = np.isnan(arr)
            if missing.any():
                fill = arr[~missing].mean() if (~missing).any() else 0.0
                arr = np.where(missing, fill, arr)
            values[n, c, : len(arr)] = arr
            values[n, c, len(arr):] = arr[-1]

    if split is None:
        base = os.path.basename(path).upper()
        split = "test" if "_TEST" in base else "train"
    return Dataset(
        name=headers["problemname"],
        values=values,
        labels=labels,
        class_names=list(class_names),
        split=split,
        meta={k: v for k, v in headers.items()},
    )


def write_ts(ds: Dataset, path) -> None:
    """Serialize ``ds`` in ``.ts`` form (values written with ``repr`` precision)."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"@problemName {ds.name}\n")
        fh.write("@timeStamps false\n@missing false\n")
        fh.write(f"@univariate {'true' if ds.num_channels == 1 else 'false'}\n")
        fh.write(f"@dimensions {ds.num_channels}\n@equalLength true\n")
        fh.write(f"@seriesLength {ds.series_length}\n")
        fh.write(f"@classLabel true {' '.join(ds.class_names)}\n@data\n")
        for inst in ds.instances:
            chans = [",".join(repr(float(v)) for v in ch) for ch in inst.values]
            fh.write(":".join(chans) + f":{ds.class_names[inst.label]}\n")


def load_dataset(root, name: str) -> tuple[Dataset, Dataset]:
    """Load ``<root>/<name>/<name>_TRAIN.ts`` and ``_TEST.ts``; test shares train labels."""
    base = os.path.join(os.fspath(root), name)
    train_path = os.path.join(base, f"{name}_TRAIN.ts")
    test_path = os.path.join(base, f"{name}_TEST.ts")
    for p in (train_path, test_path):
        if not os.path.isfile(p):
            raise FileNotFoundError(p)
    train = parse_ts(train_path, split="train")
    test = parse_ts(test_path, class_names=train.class_names, split="test")
    if test.num_channels != train.num_channels:
        raise DataFormatError(f"{name}: train has {train.num_channels} channels, test {test.num_channels}")
    if test.series_length != train.series_length:
        target = max(test.series_length, train.series_length)
        train, test = _pad_dataset_to(train, target), _pad_dataset_to(test, target)
    return train, test


# ---------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (C,)
    std: np.ndarray  # (C,)


def z_normalize(ds: Dataset, stats: NormStats | None = None) -> tuple[Dataset, NormStats]:
    """Per-channel z-score; pass the train split's stats when normalizing test."""
    if stats is None:
        mean = ds.values.mean(axis=(0, 2))
        std = np.maximum(ds.values.std(axis=(0, 2)), 1e-8)
        stats = NormStats(mean, std)
    values = (ds.values - stats.mean[None, :, None]) / stats.std[None, :, None]
    return replace(ds, values=values), stats


def pad_to_multiple(inst: Instance, m: int) -> Instance:
    """Right-pad every channel with its last value up to a multiple of ``m``."""
    if m < 1:
        raise ValueError("m must be >= 1")
    length = inst.values.shape[1]
    target = -(-length // m) * m
    if target == length:
        return inst
    pad = np.repeat(inst.values[:, -1:], target - length, axis=1)
    return Instance(np.concatenate([inst.values, pad], axis=1), inst.label)


def _pad_dataset_to(ds: Dataset, target: int) -> Dataset:
    length = ds.series_length
    if target == length:
        return ds
    pad = np.repeat(ds.values[:, :, -1:], target - length, axis=2)
    return replace(ds, values=np.concatenate([ds.values, pad], axis=2),
                   original_length=ds.original_length)


def pad_dataset(ds: Dataset, m: int) -> Dataset:
    """Dataset-level :func:`pad_to_multiple`; keeps ``original_length``."""
    return _pad_dataset_to(ds, -(-ds.series_length // m) * m)


def batch_iter(ds: Dataset, batch_size: int, seed: int = 0, shuffle: bool = True,
               epoch: int = 0) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield ``(x, y)`` batches; the permutation depends on ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(ds)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield Tensor(ds.values[idx]), ds.labels[idx]


def batch_indices(n: int, batch_size: int, seed: int = 0, shuffle: bool = True,
                  epoch: int = 0) -> list[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def stratified_split(ds: Dataset, frac: float, seed: int) -> tuple[Dataset, Dataset]:
    """Hold out ``frac`` of each class (at least one when a class has >1 member)."""
    rng = np.random.default_rng(seed)
    hold = []
    for c in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == c)
        rng.shuffle(members)
        k = int(round(frac * len(members)))
        if len(members) > 1:
            k = max(k, 1)
        hold.extend(members[:k].tolist())
    hold = np.sort(np.asarray(hold, dtype=np.int64))
    keep = np.setdiff1d(np.arange(len(ds)), hold)
    return ds.subset(keep), ds.subset(hold)
