"""Dataset parsing, synthesis, ID/OOD splitting and normalization."""
from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np


class TsFormatError(ValueError):
    """Base class for ``.ts`` parse errors; carries the 1-based line number."""

    def __init__(self, message: str, line: int | None = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingHeaderError(TsFormatError):
    pass


class UnequalLengthError(TsFormatError):
    pass


class DimensionMismatchError(TsFormatError):
    pass


class UnknownClassError(TsFormatError):
    pass


class MalformedNumberError(TsFormatError):
    pass


class SplitError(ValueError):
    pass


class EmptySideError(ValueError):
    pass


@dataclass(frozen=True)
class TimeSeriesDataset:
    instances: np.ndarray  # (n, d, L)
    labels: np.ndarray  # (n,) int
    class_names: tuple[str, ...]
    name: str = ""
    split_tag: str = "train"

    def __post_init__(self) -> None:
        if self.instances.ndim != 3:
            raise ValueError(f"instances must be (n, d, L), got {self.instances.shape}")
        if self.labels.shape != (self.instances.shape[0],):
            raise ValueError("labels must have one entry per instance")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label index out of range for class_names")

    @property
    def n(self) -> int:
        return self.instances.shape[0]

    @property
    def dims(self) -> int:
        return self.instances.shape[1]

    @property
    def length(self) -> int:
        return self.instances.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def __len__(self) -> int:
        return self.n

    def subset(self, index) -> "TimeSeriesDataset":
        return replace(self, instances=self.instances[index], labels=self.labels[index])


@dataclass(frozen=True)
class SplitSpec:
    id_classes: tuple[int, ...]
    ood_classes: tuple[int, ...]
    seed: int = 0

    def to_dict(self) -> dict:
        return {"id_classes": list(self.id_classes), "ood_classes": list(self.ood_classes),
                "seed": self.seed}


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray  # (d,)
    std: np.ndarray  # (d,), already floored

    def apply(self, ds: TimeSeriesDataset) -> TimeSeriesDataset:
        if ds.dims != self.mean.shape[0]:
            raise ValueError(f"normalization has {self.mean.shape[0]} channels, dataset has {ds.dims}")
        x = (ds.instances - self.mean[None, :, None]) / self.std[None, :, None]
        return replace(ds, instances=x)

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


# --- .ts parsing --------------------------------------------------------------

_BOOL = {"true": True, "false": False}


def _parse_bool(value: str, key: str, lineno: int) -> bool:
    try:
        return _BOOL[value.strip().lower()]
    except KeyError:
        raise TsFormatError(f"@{key} expects true/false, got {value!r}", lineno) from None


def parse_ts(source, name: str = "", split_tag: str = "train") -> TimeSeriesDataset:
    """Parse ``.ts`` content given as text, bytes or a readable stream.

    Only equal-length, non-timestamped, classification files are accepted.
    Class order follows the ``@classLabel`` declaration.
    """
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    if isinstance(source, str):
        source = io.StringIO(source)

    header: dict[str, str] = {}
    class_names: list[str] | None = None
    in_data = False
    rows: list[np.ndarray] = []
    labels: list[int] = []
    dims = length = None

    for lineno, raw in enumerate(source, start=1):
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if not in_data:
            if not line.startswith("@"):
                raise MissingHeaderError("data row before @data", lineno)
            key, _, value = line[1:].partition(" ")
            key = key.lower()
            value = value.strip()
            if key == "data":
                if class_names is None:
                    raise TsFormatError("@classLabel true <names...> is required", lineno)
                if "equallength" in header and not _parse_bool(header["equallength"], "equalLength", lineno):
                    raise UnequalLengthError("@equalLength false is not supported", lineno)
                if "timestamps" in header and _parse_bool(header["timestamps"], "timeStamps", lineno):
                    raise TsFormatError("timestamped series are not supported", lineno)
                if "dimensions" in header:
                    dims = _parse_int(header["dimensions"], "dimensions", lineno)
                elif "univariate" in header and _parse_bool(header["univariate"], "univariate", lineno):
                    dims = 1
                if "serieslength" in header:
                    length = _parse_int(header["serieslength"], "seriesLength", lineno)
                in_data = True
                continue
            if key == "classlabel":
                parts = value.split()
                if not parts or not _parse_bool(parts[0], "classLabel", lineno):
                    raise TsFormatError("only labelled files (@classLabel true ...) are supported", lineno)
                if len(parts) < 2:
                    raise TsFormatError("@classLabel true needs at least one class name", lineno)
                class_names = parts[1:]
                if len(set(class_names)) != len(class_names):
                    raise TsFormatError("duplicate class names in @classLabel", lineno)
            else:
                header[key] = value
            continue

        fields = line.split(":")
        label = fields[-1].strip()
        blocks = fields[:-1]
        if dims is None:
            dims = len(blocks)
        if len(blocks) != dims:
            raise DimensionMismatchError(f"expected {dims} dimensions, found {len(blocks)}", lineno)
        series = []
        for block in blocks:
            try:
                values = np.array([float(v) for v in block.split(",")], dtype=np.float64)
            except ValueError as exc:
                raise MalformedNumberError(str(exc), lineno) from None
            if not np.isfinite(values).all():
                raise MalformedNumberError("missing or non-finite value", lineno)
            if length is None:
                length = values.size
            if values.size != length:
                raise UnequalLengthError(f"expected length {length}, found {values.size}", lineno)
            series.append(values)
        try:
            labels.append(class_names.index(label))
        except ValueError:
            raise UnknownClassError(f"class {label!r} not declared in @classLabel", lineno) from None
        rows.append(np.stack(series))

    if not in_data:
        raise MissingHeaderError("no @data section")
    if dims is None or length is None:
        dims = dims or 1
        length = length or 0
    instances = np.stack(rows) if rows else np.zeros((0, dims, length))
    return TimeSeriesDataset(
        instances=instances,
        labels=np.asarray(labels, dtype=np.int64),
        class_names=tuple(class_names),
        name=name or header.get("problemname", ""),
        split_tag=split_tag,
    )


def _parse_int(value: str, key: str, lineno: int) -> int:
    try:
        v = int(value)
    except ValueError:
        raise TsFormatError(f"@{key} expects an integer, got {value!r}", lineno) from None
    if v <= 0:
        raise TsFormatError(f"@{key} must be positive", lineno)
    return v


def load_ts(path: str | os.PathLike, split_tag: str | None = None) -> TimeSeriesDataset:
    path = Path(path)
    if split_tag is None:
        split_tag = "test" if path.stem.upper().endswith("_TEST") else "train"
    with open(path, encoding="utf-8") as fh:
        return parse_ts(fh, split_tag=split_tag)


def to_ts(ds: TimeSeriesDataset) -> str:
    """Serialize to ``.ts`` text; floats use ``repr`` so parsing is lossless."""
    out = [
        f"@problemName {ds.name or 'unnamed'}",
        "@timeStamps false",
        "@missing false",
        f"@univariate {'true' if ds.dims == 1 else 'false'}",
        f"@dimensions {ds.dims}",
        "@equalLength true",
        f"@seriesLength {ds.length}",
        "@classLabel true " + " ".join(ds.class_names),
        "@data",
    ]
    for x, y in zip(ds.instances, ds.labels):
        blocks = [",".join(repr(float(v)) for v in channel) for channel in x]
        out.append(":".join(blocks) + ":" + ds.class_names[y])
    return "\n".join(out) + "\n"


def load_uea(directory: str | os.PathLike, name: str | None = None) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    """Load ``<name>_TRAIN.ts`` and ``<name>_TEST.ts`` from a directory."""
    directory = Path(directory)
    name = name or directory.name
    train = load_ts(directory / f"{name}_TRAIN.ts", "train")
    test = load_ts(directory / f"{name}_TEST.ts", "test")
    return train, test


# --- synthetic ----------------------------------------------------------------

def generate_synthetic(classes: int, n_per_class: int, d: int, L: int, seed: int,
                       noise: float = 0.1, split_tag: str = "train",
                       name: str = "synthetic") -> TimeSeriesDataset:
    """Class ``c`` is a sinusoid of frequency ``c + 1`` cycles per series.

    Every channel of every instance draws its own phase; Gaussian noise with
    std ``noise`` is added.
    """
    if min(classes, n_per_class, d, L) <= 0:
        raise ValueError("all synthetic dataset sizes must be positive")
    rng = np.random.default_rng(seed)
    t = np.arange(L)
    labels = np.repeat(np.arange(classes), n_per_class)
    freq = (labels + 1)[:, None, None]
    phase = rng.uniform(0, 2 * np.pi, size=(labels.size, d, 1))
    x = np.sin(2 * np.pi * freq * t[None, None, :] / L + phase)
    x = x + rng.normal(0.0, noise, size=x.shape)
    return TimeSeriesDataset(
        instances=x,
        labels=labels.astype(np.int64),
        class_names=tuple(f"class{c}" for c in range(classes)),
        name=name,
        split_tag=split_tag,
    )


def generate_synthetic_splits(classes: int, n_train_per_class: int, n_test_per_class: int,
                              d: int, L: int, seed: int, noise: float = 0.1
                              ) -> tuple[TimeSeriesDataset, TimeSeriesDataset]:
    train_seed, test_seed = (int(s.generate_state(1)[0]) for s in np.random.SeedSequence(seed).spawn(2))
    train = generate_synthetic(classes, n_train_per_class, d, L, train_seed, noise, "train")
    test = generate_synthetic(classes, n_test_per_class, d, L, test_seed, noise, "test")
    return train, test


# --- ID/OOD protocol ----------------------------------------------------------

def n_id_classes(n_classes: int) -> int:
    return math.ceil(n_classes / 2)


def split_id_ood(train: TimeSeriesDataset, test: TimeSeriesDataset, seed: int = 0):
    """First ceil(C/2) declared classes are ID, the rest OOD.

    Returns ``(id_train, id_test, ood_test, SplitSpec)``. OOD training
    instances are dropped. ID subsets carry only the ID class names.
    """
    if train.class_names != test.class_names:
        raise SplitError("train and test declare different classes")
    C = train.n_classes
    if C < 2:
        raise SplitError("need at least two classes to split")
    k = n_id_classes(C)
    spec = SplitSpec(tuple(range(k)), tuple(range(k, C)), seed)

    id_names = train.class_names[:k]
    tr = train.labels < k
    te = test.labels < k
    id_train = replace(train.subset(tr), class_names=id_names)
    id_test = replace(test.subset(te), class_names=id_names)
    ood_test = test.subset(~te)
    for side, ds in (("id_train", id_train), ("id_test", id_test), ("ood_test", ood_test)):
        if ds.n == 0:
            raise SplitError(f"{side} is empty")
    return id_train, id_test, ood_test, spec


@dataclass
class EvalMixture:
    instances: np.ndarray
    is_ood: np.ndarray  # (n,) 0 = ID, 1 = OOD
    source_index: np.ndarray  # index into id_test or ood_test
    labels: np.ndarray  # original class labels (bookkeeping only)

    def __len__(self) -> int:
        return self.instances.shape[0]


def make_eval_mixture(id_test: TimeSeriesDataset, ood_test: TimeSeriesDataset, seed: int) -> EvalMixture:
    """Balanced ID/OOD mixture: subsample the larger side, then shuffle."""
    if id_test.n == 0 or ood_test.n == 0:
        raise EmptySideError("both ID and OOD test sides must be non-empty")
    rng = np.random.default_rng(seed)
    n = min(id_test.n, ood_test.n)
    id_idx = np.sort(rng.choice(id_test.n, size=n, replace=False))
    ood_idx = np.sort(rng.choice(ood_test.n, size=n, replace=False))
    x = np.concatenate([id_test.instances[id_idx], ood_test.instances[ood_idx]])
    flag = np.concatenate([np.zeros(n, dtype=np.int64), np.ones(n, dtype=np.int64)])
    src = np.concatenate([id_idx, ood_idx])
    lab = np.concatenate([id_test.labels[id_idx], ood_test.labels[ood_idx]])
    order = rng.permutation(2 * n)
    return EvalMixture(x[order], flag[order], src[order], lab[order])


def channel_normalize(source: TimeSeriesDataset, *targets: TimeSeriesDataset,
                      floor: float = 1e-8) -> tuple[list[TimeSeriesDataset], NormStats]:
    """Z-score every channel with statistics taken from ``source`` only.

    Returns the normalized ``source`` followed by each target, and the stats.
    Normalization is one-shot: applying it twice is not the identity.
    """
    x = source.instances
    mean = x.mean(axis=(0, 2))
    std = np.maximum(x.std(axis=(0, 2)), floor)
    stats = NormStats(mean, std)
    return [stats.apply(ds) for ds in (source, *targets)], stats


def concat_datasets(parts: Iterable[TimeSeriesDataset]) -> TimeSeriesDataset:
    parts = list(parts)
    return replace(parts[0], instances=np.concatenate([p.instances for p in parts]),
                   labels=np.concatenate([p.labels for p in parts]))
