"""Ingestion, min-max normalisation, windowing and splitting of activity time series."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class RawSeries:
    """Per-timestep features with one class index per row.

    ``labels`` are indices into ``class_values``, which holds the label
    values as they appeared in the source file.
    """

    features: np.ndarray  # [n, d]
    labels: np.ndarray  # [n]
    class_values: tuple[int, ...] = ()
    feature_names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1 or self.features.shape[1] < 1:
            raise DataError(f"features must be a non-empty [n, d] matrix, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("labels must have one entry per row")
        if self.labels.min() < 0:
            raise DataError("labels must be non-negative")
        if not self.class_values:
            object.__setattr__(self, "class_values", tuple(range(int(self.labels.max()) + 1)))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.class_values)

    def rows(self, mask_or_index) -> RawSeries:
        return replace(self, features=self.features[mask_or_index], labels=self.labels[mask_or_index])


@dataclass(frozen=True)
class WindowedDataset:
    sequences: np.ndarray  # [m, s, d]
    labels: np.ndarray  # [m]
    n_classes: int
    starts: np.ndarray = field(default=None)  # row offset of each window in its source series

    def __post_init__(self):
        if self.starts is None:
            object.__setattr__(self, "starts", np.arange(len(self.labels)))
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DataError(f"window labels must lie in [0, {self.n_classes})")

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def s(self) -> int:
        return self.sequences.shape[1]

    @property
    def d(self) -> int:
        return self.sequences.shape[2]

    def subset(self, index) -> WindowedDataset:
        return WindowedDataset(self.sequences[index], self.labels[index], self.n_classes, self.starts[index])


def _detect_delimiter(line: str) -> str | None:
    if "," in line:
        return ","
    if "\t" in line:
        return "\t"
    return None  # any whitespace


def load_delimited(
    path: str | Path,
    delimiter: str | None = "auto",
    label_column: int = -1,
    drop_labels: Iterable[int] = (0,),
    header: bool = False,
    feature_columns: Sequence[int] | None = None,
    max_rows: int | None = None,
) -> RawSeries:
    """Read a plain-text table, one timestep per row, in file order.

    ``delimiter`` is ``"auto"`` (comma, tab, else whitespace), ``None``
    (whitespace) or a literal separator.  ``feature_columns`` picks feature
    columns by index; by default every column except the label is used.
    Rows whose label is in ``drop_labels`` are discarded.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    drop = {int(v) for v in drop_labels}
    names = None
    rows: list[list[float]] = []
    labels: list[int] = []
    width = None
    sep = None if delimiter == "auto" else delimiter
    auto = delimiter == "auto"
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            if auto:
                sep = _detect_delimiter(line)
                auto = False
            parts = [p.strip() for p in line.split(sep)]
            if width is None:
                width = len(parts)
                lab_idx = label_column % width
                feat_idx = (
                    [c % width for c in feature_columns]
                    if feature_columns is not None
                    else [c for c in range(width) if c != lab_idx]
                )
                if not feat_idx or lab_idx in feat_idx:
                    raise ConfigError("feature columns must be non-empty and exclude the label column")
                if header:
                    names = tuple(parts[c] for c in feat_idx)
                    continue
            elif len(parts) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, found {len(parts)}")
            try:
                lab = float(parts[lab_idx])
                if lab != int(lab):
                    raise ValueError(parts[lab_idx])
                lab = int(lab)
                values = [float(parts[c]) for c in feat_idx]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: unparseable value ({exc})") from None
            if not all(math.isfinite(v) for v in values):
                raise DataError(f"{path}:{lineno}: non-finite feature value")
            if lab in drop:
                continue
            rows.append(values)
            labels.append(lab)
            if max_rows is not None and len(rows) >= max_rows:
                break
    if not rows:
        raise DataError(f"{path}: empty dataset after dropping labels {sorted(drop)}")
    raw_labels = np.asarray(labels, dtype=np.int64)
    if raw_labels.min() < 0:
        raise DataError(f"{path}: negative class label")
    class_values, idx = np.unique(raw_labels, return_inverse=True)
    return RawSeries(
        np.asarray(rows, dtype=np.float64),
        idx.astype(np.int64),
        tuple(int(v) for v in class_values),
        names,
    )


@dataclass(frozen=True)
class MinMax:
    mins: np.ndarray
    maxs: np.ndarray

    @classmethod
    def fit(cls, features: np.ndarray) -> MinMax:
        return cls(features.min(axis=0).astype(np.float64), features.max(axis=0).astype(np.float64))

    @property
    def constant(self) -> np.ndarray:
        return self.maxs <= self.mins

    def apply(self, features: np.ndarray, clip: bool = False) -> np.ndarray:
        span = np.where(self.constant, 1.0, self.maxs - self.mins)
        out = (features - self.mins) / span
        out[:, self.constant] = 0.0
        return np.clip(out, 0.0, 1.0) if clip else out

    def invert(self, normalized: np.ndarray) -> np.ndarray:
        span = np.where(self.constant, 0.0, self.maxs - self.mins)
        return normalized * span + self.mins

    def to_dict(self) -> dict:
        return {"mins": self.mins.tolist(), "maxs": self.maxs.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> MinMax:
        return cls(np.asarray(d["mins"], dtype=np.float64), np.asarray(d["maxs"], dtype=np.float64))


def normalize_minmax(
    raw: RawSeries, stats: MinMax | None = None, clip: bool = False
) -> tuple[RawSeries, MinMax]:
    """Scale each feature to [0, 1] using ``stats`` (fit on ``raw`` if omitted).

    Constant features become 0.0 with a warning.  With statistics fit on
    another split, values can leave [0, 1]; pass ``clip=True`` to clamp them.
    """
    stats = stats or MinMax.fit(raw.features)
    if stats.mins.shape != (raw.d,):
        raise ConfigError(f"normalisation stats cover {stats.mins.shape[0]} features, data has {raw.d}")
    if stats.constant.any():
        warnings.warn(
            f"constant feature(s) {np.flatnonzero(stats.constant).tolist()} mapped to 0.0",
            RuntimeWarning,
            stacklevel=2,
        )
    return replace(raw, features=stats.apply(raw.features, clip=clip)), stats


def majority_labels(labels: np.ndarray, length: int, stride: int, n_classes: int) -> np.ndarray:
    """Majority label of each window; ties go to the final timestep's label.

    If the final label is not among the tied classes, the tied class that
    occurs latest in the window wins.
    """
    n = len(labels)
    starts = np.arange(0, n - length + 1, stride)
    onehot = np.zeros((n + 1, n_classes), dtype=np.int64)
    onehot[1:][np.arange(n), labels] = 1
    cum = onehot.cumsum(axis=0)
    counts = cum[starts + length] - cum[starts]
    best = counts.max(axis=1, keepdims=True)
    tied = counts == best
    out = counts.argmax(axis=1)
    multi = np.flatnonzero(tied.sum(axis=1) > 1)
    for w in multi:
        st = starts[w]
        window = labels[st : st + length]
        if tied[w, window[-1]]:
            out[w] = window[-1]
        else:
            for lab in window[::-1]:
                if tied[w, lab]:
                    out[w] = lab
                    break
    return out


def window(raw: RawSeries, length: int, stride: int = 1) -> WindowedDataset:
    """Sliding windows of ``length`` rows every ``stride`` rows.

    Sequences are a read-only strided view of ``raw.features``; copy before
    mutating.
    """
    if length < 1 or stride < 1:
        raise ConfigError("window length and stride must be >= 1")
    if raw.n < length:
        raise ConfigError(f"series has {raw.n} rows, fewer than window length {length}")
    view = np.lib.stride_tricks.sliding_window_view(raw.features, length, axis=0)  # [n-s+1, d, s]
    view = view.transpose(0, 2, 1)[::stride]
    starts = np.arange(0, raw.n - length + 1, stride)
    labels = majority_labels(raw.labels, length, stride, raw.n_classes)
    return WindowedDataset(view, labels, raw.n_classes, starts)


def _train_count(m: int, f: float) -> int:
    # tolerate float noise such as 0.85 * 100 = 85.00000000000001
    return int(math.ceil(m * f - 1e-9))


def split(ds: WindowedDataset, train_fraction: float = 0.85, mode: str = "temporal"):
    """Partition windows into (train, test) without shuffling.

    ``temporal``: the first ceil(m*f) windows train, the rest test.
    ``stratified``: the same rule applied to each class's windows separately,
    so every class appears on both sides.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    train_mask = split_mask(ds.labels, train_fraction, mode)
    if train_mask.all() or not train_mask.any():
        raise ConfigError(f"split of {ds.m} windows leaves one side empty")
    return ds.subset(np.flatnonzero(train_mask)), ds.subset(np.flatnonzero(~train_mask))


def split_mask(labels: np.ndarray, train_fraction: float, mode: str = "temporal") -> np.ndarray:
    """Boolean train-membership per item (rows or windows), time order preserved."""
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    m = len(labels)
    mask = np.zeros(m, dtype=bool)
    if mode == "temporal":
        mask[: _train_count(m, train_fraction)] = True
    elif mode == "stratified":
        for k in np.unique(labels):
            idx = np.flatnonzero(labels == k)
            mask[idx[: _train_count(len(idx), train_fraction)]] = True
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    return mask


def pearson_avg(raw: RawSeries | np.ndarray) -> float:
    """Mean |r| over the off-diagonal entries of the feature correlation matrix."""
    X = raw.features if isinstance(raw, RawSeries) else np.asarray(raw, dtype=np.float64)
    d = X.shape[1]
    if d < 2:
        raise ConfigError("pearson_avg needs at least two features")
    centered = X - X.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    const = norms == 0
    if const.any():
        warnings.warn(
            f"constant feature(s) {np.flatnonzero(const).tolist()} given zero correlation",
            RuntimeWarning,
            stacklevel=2,
        )
    safe = np.where(const, 1.0, norms)
    unit = centered / safe
    corr = unit.T @ unit
    corr[const, :] = 0.0
    corr[:, const] = 0.0
    corr = np.clip(corr, -1.0, 1.0)
    off = ~np.eye(d, dtype=bool)
    return float(np.abs(corr[off]).mean())


@dataclass(frozen=True)
class VarianceSummary:
    order: np.ndarray  # feature indices, highest variance first
    variances: np.ndarray  # sorted descending
    cumulative: np.ndarray  # cumulative fraction of total variance


def variance_summary(values: np.ndarray) -> VarianceSummary:
    """Sort non-negative variances descending and accumulate their share of the total."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(-values, kind="stable")
    v = values[order]
    total = v.sum()
    cum = np.cumsum(v) / total if total > 0 else np.ones_like(v)
    return VarianceSummary(order, v, cum)


def feature_variance_summary(raw: RawSeries | np.ndarray) -> VarianceSummary:
    X = raw.features if isinstance(raw, RawSeries) else np.asarray(raw, dtype=np.float64)
    return variance_summary(X.var(axis=0))
