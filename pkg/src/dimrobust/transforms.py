"""Linear data transformations fit on training rows and replayed at attack time.

Every fitted transform maps a ``[n, d]`` row matrix to a new row matrix.
PCA and feature masks keep the row count; EMA keeps both dimensions;
candlesticks compress ``c`` rows into one row of ``4d`` values laid out
feature-major as (open, close, high, low).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import ClassVar

import numpy as np

from .dataset import majority_labels, variance_summary
from .errors import ConfigError, DataError, NumericError

TRANSFORM_FORMAT = "dimrobust-transform"
TRANSFORM_VERSION = 1


def _check_matrix(X, d: int | None = None) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ConfigError(f"expected a [n, d] matrix, got shape {X.shape}")
    if d is not None and X.shape[1] != d:
        raise ConfigError(f"expected {d} columns, got {X.shape[1]}")
    return X


class FittedTransform:
    kind: ClassVar[str] = ""
    # rows of input consumed per output row
    row_stride: ClassVar[int] = 1

    def apply(self, X: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_dim(self, d: int) -> int:
        raise NotImplementedError

    def payload(self) -> dict:
        return {}

    def to_dict(self) -> dict:
        return {"kind": self.kind, **self.payload()}

    def save(self, path: str | Path) -> None:
        doc = {"format": TRANSFORM_FORMAT, "version": TRANSFORM_VERSION, "transform": self.to_dict()}
        Path(path).write_text(json.dumps(doc, indent=1))


@dataclass(frozen=True)
class Identity(FittedTransform):
    kind: ClassVar[str] = "identity"

    def apply(self, X):
        return _check_matrix(X).copy()

    def output_dim(self, d):
        return d


@dataclass(frozen=True, eq=False)
class PCA(FittedTransform):
    mean: np.ndarray  # [d]
    components: np.ndarray  # [p, d], rows are principal directions
    explained_variance: np.ndarray  # [p]
    # optional min/max of the training projections; when set, apply() maps into [0, 1]
    out_min: np.ndarray | None = None
    out_max: np.ndarray | None = None

    kind: ClassVar[str] = "pca"

    @property
    def p(self) -> int:
        return self.components.shape[0]

    def apply(self, X):
        Z = pca_apply(self, X)
        if self.out_min is None:
            return Z
        return _rescale(Z, self.out_min, self.out_max)

    def reconstruct(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean

    def output_dim(self, d):
        return self.p

    def payload(self):
        return {
            "mean": self.mean.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "out_min": None if self.out_min is None else self.out_min.tolist(),
            "out_max": None if self.out_max is None else self.out_max.tolist(),
        }


@dataclass(frozen=True, eq=False)
class FeatureMask(FittedTransform):
    indices: tuple[int, ...]

    kind: ClassVar[str] = "feature_mask"

    def __post_init__(self):
        idx = tuple(sorted({int(i) for i in self.indices}))
        if not idx:
            raise ConfigError("feature mask must select at least one feature")
        if idx[0] < 0:
            raise ConfigError("feature indices must be non-negative")
        object.__setattr__(self, "indices", idx)

    def apply(self, X):
        return mask_apply(self, X)

    def output_dim(self, d):
        return len(self.indices)

    def payload(self):
        return {"indices": list(self.indices)}


@dataclass(frozen=True, eq=False)
class Candlestick(FittedTransform):
    window: int
    # per-output-column min/max from the training split; None skips re-normalisation
    col_min: np.ndarray | None = None
    col_max: np.ndarray | None = None

    kind: ClassVar[str] = "candlestick"

    def __post_init__(self):
        if self.window < 4:
            raise ConfigError(f"candlestick window must be >= 4 to reduce dimensionality, got {self.window}")

    @property
    def row_stride(self) -> int:  # type: ignore[override]
        return self.window

    def apply(self, X):
        return candlestick_apply(self, X)

    def output_dim(self, d):
        return 4 * d

    def payload(self):
        return {
            "window": self.window,
            "col_min": None if self.col_min is None else self.col_min.tolist(),
            "col_max": None if self.col_max is None else self.col_max.tolist(),
        }


@dataclass(frozen=True)
class EMA(FittedTransform):
    window: int

    kind: ClassVar[str] = "ema"

    def __post_init__(self):
        if self.window < 1:
            raise ConfigError("EMA window must be >= 1")

    @property
    def alpha(self) -> float:
        return 2.0 / (self.window + 1.0)

    def apply(self, X):
        return ema_apply(self, X)

    def output_dim(self, d):
        return d

    def payload(self):
        return {"window": self.window}


def transform_from_dict(d: dict) -> FittedTransform:
    kind = d.get("kind")
    if kind == "identity":
        return Identity()
    if kind == "pca":
        return PCA(
            np.asarray(d["mean"], dtype=np.float64),
            np.asarray(d["components"], dtype=np.float64).reshape(len(d["components"]), -1),
            np.asarray(d["explained_variance"], dtype=np.float64),
            _opt_array(d.get("out_min")),
            _opt_array(d.get("out_max")),
        )
    if kind == "feature_mask":
        return FeatureMask(tuple(d["indices"]))
    if kind == "candlestick":
        return Candlestick(int(d["window"]), _opt_array(d.get("col_min")), _opt_array(d.get("col_max")))
    if kind == "ema":
        return EMA(int(d["window"]))
    raise DataError(f"unknown transform kind {kind!r}")


def _opt_array(v) -> np.ndarray | None:
    return None if v is None else np.asarray(v, dtype=np.float64)


def _rescale(Z: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    if lo.shape[0] != Z.shape[1]:
        raise ConfigError(f"rescaling stats cover {lo.shape[0]} columns, data has {Z.shape[1]}")
    span = hi - lo
    flat = span <= 0
    out = (Z - lo) / np.where(flat, 1.0, span)
    out[:, flat] = 0.0
    return np.clip(out, 0.0, 1.0)


def load_transform(path: str | Path) -> FittedTransform:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != TRANSFORM_FORMAT or doc.get("version") != TRANSFORM_VERSION:
        raise DataError(f"{path}: not a version-{TRANSFORM_VERSION} transform document")
    return transform_from_dict(doc["transform"])


# PCA


def pca_fit(train: np.ndarray, p: int, rescale: bool = False) -> PCA:
    """Top-``p`` eigenvectors of the training covariance.

    Each component is signed so its largest-magnitude coordinate is positive.
    With ``rescale`` the fitted transform also records the range of the
    training projections and maps its output into [0, 1].
    """
    X = _check_matrix(train)
    n, d = X.shape
    if not 1 <= p <= d:
        raise ConfigError(f"component count must lie in [1, {d}], got {p}")
    if n < 2:
        raise ConfigError("PCA needs at least two rows")
    mean = X.mean(axis=0)
    cov = np.cov(X - mean, rowvar=False, ddof=1).reshape(d, d)
    try:
        evals, evecs = np.linalg.eigh(cov)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from None
    order = np.argsort(-evals, kind="stable")[:p]
    comps = evecs[:, order].T.copy()
    pivots = np.abs(comps).argmax(axis=1)
    signs = np.sign(comps[np.arange(p), pivots])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    fitted = PCA(mean, comps, np.clip(evals[order], 0.0, None))
    if rescale:
        Z = pca_apply(fitted, X)
        fitted = PCA(mean, comps, fitted.explained_variance, Z.min(axis=0), Z.max(axis=0))
    return fitted


def pca_apply(t: PCA, X: np.ndarray) -> np.ndarray:
    X = _check_matrix(X, t.mean.shape[0])
    return (X - t.mean) @ t.components.T


def component_count(fraction: float, d: int) -> int:
    """Round ``fraction * d`` to a component count in [1, d]."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"component fraction must lie in (0, 1], got {fraction}")
    return int(min(d, max(1, round(fraction * d))))


# variance heuristics


def _variances(train: np.ndarray, mode: str) -> np.ndarray:
    X = _check_matrix(train)
    if mode == "feature":
        return X.var(axis=0)
    if mode == "pca":
        cov = np.cov(X, rowvar=False, ddof=0).reshape(X.shape[1], X.shape[1])
        return np.clip(np.linalg.eigvalsh(cov), 0.0, None)
    raise ConfigError(f"unknown variance mode {mode!r}; use 'feature' or 'pca'")


def _count_for_ratio(cumulative: np.ndarray, target_ratio: float) -> int:
    if not 0.0 < target_ratio <= 1.0:
        raise ConfigError(f"target ratio must lie in (0, 1], got {target_ratio}")
    hit = np.flatnonzero(cumulative >= target_ratio - 1e-12)
    return int(hit[0]) + 1 if hit.size else len(cumulative)


def intrinsic_dimension(train: np.ndarray, target_ratio: float = 0.911, mode: str = "feature") -> int:
    """Smallest k whose k largest variances reach ``target_ratio`` of the total.

    ``mode="feature"`` ranks per-feature variances; ``mode="pca"`` ranks
    covariance eigenvalues.
    """
    summary = variance_summary(_variances(train, mode))
    return max(1, _count_for_ratio(summary.cumulative, target_ratio))


def low_variance_select(train: np.ndarray, target_ratio: float = 0.911) -> FeatureMask:
    """Keep the highest-variance features whose cumulative share first reaches ``target_ratio``."""
    X = _check_matrix(train)
    if target_ratio == 1.0:
        return FeatureMask(tuple(range(X.shape[1])))
    summary = variance_summary(X.var(axis=0))
    k = max(1, _count_for_ratio(summary.cumulative, target_ratio))
    return FeatureMask(tuple(int(i) for i in summary.order[:k]))


def mask_apply(t: FeatureMask, X: np.ndarray) -> np.ndarray:
    X = _check_matrix(X)
    if t.indices[-1] >= X.shape[1]:
        raise ConfigError(f"mask index {t.indices[-1]} out of range for {X.shape[1]} features")
    return X[:, list(t.indices)]


# trend extraction


def candlestick_ohlc(X: np.ndarray, window: int) -> np.ndarray:
    """Raw (open, close, high, low) per feature over disjoint windows; the remainder is dropped."""
    X = _check_matrix(X)
    n, d = X.shape
    if n < window:
        raise ConfigError(f"{n} rows is fewer than the candlestick window {window}")
    k = n // window
    blocks = X[: k * window].reshape(k, window, d)
    out = np.empty((k, d, 4))
    out[:, :, 0] = blocks[:, 0, :]
    out[:, :, 1] = blocks[:, -1, :]
    out[:, :, 2] = blocks.max(axis=1)
    out[:, :, 3] = blocks.min(axis=1)
    return out.reshape(k, 4 * d)


def candlestick_fit(train: np.ndarray, window: int = 20) -> Candlestick:
    """Record per-column min/max of the training candles for re-normalisation."""
    ohlc = candlestick_ohlc(train, window)
    return Candlestick(window, ohlc.min(axis=0), ohlc.max(axis=0))


def candlestick_apply(t: Candlestick, X: np.ndarray) -> np.ndarray:
    ohlc = candlestick_ohlc(X, t.window)
    if t.col_min is None:
        return ohlc
    return _rescale(ohlc, t.col_min, t.col_max)


def candle_labels(labels: np.ndarray, window: int, n_classes: int) -> np.ndarray:
    """Majority label per candle, matching how windows are labelled."""
    return majority_labels(np.asarray(labels), window, window, n_classes)


def ema_apply(t: EMA, X: np.ndarray) -> np.ndarray:
    """x'(0) = x(0); x'(t) = a x(t) + (1 - a) x'(t-1) per feature."""
    X = _check_matrix(X)
    if X.shape[0] < 1:
        raise ConfigError("EMA needs at least one row")
    a = t.alpha
    out = np.empty_like(X)
    out[0] = X[0]
    prev = out[0]
    for i in range(1, X.shape[0]):
        prev = a * X[i] + (1.0 - a) * prev
        out[i] = prev
    return out


# reporting


@dataclass(frozen=True)
class DimensionReport:
    d: int
    d_prime: int
    intrinsic: int
    codimension: int
    rows_per_step: int = 1

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "d_prime": self.d_prime,
            "intrinsic": self.intrinsic,
            "codimension": self.codimension,
            "rows_per_step": self.rows_per_step,
        }


def dimension_report(
    t: FittedTransform,
    d: int,
    train: np.ndarray | None = None,
    target_ratio: float = 0.911,
    mode: str = "feature",
    intrinsic: int | None = None,
) -> DimensionReport:
    """Embedding width after ``t`` against the intrinsic-dimension estimate.

    Pass ``intrinsic`` to use a known estimate instead of computing one from
    ``train``.
    """
    if intrinsic is None:
        if train is None:
            raise ConfigError("dimension_report needs training data or an explicit intrinsic dimension")
        intrinsic = intrinsic_dimension(train, target_ratio, mode)
    if not 1 <= intrinsic <= d:
        raise ConfigError(f"intrinsic dimension {intrinsic} outside [1, {d}]")
    d_prime = t.output_dim(d)
    return DimensionReport(d, d_prime, int(intrinsic), d_prime - int(intrinsic), t.row_stride)
