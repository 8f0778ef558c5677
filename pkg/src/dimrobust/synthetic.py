"""Synthetic activity-recognition recordings for tests and dry runs.

The generator mimics the layout of a body-worn sensor log: contiguous
activity blocks, labels 1..K with optional null-label (0) gaps, and a few
high-variance channels carrying most of the raw variance.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ConfigError


def activity_series(
    rows_per_class: int = 400,
    n_classes: int = 12,
    n_features: int = 22,
    n_loud: int = 9,
    null_rows: int = 0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(features [n, d], labels [n])`` with labels in 1..n_classes.

    Each class gets its own channel offsets and oscillation frequency. The
    first ``n_loud`` channels have much larger amplitude than the rest.
    With ``null_rows > 0`` a label-0 segment precedes every activity block.
    """
    if min(rows_per_class, n_classes, n_features) < 1 or not 0 <= n_loud <= n_features:
        raise ConfigError("invalid synthetic series shape")
    rng = np.random.default_rng(seed)
    scale = np.full(n_features, 0.3)
    scale[:n_loud] = 3.0
    offsets = rng.normal(size=(n_classes, n_features)) * scale
    freqs = rng.uniform(0.02, 0.3, size=n_classes)
    phases = rng.uniform(0, 2 * np.pi, size=n_features)
    amp = 0.5 * scale

    blocks, labels = [], []
    t0 = 0
    for k in range(n_classes):
        if null_rows:
            blocks.append(rng.normal(scale=scale * 0.5, size=(null_rows, n_features)))
            labels.append(np.zeros(null_rows, dtype=np.int64))
            t0 += null_rows
        t = np.arange(t0, t0 + rows_per_class)[:, None]
        wave = amp * np.sin(2 * np.pi * freqs[k] * t + phases)
        noise = rng.normal(scale=0.15 * scale, size=(rows_per_class, n_features))
        blocks.append(offsets[k] + wave + noise)
        labels.append(np.full(rows_per_class, k + 1, dtype=np.int64))
        t0 += rows_per_class
    return np.vstack(blocks), np.concatenate(labels)


def write_series(path: str | Path, features: np.ndarray, labels: np.ndarray) -> Path:
    """Tab-delimited rows, label in the last column."""
    path = Path(path)
    with open(path, "w") as fh:
        for row, lab in zip(features, labels):
            fh.write("\t".join(f"{v:.6f}" for v in row) + f"\t{int(lab)}\n")
    return path
