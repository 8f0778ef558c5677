"""Robustness curves, summary rows and their on-disk form."""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..classifier import EvalMetrics, metrics_from_logits
from ..errors import ConfigError, DataError

CURVE_COLUMNS = ("epsilon", "success", "accuracy", "log_loss", "precision")
SUMMARY_FORMAT = "dimrobust-summary"
SUMMARY_VERSION = 1
TARGET_SUCCESS = 0.30
DELTA_EPSILON = 0.80


@dataclass
class SweepResult:
    epsilons: np.ndarray
    success: np.ndarray
    accuracy: np.ndarray
    log_loss: np.ndarray
    precision: np.ndarray
    benign: EvalMetrics  # full test set, no attack
    n_attacked: int = 0

    def success_at(self, eps: float) -> float:
        """Linear interpolation of the success curve, anchored at (0, 0)."""
        xs = np.concatenate([[0.0], self.epsilons])
        ys = np.concatenate([[0.0], self.success])
        if eps > xs[-1]:
            raise ConfigError(f"epsilon {eps} lies beyond the sweep grid")
        return float(np.interp(eps, xs, ys))


@dataclass
class SummaryRow:
    name: str
    transform: str
    feature_count: int
    benign_accuracy: float
    distance_to_30: float | None
    delta_robustness_pct: float | None
    dimension: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "transform": self.transform,
            "feature_count": self.feature_count,
            "benign_accuracy": self.benign_accuracy,
            "distance_to_30": self.distance_to_30,
            "delta_robustness_pct": self.delta_robustness_pct,
            "dimension": dict(self.dimension),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SummaryRow:
        return cls(**d)


def _field(ex, name):
    return ex[name] if isinstance(ex, dict) else getattr(ex, name)


def curves_from_distortions(
    examples: Sequence,
    epsilons: Sequence[float],
    benign_logits: np.ndarray,
    labels: np.ndarray,
    benign: EvalMetrics,
) -> SweepResult:
    """Threshold one minimum-distortion attack run into curves over ``epsilons``.

    ``examples`` are attack results (objects or log records) aligned with
    ``benign_logits`` and ``labels``. At each budget, samples whose minimal
    distortion fits the budget contribute their adversarial logits, every
    other sample its benign logits.
    """
    if len(examples) == 0:
        raise ConfigError("no attack results to build curves from")
    eps = np.asarray(epsilons, dtype=np.float64)
    benign_logits = np.asarray(benign_logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if benign_logits.shape[0] != len(examples) or labels.shape[0] != len(examples):
        raise ConfigError("benign logits and labels must align with the attack results")
    dist = np.array([float(_field(e, "minimal_linf")) for e in examples])
    adv = benign_logits.copy()
    for i, e in enumerate(examples):
        z = _field(e, "adv_logits")
        if math.isfinite(dist[i]):
            if z is None:
                raise DataError(f"attack result {i} has a distortion but no adversarial logits")
            adv[i] = np.asarray(z, dtype=np.float64)

    n = len(examples)
    success, acc, loss, prec = [], [], [], []
    for e in eps:
        hit = dist <= e
        z = np.where(hit[:, None], adv, benign_logits)
        m = metrics_from_logits(z, labels, benign_logits.shape[1])
        success.append(np.count_nonzero(hit) / n)
        acc.append(m.accuracy)
        loss.append(m.log_loss)
        prec.append(m.macro_precision)
    return SweepResult(eps, np.array(success), np.array(acc), np.array(loss), np.array(prec), benign, n)


def distance_to(sweep: SweepResult, target: float = TARGET_SUCCESS) -> float | None:
    """Smallest budget reaching ``target`` success, interpolated between grid points."""
    xs = np.concatenate([[0.0], sweep.epsilons])
    ys = np.concatenate([[0.0], sweep.success])
    above = np.flatnonzero(ys >= target)
    if above.size == 0:
        return None
    k = int(above[0])
    if k == 0:
        return 0.0
    x0, x1, y0, y1 = xs[k - 1], xs[k], ys[k - 1], ys[k]
    return float(x0 + (target - y0) * (x1 - x0) / (y1 - y0))


def delta_robustness(sweep: SweepResult, baseline: SweepResult, eps: float = DELTA_EPSILON) -> float | None:
    """Relative drop in success at ``eps`` versus the baseline; positive means more robust."""
    if not np.array_equal(sweep.epsilons, baseline.epsilons):
        raise ConfigError("sweeps must share the epsilon grid")
    b = baseline.success_at(eps)
    if b == 0:
        return None
    return (b - sweep.success_at(eps)) / b


def summarize(
    sweep: SweepResult,
    baseline: SweepResult | None,
    dim: dict,
    name: str = "",
    transform: str = "",
) -> SummaryRow:
    delta = None if baseline is None else delta_robustness(sweep, baseline)
    return SummaryRow(
        name=name,
        transform=transform,
        feature_count=int(dim["d_prime"]),
        benign_accuracy=float(sweep.benign.accuracy),
        distance_to_30=distance_to(sweep),
        delta_robustness_pct=None if delta is None else 100.0 * delta,
        dimension=dict(dim),
    )


# files


def _check_writable(out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    if not os.access(out_dir, os.W_OK):
        raise OSError(f"output directory {out_dir} is not writable")


def emit_reports(sweep: SweepResult, summary: SummaryRow, config: dict, out_dir: str | Path,
                 meta: dict | None = None) -> tuple[Path, Path]:
    """Write ``curves.csv`` and ``summary.json`` into ``out_dir``."""
    out = Path(out_dir)
    _check_writable(out)
    curves = out / "curves.csv"
    with open(curves, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CURVE_COLUMNS)
        for row in zip(sweep.epsilons, sweep.success, sweep.accuracy, sweep.log_loss, sweep.precision):
            w.writerow([repr(float(v)) for v in row])
    doc = {
        "format": SUMMARY_FORMAT,
        "version": SUMMARY_VERSION,
        "summary": summary.to_dict(),
        "benign": sweep.benign.to_dict(),
        "n_attacked": sweep.n_attacked,
        "config": config,
        "meta": meta or {},
    }
    path = out / "summary.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return curves, path


def load_reports(run_dir: str | Path) -> tuple[SweepResult, SummaryRow, dict]:
    """Inverse of :func:`emit_reports`; returns the sweep, the row and the whole summary document."""
    run = Path(run_dir)
    try:
        doc = json.loads((run / "summary.json").read_text())
        with open(run / "curves.csv", newline="") as fh:
            rows = list(csv.reader(fh))
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read reports in {run}: {exc}") from None
    if doc.get("format") != SUMMARY_FORMAT or doc.get("version") != SUMMARY_VERSION:
        raise DataError(f"{run / 'summary.json'} is not a version {SUMMARY_VERSION} summary")
    if not rows or tuple(rows[0]) != CURVE_COLUMNS:
        raise DataError(f"{run / 'curves.csv'} has unexpected columns")
    cols = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, len(CURVE_COLUMNS)).T
    sweep = SweepResult(*cols, benign=EvalMetrics.from_dict(doc["benign"]), n_attacked=int(doc["n_attacked"]))
    return sweep, SummaryRow.from_dict(doc["summary"]), doc


COMPARE_COLUMNS = ("Data Transformation", "Feature Count", "Benign Accuracy", "Distance (l_inf)", "Delta in Robustness")


def _fmt_delta(pct: float | None) -> str:
    if pct is None:
        return "-"
    arrow = "up" if pct > 0 else ("down" if pct < 0 else "=")
    return f"{arrow} {abs(pct):.2f}%"


def compare(run_dirs: Sequence[str | Path], baseline_dir: str | Path | None = None) -> list[list[str]]:
    """One row per run in the layout of the summary table, Delta against the baseline run.

    Without ``baseline_dir`` the first run whose transform is ``identity``
    serves as baseline.
    """
    loaded = [load_reports(d) for d in run_dirs]
    base = None
    if baseline_dir is not None:
        base = load_reports(baseline_dir)[0]
    else:
        for sweep, row, _ in loaded:
            if row.transform == "identity":
                base = sweep
                break
    table = [list(COMPARE_COLUMNS)]
    for sweep, row, _ in loaded:
        is_base = base is not None and sweep is base
        delta = None if base is None or is_base else delta_robustness(sweep, base)
        dist = distance_to(sweep)
        table.append([
            row.name or row.transform,
            str(row.feature_count),
            f"{100 * row.benign_accuracy:.2f}%",
            "-" if dist is None else f"{dist:.2f}",
            _fmt_delta(None if delta is None else 100 * delta),
        ])
    return table
