"""End-to-end experiment: load, normalise, transform, window, train, attack, sweep, report.

Every stage writes one artifact into the run directory stamped with a hash
of the settings it depends on. Re-running reuses artifacts whose stamp
matches; a stamp from different settings is a hard error unless ``force``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import classifier as clf
from .. import dataset as ds
from .. import forest
from .. import transforms as tf
from ..attack import attack_batch, load_attack_log
from ..errors import ConfigError, DataError, DimRobustError
from .config import ExperimentConfig
from .report import SummaryRow, SweepResult, curves_from_distortions, emit_reports, load_reports, summarize

log = logging.getLogger(__name__)

STAGES = ("ingest", "transform", "train", "attack", "sweep", "report")
STAGE_FORMAT = "dimrobust-stage"


@dataclass
class Prepared:
    raw: ds.RawSeries  # as loaded
    norm: ds.RawSeries  # scaled with training-row statistics
    train_rows: np.ndarray  # bool per row
    stats: ds.MinMax


@dataclass
class Windows:
    train: ds.WindowedDataset
    test: ds.WindowedDataset


@dataclass
class RunResult:
    out_dir: Path
    summary: SummaryRow | None
    sweep: SweepResult | None
    artifacts: dict


class _Stage:
    """Context manager that tags any failure with the stage name."""

    def __init__(self, name: str):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc is not None and isinstance(exc, DimRobustError) and not str(exc).startswith("stage "):
            raise type(exc)(f"stage {self.name!r}: {exc}") from exc
        return False


# artifacts


def _read_stamped(path: Path, stage: str, expected: str, force: bool) -> dict | None:
    """The stored document if its stamp matches, None if absent or forced."""
    if force or not path.exists():
        return None
    try:
        doc = json.loads(path.read_text())
    except ValueError as exc:
        raise DataError(f"{path}: unreadable artifact: {exc}") from None
    found = doc.get("config_hash") or doc.get("meta", {}).get("config_hash")
    if found != expected:
        raise ConfigError(
            f"{path} was produced by a different configuration for stage {stage!r} "
            f"(hash {found}, expected {expected}); rerun with --force or use another --out"
        )
    return doc


def _write_json(path: Path, doc: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    tmp.replace(path)


# stages


def prepare(cfg: ExperimentConfig) -> Prepared:
    """Load the series, split rows, then scale with statistics from training rows only."""
    if not cfg.data.path:
        raise ConfigError("no dataset path configured (data.path)")
    raw = ds.load_delimited(
        cfg.data.path,
        delimiter=cfg.data.delimiter,
        label_column=cfg.data.label_column,
        drop_labels=cfg.data.drop_labels,
        header=cfg.data.header,
        feature_columns=cfg.data.feature_columns,
        max_rows=cfg.data.max_rows,
    )
    mask = ds.split_mask(raw.labels, cfg.windows.train_fraction, cfg.windows.split)
    stats = ds.MinMax.fit(raw.features[mask])
    norm, _ = ds.normalize_minmax(raw, stats, clip=True)
    return Prepared(raw, norm, mask, stats)


def data_summary(p: Prepared) -> dict:
    vs = ds.feature_variance_summary(p.raw.features[p.train_rows])
    counts = np.bincount(p.raw.labels, minlength=p.raw.n_classes)
    return {
        "rows": p.raw.n,
        "features": p.raw.d,
        "classes": list(p.raw.class_values),
        "rows_per_class": counts.tolist(),
        "train_rows": int(p.train_rows.sum()),
        "pearson_avg": ds.pearson_avg(p.raw.features),
        "variance_order": vs.order.tolist(),
        "variance_cumulative": vs.cumulative.tolist(),
    }


def variance_basis(cfg: ExperimentConfig, p: Prepared) -> np.ndarray:
    src = p.raw if cfg.transform.variance_basis == "raw" else p.norm
    return src.features[p.train_rows]


def fit_transform(cfg: ExperimentConfig, p: Prepared) -> tuple[tf.FittedTransform, tf.DimensionReport]:
    t = cfg.transform
    train = p.norm.features[p.train_rows]
    d = p.norm.d
    if t.kind == "identity":
        fitted = tf.Identity()
    elif t.kind == "pca":
        k = t.components if t.components is not None else tf.component_count(t.fraction, d)
        fitted = tf.pca_fit(train, k, rescale=True)
    elif t.kind == "low_variance":
        fitted = tf.low_variance_select(variance_basis(cfg, p), t.target_ratio)
    elif t.kind == "random_forest":
        params = forest.ForestParams(t.n_trees, t.max_depth, t.features_per_split, cfg.seed)
        fitted = forest.rf_select(train, p.norm.labels[p.train_rows], params)
    elif t.kind == "candlestick":
        fitted = tf.candlestick_fit(train, t.window)
    elif t.kind == "ema":
        fitted = tf.EMA(t.window)
    else:  # pragma: no cover - guarded by TransformConfig
        raise ConfigError(f"unknown transform {t.kind!r}")
    intrinsic = tf.intrinsic_dimension(variance_basis(cfg, p), t.target_ratio, t.id_mode)
    return fitted, tf.dimension_report(fitted, d, intrinsic=intrinsic)


def _subsample(idx: np.ndarray, limit: int | None, rng: np.random.Generator) -> np.ndarray:
    if limit is None or idx.size <= limit:
        return idx
    return np.sort(rng.choice(idx, size=limit, replace=False))


def make_windows(cfg: ExperimentConfig, p: Prepared, t: tf.FittedTransform) -> Windows:
    """Transform the whole series, window it, and keep windows lying wholly on one side of the split."""
    Z = t.apply(p.norm.features)
    if isinstance(t, tf.Candlestick):
        c = t.window
        labels = tf.candle_labels(p.norm.labels, c, p.norm.n_classes)
        k = Z.shape[0]
        rows = p.train_rows[: k * c].reshape(k, c)
        train_rows, test_rows = rows.all(axis=1), (~rows).all(axis=1)
    else:
        labels = p.norm.labels
        train_rows, test_rows = p.train_rows, ~p.train_rows
    series = ds.RawSeries(np.ascontiguousarray(Z), labels, p.norm.class_values)
    w = ds.window(series, cfg.sequence_length, cfg.windows.stride)
    s = cfg.sequence_length

    def whole(side):
        cum = np.concatenate([[0], np.cumsum(side)])
        return cum[w.starts + s] - cum[w.starts] == s

    rng = np.random.default_rng(cfg.seed)
    tr = _subsample(np.flatnonzero(whole(train_rows)), cfg.windows.max_train, rng)
    te = _subsample(np.flatnonzero(whole(test_rows)), cfg.windows.max_test, rng)
    if tr.size == 0 or te.size == 0:
        raise DataError(
            f"windowing left {tr.size} training and {te.size} test windows; "
            "the series is too short for the sequence length"
        )
    return Windows(w.subset(tr), w.subset(te))


def select_attack_set(logits: np.ndarray, labels: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Up to ``n`` correctly classified windows, spread evenly over classes."""
    correct = np.flatnonzero(np.argmax(logits, axis=1) == labels)
    rng = np.random.default_rng(seed)
    pools = [rng.permutation(correct[labels[correct] == k]).tolist() for k in np.unique(labels[correct])]
    chosen: list[int] = []
    while len(chosen) < n and any(pools):
        for pool in pools:
            if pool and len(chosen) < n:
                chosen.append(pool.pop(0))
    return np.sort(np.asarray(chosen, dtype=np.int64))


def _config_doc(cfg: ExperimentConfig) -> dict:
    d = cfg.to_dict()
    for k in ("out_dir", "workers", "baseline_dir"):
        d.pop(k, None)
    return d


def run_pipeline(cfg: ExperimentConfig, force: bool = False, until: str = "report") -> RunResult:
    """Run stages in order up to and including ``until``."""
    if until not in STAGES:
        raise ConfigError(f"unknown stage {until!r}; choose from {STAGES}")
    stop = STAGES.index(until)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hashes = cfg.stage_hashes()
    artifacts: dict = {}
    stamp = {"seed": cfg.seed}

    with _Stage("ingest"):
        p = prepare(cfg)
        path = out / "data.json"
        doc = _read_stamped(path, "ingest", hashes["ingest"], force)
        if doc is None:
            doc = {"format": STAGE_FORMAT, "stage": "ingest", "config_hash": hashes["ingest"], **stamp,
                   "data": data_summary(p), "normalization": p.stats.to_dict()}
            _write_json(path, doc)
        artifacts["ingest"] = path
    if stop == 0:
        return RunResult(out, None, None, artifacts)

    with _Stage("transform"):
        path = out / "transform.json"
        doc = _read_stamped(path, "transform", hashes["transform"], force)
        if doc is None:
            fitted, dim = fit_transform(cfg, p)
            doc = {"format": STAGE_FORMAT, "stage": "transform", "config_hash": hashes["transform"], **stamp,
                   "transform": fitted.to_dict(), "dimension": dim.to_dict()}
            _write_json(path, doc)
        fitted = tf.transform_from_dict(doc["transform"])
        dim = doc["dimension"]
        artifacts["transform"] = path
    if stop == 1:
        return RunResult(out, None, None, artifacts)

    with _Stage("train"):
        windows = make_windows(cfg, p, fitted)
        path = out / "checkpoint.json"
        doc = _read_stamped(path, "train", hashes["train"], force)
        if doc is None:
            n_classes = p.norm.n_classes
            params = clf.init_params(
                windows.train.d, n_classes, cfg.train.hidden, seed=cfg.seed, forget_bias=cfg.train.forget_bias
            )
            params, history = clf.train(
                params, windows.train.sequences, windows.train.labels, cfg.train,
                on_epoch=lambda e, v: log.info("epoch %d loss %.5f", e, v),
            )
            test_logits = clf.predict_logits(params, windows.test.sequences)
            benign = clf.metrics_from_logits(test_logits, windows.test.labels, n_classes)
            meta = {"config_hash": hashes["train"], **stamp, "history": history, "benign": benign.to_dict(),
                    "train_shape": list(windows.train.sequences.shape),
                    "test_shape": list(windows.test.sequences.shape)}
            clf.save_checkpoint(path, params, meta)
        params, meta = clf.load_checkpoint(path)
        if meta.get("config_hash") != hashes["train"]:
            raise ConfigError(f"{path} does not match the current configuration; rerun with --force")
        benign = clf.EvalMetrics.from_dict(meta["benign"])
        artifacts["train"] = path
    if stop == 2:
        return RunResult(out, None, None, artifacts)

    with _Stage("attack"):
        path = out / "attack.jsonl"
        model = clf.as_model(params)
        test_logits = clf.predict_logits(params, windows.test.sequences)
        chosen = select_attack_set(test_logits, windows.test.labels, cfg.n_attack, cfg.seed)
        if chosen.size == 0:
            raise DataError("no correctly classified test windows to attack")
        done: list[dict] = []
        if path.exists() and not force:
            header, done = load_attack_log(path)
            if header["meta"].get("config_hash") != hashes["attack"]:
                raise ConfigError(f"{path} was produced by a different configuration; rerun with --force")
        if len(done) > chosen.size or [r["index"] for r in done] != chosen[: len(done)].tolist():
            raise DataError(f"{path} does not match the selected attack set; rerun with --force")
        rest = chosen[len(done):]
        if rest.size:
            if done:
                log.info("resuming attack after %d of %d samples", len(done), chosen.size)
            attack_batch(
                model, windows.test.sequences[rest], windows.test.labels[rest], cfg.attack,
                workers=cfg.workers, log_path=path, indices=rest, append=bool(done),
                meta={"config_hash": hashes["attack"], **stamp, "n_samples": int(chosen.size),
                      "box_constraint": "projection"},
            )
        _, records = load_attack_log(path)
        artifacts["attack"] = path
    if stop == 3:
        return RunResult(out, None, None, artifacts)

    with _Stage("sweep"):
        sweep = curves_from_distortions(
            records, cfg.epsilons, test_logits[chosen], windows.test.labels[chosen], benign
        )
    if stop == 4:
        return RunResult(out, None, sweep, artifacts)

    with _Stage("report"):
        baseline = None
        if cfg.baseline_dir:
            baseline = load_reports(cfg.baseline_dir)[0]
        row = summarize(sweep, baseline, dim, name=cfg.name, transform=cfg.transform.kind)
        meta = {
            "stage_hashes": hashes,
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "curves": "thresholded from one minimum-distortion attack run",
            "box_constraint": "projection",
            "train_shape": meta.get("train_shape"),
            "test_shape": meta.get("test_shape"),
        }
        curves_path, summary_path = emit_reports(sweep, row, _config_doc(cfg), out, meta)
        artifacts["curves"], artifacts["summary"] = curves_path, summary_path
    return RunResult(out, row, sweep, artifacts)
