"""Experiment configuration: presets, YAML loading and stage hashes."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import yaml

from ..attack import AttackConfig
from ..classifier import TrainConfig
from ..errors import ConfigError

TRANSFORM_KINDS = ("identity", "pca", "low_variance", "random_forest", "candlestick", "ema")
SCALES = ("desk", "paper")


@dataclass(frozen=True)
class DataConfig:
    path: str = ""
    delimiter: str = "auto"
    label_column: int = -1
    drop_labels: tuple[int, ...] = (0,)
    header: bool = False
    feature_columns: tuple[int, ...] | None = None
    max_rows: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "drop_labels", tuple(int(v) for v in self.drop_labels))
        if self.feature_columns is not None:
            object.__setattr__(self, "feature_columns", tuple(int(v) for v in self.feature_columns))


@dataclass(frozen=True)
class TransformConfig:
    kind: str = "identity"
    components: int | None = None  # PCA: explicit count
    fraction: float | None = None  # PCA: share of the input width
    target_ratio: float = 0.911  # low-variance selection and intrinsic-dimension estimate
    variance_basis: str = "raw"  # variances on raw or normalised training rows
    id_mode: str = "feature"
    window: int = 20  # candlestick and EMA
    n_trees: int = 100
    max_depth: int = 12
    features_per_split: int | None = None

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}; choose from {TRANSFORM_KINDS}")
        if self.kind == "pca" and (self.components is None) == (self.fraction is None):
            raise ConfigError("pca needs exactly one of components or fraction")
        if self.variance_basis not in ("raw", "normalized"):
            raise ConfigError("variance_basis must be 'raw' or 'normalized'")
        if not 0 < self.target_ratio <= 1:
            raise ConfigError("target_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class WindowConfig:
    length: int | None = None  # None: 100, or 5 for candlestick and EMA
    stride: int = 1
    train_fraction: float = 0.85
    split: str = "stratified"
    max_train: int | None = None  # subsample training windows
    max_test: int | None = None  # subsample test windows for benign metrics

    def __post_init__(self):
        if self.length is not None and self.length < 1:
            raise ConfigError("window length must be >= 1")
        if self.stride < 1:
            raise ConfigError("window stride must be >= 1")
        if self.split not in ("temporal", "stratified"):
            raise ConfigError("split must be 'temporal' or 'stratified'")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    scale: str = "desk"
    data: DataConfig = field(default_factory=DataConfig)
    transform: TransformConfig = field(default_factory=TransformConfig)
    windows: WindowConfig = field(default_factory=WindowConfig)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    attack: AttackConfig = field(default_factory=AttackConfig.desk)
    n_attack: int = 100
    epsilons: tuple[float, ...] = field(default_factory=lambda: default_epsilons())
    out_dir: str = "runs/experiment"
    baseline_dir: str | None = None
    workers: int = 1

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        object.__setattr__(self, "epsilons", eps)
        # the experiment seed drives every stage, training included
        object.__setattr__(self, "train", replace(self.train, seed=self.seed))
        if self.scale not in SCALES:
            raise ConfigError(f"scale must be one of {SCALES}")
        if not eps or eps[0] <= 0 or eps[-1] > 1 or any(b <= a for a, b in zip(eps, eps[1:])):
            raise ConfigError("epsilons must be strictly increasing within (0, 1]")
        if self.n_attack < 1:
            raise ConfigError("n_attack must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")

    @property
    def sequence_length(self) -> int:
        if self.windows.length is not None:
            return self.windows.length
        return 5 if self.transform.kind in ("candlestick", "ema") else 100

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = asdict(self.train)
        d["attack"] = self.attack.to_dict()
        d["epsilons"] = list(self.epsilons)
        return _jsonable(d)

    def stage_hashes(self) -> dict[str, str]:
        """Hash per pipeline stage, each covering every setting that stage depends on.

        Output locations, worker counts and the baseline pointer never affect
        results and are left out.
        """
        d = self.to_dict()
        data = {"seed": d["seed"], "data": d["data"], "split": d["windows"]["split"],
                "train_fraction": d["windows"]["train_fraction"]}
        transform = {**data, "transform": d["transform"]}
        train = {**transform, "windows": d["windows"], "sequence_length": self.sequence_length, "train": d["train"]}
        attack = {**train, "attack": d["attack"], "n_attack": d["n_attack"]}
        sweep = {**attack, "epsilons": d["epsilons"]}
        return {k: _digest(v) for k, v in
                [("ingest", data), ("transform", transform), ("train", train), ("attack", attack), ("sweep", sweep)]}

    @property
    def config_hash(self) -> str:
        return self.stage_hashes()["sweep"]


def default_epsilons(n: int = 50) -> tuple[float, ...]:
    """``n`` evenly spaced budgets ending at 1.0, rounded so 0.8 lies on the default grid."""
    return tuple(float(v) for v in np.round(np.arange(1, n + 1) / n, 12))


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def preset(scale: str) -> dict:
    """Settings that differ between the quick desk run and the full-size run."""
    if scale == "desk":
        return {
            "train": asdict(TrainConfig.desk()),
            "attack": AttackConfig.desk().to_dict(),
            "n_attack": 100,
            "windows": {"max_train": 4096, "max_test": 4096},
        }
    if scale == "paper":
        return {
            "train": asdict(TrainConfig()),
            "attack": AttackConfig.paper().to_dict(),
            "n_attack": 200,
            "windows": {"max_train": None, "max_test": None},
        }
    raise ConfigError(f"unknown scale {scale!r}")


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _build(cls, section: dict, where: str):
    if section is None:
        return cls()
    if not isinstance(section, dict):
        raise ConfigError(f"section {where!r} must be a mapping")
    names = {f.name for f in fields(cls)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in {where!r}: {sorted(unknown)}")
    try:
        return cls(**section)
    except TypeError as exc:
        raise ConfigError(f"bad {where!r} section: {exc}") from None


def config_from_dict(doc: dict, scale: str | None = None) -> ExperimentConfig:
    """Build a config from a nested mapping on top of the chosen scale preset.

    ``scale`` overrides the document's own ``scale`` key.
    """
    doc = dict(doc or {})
    chosen = scale or doc.get("scale", "desk")
    merged = _merge(preset(chosen), doc)
    merged["scale"] = chosen
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
    eps = merged.pop("epsilons", None)
    if isinstance(eps, dict):
        eps = default_epsilons(int(eps.get("count", 50)))
    sections = {
        "data": _build(DataConfig, merged.pop("data", None), "data"),
        "transform": _build(TransformConfig, merged.pop("transform", None), "transform"),
        "windows": _build(WindowConfig, merged.pop("windows", None), "windows"),
        "train": _build(TrainConfig, merged.pop("train", None), "train"),
    }
    attack_doc = merged.pop("attack", None) or {}
    if not isinstance(attack_doc, dict):
        raise ConfigError("section 'attack' must be a mapping")
    sections["attack"] = AttackConfig.from_dict(attack_doc)
    if eps is not None:
        sections["epsilons"] = tuple(eps)
    try:
        return ExperimentConfig(**merged, **sections)
    except TypeError as exc:
        raise ConfigError(f"bad config: {exc}") from None


def load_config(path: str | Path | None, scale: str | None = None, **overrides) -> ExperimentConfig:
    """Read a YAML (or JSON) document; keyword overrides replace top-level fields."""
    doc: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        try:
            doc = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
    cfg = config_from_dict(doc, scale)
    overrides = {k: v for k, v in overrides.items() if v is not None}
    return replace(cfg, **overrides) if overrides else cfg
