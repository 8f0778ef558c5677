"""Untargeted Carlini-Wagner L-infinity attack on sequence classifiers.

The L-infinity norm is replaced by the penalty ``sum(max(0, |gamma| - tau))``
and ``tau`` is shrunk every time the attack succeeds inside it. Several
samples are optimised together; rows never interact, so a batch behaves like
independent per-sample runs.
"""

from __future__ import annotations

import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import diffmath as dm
from .diffmath import AdamState, Tape, Tensor
from .errors import ConfigError, DataError, DimRobustError

log = logging.getLogger(__name__)

Model = Callable[[Tensor], Tensor]

LOG_FORMAT = "dimrobust-attack-log"
LOG_VERSION = 1


def _c_schedule(n: int) -> tuple[float, ...]:
    return tuple(float(c) for c in np.logspace(-3, 3, n))


@dataclass(frozen=True)
class AttackConfig:
    confidence: float = 0.5
    lr: float = 0.01
    max_iter: int = 10_000
    c_values: tuple[float, ...] = field(default_factory=lambda: _c_schedule(20))
    tau_init: float = 1.0
    tau_decay: float = 0.9
    # iterations without success before tau is relaxed halfway back to the best hit
    tau_patience: int = 25
    # stop after this many consecutive c values without improvement; None disables
    early_exit: int | None = 3
    box: tuple[float, float] = (0.0, 1.0)
    batch_size: int = 100

    def __post_init__(self):
        object.__setattr__(self, "c_values", tuple(float(c) for c in self.c_values))
        object.__setattr__(self, "box", tuple(float(b) for b in self.box))
        if self.confidence < 0:
            raise ConfigError("confidence must be >= 0")
        if not self.lr > 0:
            raise ConfigError("attack lr must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be >= 1")
        cs = np.asarray(self.c_values)
        if cs.size == 0 or np.any(cs <= 0) or np.any(np.diff(cs) <= 0):
            raise ConfigError("c_values must be positive and strictly increasing")
        if not 0 < self.tau_decay < 1:
            raise ConfigError("tau_decay must lie in (0, 1)")
        if not self.tau_init > 0:
            raise ConfigError("tau_init must be positive")
        if self.tau_patience < 1:
            raise ConfigError("tau_patience must be >= 1")
        if self.early_exit is not None and self.early_exit < 1:
            raise ConfigError("early_exit must be >= 1 or None")
        if len(self.box) != 2 or not self.box[0] < self.box[1]:
            raise ConfigError("box must be (lo, hi) with lo < hi")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    @classmethod
    def desk(cls, **kw) -> AttackConfig:
        return cls(**{"max_iter": 1000, "c_values": _c_schedule(5), **kw})

    @classmethod
    def paper(cls, **kw) -> AttackConfig:
        return cls(**kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["c_values"] = list(self.c_values)
        d["box"] = list(self.box)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AttackConfig:
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown attack settings: {sorted(unknown)}")
        return cls(**known)


@dataclass
class AdversarialExample:
    x: np.ndarray
    x_adv: np.ndarray
    label: int
    adv_label: int
    minimal_linf: float  # +inf when the attack failed
    success: bool
    iterations_used: int
    c_used: float | None
    adv_logits: np.ndarray | None = None
    index: int | None = None
    error: str | None = None

    def record(self) -> dict:
        """Scalar summary written to the attack log."""
        return {
            "index": self.index,
            "label": int(self.label),
            "adv_label": int(self.adv_label),
            "success": bool(self.success),
            "minimal_linf": self.minimal_linf if math.isfinite(self.minimal_linf) else None,
            "c_used": self.c_used,
            "iterations_used": int(self.iterations_used),
            "adv_logits": None if self.adv_logits is None else [float(v) for v in self.adv_logits],
            "error": self.error,
        }


def _failed(x, y, iters, error=None, index=None) -> AdversarialExample:
    return AdversarialExample(
        x=x, x_adv=x.copy(), label=int(y), adv_label=int(y), minimal_linf=math.inf, success=False,
        iterations_used=int(iters), c_used=None, index=index, error=error,
    )


def _margin(Z: np.ndarray, y: np.ndarray) -> np.ndarray:
    """max over other classes minus the true-class logit."""
    rows = np.arange(len(y))
    other = Z.copy()
    other[rows, y] = -np.inf
    return other.max(axis=1) - Z[rows, y]


def _optimise(model: Model, X: np.ndarray, y: np.ndarray, c: float, lr: float, cfg: AttackConfig):
    """Adam on gamma for a single c. Returns per-row best candidates and a non-finite flag."""
    b = X.shape[0]
    lo, hi = cfg.box
    kappa = cfg.confidence
    rows = np.arange(b)
    gamma = np.zeros_like(X)
    state = AdamState.zeros_like(gamma, lr=lr)
    tau = np.full(b, cfg.tau_init)
    since = np.zeros(b, dtype=np.int64)
    best = np.full(b, np.inf)
    best_x = X.copy()
    best_z = np.full((b, 0), np.nan)
    bad = np.zeros(b, dtype=bool)
    iters = np.zeros(b, dtype=np.int64)
    Xt = Tensor._wrap(X)

    for it in range(cfg.max_iter + 1):
        g = Tensor(gamma, requires_grad=True)
        with Tape() as tape:
            xp = Xt + g
            Z = model(xp)
            if Z.ndim != 2 or Z.shape[0] != b:
                raise ConfigError(f"model must map [B, s, d] to [B, N], got {Z.shape}")
            z = Z.data
            if best_z.shape[1] != z.shape[1]:
                best_z = np.zeros((b, z.shape[1]))
            masked = z.copy()
            masked[rows, y] = -np.inf
            other = np.argmax(masked, axis=1)
            diff = Z[rows, y] - Z[rows, other]
            f = dm.clamp(diff, lo=-kappa)
            pen = dm.sum(dm.clamp(dm.abs(g) - tau[:, None, None], lo=0.0), axis=(1, 2))
            loss = dm.sum(f * c + pen)

        bad |= ~np.all(np.isfinite(z), axis=1)
        lin = np.abs(xp.data - X).max(axis=(1, 2))
        ok = (
            ~bad
            & (lin <= tau)
            & (diff.data <= -kappa)
            & (np.argmax(z, axis=1) != y)
        )
        better = ok & (lin < best)
        if better.any():
            best[better] = lin[better]
            best_x[better] = xp.data[better]
            best_z[better] = z[better]
        tau = np.where(ok, np.minimum(tau, lin) * cfg.tau_decay, tau)
        since = np.where(ok, 0, since + 1)
        relax = (since >= cfg.tau_patience) & np.isfinite(best)
        tau = np.where(relax, 0.5 * (tau + best), tau)
        since[relax] = 0
        iters[~bad] = it
        if it == cfg.max_iter or bad.all():
            break

        tape.backward(loss)
        grad = g.grad
        bad |= ~np.all(np.isfinite(grad), axis=(1, 2))
        grad = np.where(bad[:, None, None], 0.0, grad)
        dm.adam_step(gamma, grad, state)
        np.clip(X + gamma, lo, hi, out=gamma)
        gamma -= X
        bad |= ~np.all(np.isfinite(gamma), axis=(1, 2))
        gamma[bad] = 0.0

    return best, best_x, best_z, iters, bad


def _attack_rows(model: Model, X: np.ndarray, y: np.ndarray, cfg: AttackConfig, indices) -> list[AdversarialExample]:
    m = X.shape[0]
    best = np.full(m, np.inf)
    best_x = X.copy()
    best_z: list = [None] * m
    best_c: list = [None] * m
    iters = np.zeros(m, dtype=np.int64)
    stale = np.zeros(m, dtype=np.int64)
    done = np.zeros(m, dtype=bool)
    errors: list = [None] * m

    for c in cfg.c_values:
        idx = np.nonzero(~done)[0]
        if idx.size == 0:
            break
        lr = cfg.lr
        res = _optimise(model, X[idx], y[idx], c, lr, cfg)
        if res[4].any():
            # restart this c once at half the learning rate for the rows that diverged
            sub = idx[res[4]]
            log.warning("non-finite attack state for %d rows at c=%g, retrying with lr/2", sub.size, c)
            retry = _optimise(model, X[sub], y[sub], c, lr / 2, cfg)
            merged = [r.copy() for r in res]
            for k in range(5):
                merged[k][res[4]] = retry[k]
            res = merged
        rb, rx, rz, ri, rbad = res
        iters[idx] += ri
        for j, i in enumerate(idx):
            if rbad[j]:
                done[i] = True
                errors[i] = f"non-finite optimiser state at c={c:g} after lr halving"
                best[i] = np.inf
                continue
            if rb[j] < best[i]:
                best[i], best_x[i], best_z[i], best_c[i] = rb[j], rx[j], rz[j], c
                stale[i] = 0
            elif math.isfinite(best[i]):
                stale[i] += 1
            if cfg.early_exit is not None and stale[i] >= cfg.early_exit:
                done[i] = True

    return _verify(model, X, y, best, best_x, best_c, iters, errors, cfg, indices)


def _verify(model, X, y, best, best_x, best_c, iters, errors, cfg, indices) -> list[AdversarialExample]:
    """Re-check every candidate with a plain forward pass and recompute its distance."""
    lo, hi = cfg.box
    Z = model(Tensor._wrap(best_x)).data
    pred = np.argmax(Z, axis=1)
    margin = _margin(Z, y)
    out = []
    for i in range(X.shape[0]):
        index = None if indices is None else int(indices[i])
        if errors[i] is not None or not math.isfinite(best[i]):
            out.append(_failed(X[i], y[i], iters[i], errors[i], index))
            continue
        xa = best_x[i]
        linf = float(np.abs(xa - X[i]).max())
        valid = (
            pred[i] != y[i]
            and margin[i] >= cfg.confidence - 1e-6
            and xa.min() >= lo - 1e-9
            and xa.max() <= hi + 1e-9
        )
        if not valid:
            log.warning("candidate for sample %s failed re-verification, discarded", index)
            out.append(_failed(X[i], y[i], iters[i], "candidate failed re-verification", index))
            continue
        out.append(
            AdversarialExample(
                x=X[i], x_adv=xa.copy(), label=int(y[i]), adv_label=int(pred[i]), minimal_linf=linf,
                success=True, iterations_used=int(iters[i]), c_used=best_c[i], adv_logits=Z[i].copy(),
                index=index,
            )
        )
    return out


def _check_inputs(X: np.ndarray, y: np.ndarray, cfg: AttackConfig) -> None:
    if X.ndim != 3 or y.shape != (X.shape[0],):
        raise ConfigError(f"expected samples [m, s, d] and labels [m], got {X.shape} and {y.shape}")
    lo, hi = cfg.box
    if X.size and (X.min() < lo or X.max() > hi):
        raise DataError(f"attack inputs must lie in [{lo}, {hi}]")


def cw_linf(model: Model, x: np.ndarray, y: int, cfg: AttackConfig | None = None) -> AdversarialExample:
    """Minimum L-infinity untargeted attack on one sequence ``x`` [s, d] with true label ``y``."""
    cfg = cfg or AttackConfig()
    X = np.asarray(x, dtype=np.float64)[None]
    Y = np.asarray([y], dtype=np.int64)
    _check_inputs(X, Y, cfg)
    return _attack_rows(model, X, Y, cfg, None)[0]


def _attack_chunk(args):
    model, X, y, cfg, indices = args
    try:
        return _attack_rows(model, X, y, cfg, indices)
    except DimRobustError as exc:
        if X.shape[0] == 1:
            return [_failed(X[0], y[0], 0, f"{type(exc).__name__}: {exc}", int(indices[0]))]
        # isolate the failing sample(s)
        out = []
        for i in range(X.shape[0]):
            out += _attack_chunk((model, X[i : i + 1], y[i : i + 1], cfg, indices[i : i + 1]))
        return out


def attack_batch(
    model: Model,
    X: np.ndarray,
    y: Sequence[int],
    cfg: AttackConfig | None = None,
    workers: int = 1,
    log_path: str | Path | None = None,
    indices: Sequence[int] | None = None,
    meta: dict | None = None,
    append: bool = False,
) -> list[AdversarialExample]:
    """Attack every sample, index-aligned with ``X``.

    Samples are processed in chunks of ``cfg.batch_size``. With ``log_path``,
    a header line and one record per sample are appended as chunks finish;
    ``append`` continues an existing log instead of starting a new one.
    Failures inside a chunk are isolated to the offending sample.
    """
    cfg = cfg or AttackConfig()
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if X.shape[0] == 0:
        if log_path is not None and not append:
            _write_header(log_path, cfg, meta)
        return []
    _check_inputs(X, y, cfg)
    idx = np.arange(X.shape[0]) if indices is None else np.asarray(indices, dtype=np.int64)
    jobs = [
        (model, X[i : i + cfg.batch_size], y[i : i + cfg.batch_size], cfg, idx[i : i + cfg.batch_size])
        for i in range(0, X.shape[0], cfg.batch_size)
    ]
    if log_path is not None and not append:
        _write_header(log_path, cfg, meta)

    results: list[AdversarialExample] = []

    def collect(chunk):
        results.extend(chunk)
        n_ok = sum(r.success for r in chunk)
        log.info("attacked %d/%d samples (%d successes in last chunk)", len(results), X.shape[0], n_ok)
        if log_path is not None:
            with open(log_path, "a") as fh:
                for r in chunk:
                    fh.write(json.dumps(r.record()) + "\n")

    if workers <= 1:
        for job in jobs:
            collect(_attack_chunk(job))
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            for chunk in pool.map(_attack_chunk, jobs):
                collect(chunk)
    return results


def _write_header(path, cfg: AttackConfig, meta: dict | None) -> None:
    header = {"format": LOG_FORMAT, "version": LOG_VERSION, "config": cfg.to_dict(), "meta": meta or {}}
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")


def load_attack_log(path: str | Path) -> tuple[dict, list[dict]]:
    """Header and per-sample records; a null ``minimal_linf`` reads back as +inf."""
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise DataError(f"cannot read attack log {path}: {exc}") from None
    if not lines:
        raise DataError(f"{path}: empty attack log")
    header = json.loads(lines[0])
    if header.get("format") != LOG_FORMAT or header.get("version") != LOG_VERSION:
        raise DataError(f"{path}: not a version {LOG_VERSION} attack log")
    records = []
    for line in lines[1:]:
        if not line.strip():
            continue
        r = json.loads(line)
        r["minimal_linf"] = math.inf if r["minimal_linf"] is None else float(r["minimal_linf"])
        records.append(r)
    return header, records
