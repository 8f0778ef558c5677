"""Two-layer LSTM sequence classifier with a dense softmax head.

Gate blocks in every ``W``/``U``/``b`` are packed in the order
(input, forget, cell, output), ``h`` rows each.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from functools import partial
from pathlib import Path
from typing import Callable

import numpy as np

from . import diffmath as dm
from .diffmath import Adam, Tape, Tensor
from .errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dimrobust-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class LSTMLayer:
    W: Tensor  # [4h, in]
    U: Tensor  # [4h, h]
    b: Tensor  # [4h]


@dataclass
class NetworkParams:
    layers: list[LSTMLayer]
    W_out: Tensor  # [N, h]
    b_out: Tensor  # [N]

    def __post_init__(self):
        h = self.hidden
        prev = self.n_features
        for k, layer in enumerate(self.layers):
            if layer.W.shape != (4 * h, prev) or layer.U.shape != (4 * h, h) or layer.b.shape != (4 * h,):
                raise ConfigError(f"LSTM layer {k} has inconsistent shapes")
            prev = h
        if self.W_out.shape != (self.n_classes, h) or self.b_out.shape != (self.n_classes,):
            raise ConfigError("dense head shapes do not match hidden size")

    @property
    def hidden(self) -> int:
        return self.layers[0].U.shape[1]

    @property
    def n_features(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def n_classes(self) -> int:
        return self.W_out.shape[0]

    def tensors(self) -> list[Tensor]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.U, layer.b]
        return out + [self.W_out, self.b_out]

    def named_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for k, layer in enumerate(self.layers):
            out[f"lstm{k}.W"] = layer.W.data
            out[f"lstm{k}.U"] = layer.U.data
            out[f"lstm{k}.b"] = layer.b.data
        out["dense.W"] = self.W_out.data
        out["dense.b"] = self.b_out.data
        return out

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray], requires_grad: bool = True) -> NetworkParams:
        n_layers = len([k for k in arrays if k.endswith(".U")])
        layers = [
            LSTMLayer(
                *(Tensor(arrays[f"lstm{k}.{p}"], requires_grad=requires_grad) for p in "WUb")
            )
            for k in range(n_layers)
        ]
        return cls(
            layers,
            Tensor(arrays["dense.W"], requires_grad=requires_grad),
            Tensor(arrays["dense.b"], requires_grad=requires_grad),
        )

    def copy(self) -> NetworkParams:
        return NetworkParams.from_arrays({k: v.copy() for k, v in self.named_arrays().items()})

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.named_arrays().values())


def init_params(
    n_features: int,
    n_classes: int,
    hidden: int = 64,
    n_layers: int = 2,
    seed: int = 0,
    forget_bias: float = 1.0,
) -> NetworkParams:
    """Uniform(+-sqrt(1/h)) weights, forget-gate bias set to ``forget_bias``."""
    if min(n_features, n_classes, hidden, n_layers) < 1:
        raise ConfigError("n_features, n_classes, hidden and n_layers must be positive")
    rng = np.random.default_rng(seed)
    bound = np.sqrt(1.0 / hidden)
    layers = []
    fan_in = n_features
    for _ in range(n_layers):
        b = np.zeros(4 * hidden)
        b[hidden : 2 * hidden] = forget_bias
        layers.append(
            LSTMLayer(
                Tensor(rng.uniform(-bound, bound, (4 * hidden, fan_in)), requires_grad=True),
                Tensor(rng.uniform(-bound, bound, (4 * hidden, hidden)), requires_grad=True),
                Tensor(b, requires_grad=True),
            )
        )
        fan_in = hidden
    W_out = Tensor(rng.uniform(-bound, bound, (n_classes, hidden)), requires_grad=True)
    b_out = Tensor(np.zeros(n_classes), requires_grad=True)
    return NetworkParams(layers, W_out, b_out)


def zero_params(n_features: int, n_classes: int, hidden: int = 64, n_layers: int = 2) -> NetworkParams:
    p = init_params(n_features, n_classes, hidden, n_layers, seed=0, forget_bias=0.0)
    for t in p.tensors():
        t.data[...] = 0.0
    return p


@dataclass
class TrainConfig:
    lr: float = 1e-3
    dropout: float = 0.1
    batch_size: int = 512
    epochs: int = 250
    seed: int = 0
    forget_bias: float = 1.0
    hidden: int = 64

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")

    @classmethod
    def desk(cls, **kw) -> TrainConfig:
        return cls(**{"epochs": 30, **kw})


def _dropout(h: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    keep = 1.0 - rate
    mask = (rng.random(h.shape) < keep) / keep
    return h * Tensor._wrap(mask)


def forward(
    params: NetworkParams,
    x,
    train_mode: bool = False,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
    dropout_seed: int | None = None,
) -> Tensor:
    """Logits for one sequence ``[s, d]`` (-> ``[N]``) or a batch ``[B, s, d]`` (-> ``[B, N]``).

    Dropout is applied to each LSTM layer's output only when ``train_mode``
    is set and ``dropout > 0``.
    """
    x = x if isinstance(x, Tensor) else Tensor._wrap(np.asarray(x, dtype=np.float64))
    single = x.ndim == 2
    if single:
        x = dm.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[2] != params.n_features:
        raise ConfigError(
            f"forward: expected [batch, steps, {params.n_features}] input, got {x.shape}"
        )
    use_dropout = train_mode and dropout > 0.0
    if use_dropout and rng is None:
        rng = np.random.default_rng(dropout_seed)
    h_size = params.hidden
    B, steps = x.shape[0], x.shape[1]

    first = params.layers[0]
    proj = x @ first.W.T + first.b  # [B, s, 4h]
    states = [(None, None) for _ in params.layers]
    h_top = None
    for t in range(steps):
        inp = None
        for k, layer in enumerate(params.layers):
            z = proj[:, t, :] if k == 0 else inp @ layer.W.T + layer.b
            h_prev, c_prev = states[k]
            if h_prev is not None:
                z = z + h_prev @ layer.U.T
            gates = dm.sigmoid(z)
            i_g = gates[:, :h_size]
            f_g = gates[:, h_size : 2 * h_size]
            o_g = gates[:, 3 * h_size :]
            g_g = dm.tanh(z[:, 2 * h_size : 3 * h_size])
            c = i_g * g_g if c_prev is None else f_g * c_prev + i_g * g_g
            h = o_g * dm.tanh(c)
            states[k] = (h, c)
            inp = _dropout(h, dropout, rng) if use_dropout else h
        h_top = inp
    if h_top is None:
        h_top = Tensor._wrap(np.zeros((B, h_size)))
    logits = h_top @ params.W_out.T + params.b_out
    return logits[0] if single else logits


def as_model(params: NetworkParams) -> Callable[[Tensor], Tensor]:
    """Inference-mode forward pass bound to a frozen copy of ``params``.

    The copy does not require gradients, so taping the model only tracks the input.
    """
    frozen = NetworkParams.from_arrays(params.named_arrays(), requires_grad=False)
    return partial(forward, frozen)


def predict_logits(params: NetworkParams, X: np.ndarray, batch_size: int = 1024) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if len(X) == 0:
        return np.zeros((0, params.n_classes))
    chunks = [forward(params, X[i : i + batch_size]).data for i in range(0, len(X), batch_size)]
    return np.concatenate(chunks, axis=0)


def train(
    params: NetworkParams,
    X: np.ndarray,
    y: np.ndarray,
    cfg: TrainConfig,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[NetworkParams, list[float]]:
    """Mini-batch Adam on cross-entropy.  Returns new params and per-epoch mean loss."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(X) == 0:
        raise DataError("training set is empty")
    if params.n_classes < 2:
        raise ConfigError("need at least two classes")
    params = params.copy()
    history: list[float] = []
    if cfg.epochs == 0:
        return params, history
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(params.tensors(), lr=cfg.lr)
    m = len(X)
    for epoch in range(cfg.epochs):
        order = rng.permutation(m)
        total = 0.0
        for start in range(0, m, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            with Tape() as tape:
                logits = forward(params, X[idx], train_mode=True, dropout=cfg.dropout, rng=rng)
                loss = dm.cross_entropy(logits, y[idx])
            value = loss.item()
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite training loss at epoch {epoch}, batch offset {start} "
                    f"(lr={cfg.lr}); try a smaller learning rate"
                )
            opt.zero_grad()
            tape.backward(loss)
            opt.step()
            total += value * len(idx)
        history.append(total / m)
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        log.debug("epoch %d loss %.5f", epoch, history[-1])
    return params, history


@dataclass
class EvalMetrics:
    accuracy: float
    log_loss: float
    macro_precision: float
    per_class_precision: list[float] = field(default_factory=list)
    n: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> EvalMetrics:
        return cls(**d)


def log_loss_from_logits(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample cross-entropy."""
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return lse - z[np.arange(len(labels)), labels]


def metrics_from_logits(logits: np.ndarray, labels: np.ndarray, n_classes: int | None = None) -> EvalMetrics:
    """Accuracy, mean log loss and macro precision.

    Macro precision averages TP/(TP+FP) over every class that occurs in the
    labels or the predictions; a class that is never predicted scores 0.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = n_classes or logits.shape[1]
    if len(labels) == 0:
        return EvalMetrics(0.0, 0.0, 0.0, [0.0] * n_classes, 0)
    pred = logits.argmax(axis=1)
    per_class = np.zeros(n_classes)
    for k in range(n_classes):
        predicted = pred == k
        if predicted.any():
            per_class[k] = np.count_nonzero(predicted & (labels == k)) / np.count_nonzero(predicted)
    seen = np.union1d(np.unique(labels), np.unique(pred))
    return EvalMetrics(
        accuracy=float(np.mean(pred == labels)),
        log_loss=float(np.mean(log_loss_from_logits(logits, labels))),
        macro_precision=float(per_class[seen].mean()),
        per_class_precision=[float(v) for v in per_class],
        n=int(len(labels)),
    )


def evaluate(params: NetworkParams, X: np.ndarray, y: np.ndarray, batch_size: int = 1024) -> EvalMetrics:
    return metrics_from_logits(predict_logits(params, X, batch_size), np.asarray(y), params.n_classes)


def save_checkpoint(path: str | Path, params: NetworkParams, meta: dict | None = None) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "hidden": params.hidden,
        "n_features": params.n_features,
        "n_classes": params.n_classes,
        "params": {
            k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
            for k, v in params.named_arrays().items()
        },
        "meta": meta or {},
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> tuple[NetworkParams, dict]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path}: not a checkpoint file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    arrays = {
        k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"]) for k, v in doc["params"].items()
    }
    return NetworkParams.from_arrays(arrays), doc.get("meta", {})
