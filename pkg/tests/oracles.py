"""Independent reference computations used as test oracles.

Reference values are plain numpy or brute force; the small test models use the tape only to be attackable.
"""

import numpy as np

from dimrobust import diffmath as dm
from dimrobust.diffmath import Tensor


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Gradient of scalar ``f`` at ``x`` by central differences (x is perturbed in place, then restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        grad[i] = (fp - fm) / (2 * h)
    return grad


def grad_errors(auto: np.ndarray, numeric: np.ndarray) -> tuple[float, float]:
    """(max rel. error over entries >= 1e-3 in magnitude, max abs. error over the rest)."""
    auto = np.asarray(auto)
    numeric = np.asarray(numeric)
    scale = np.maximum(np.abs(auto), np.abs(numeric))
    small = scale < 1e-3
    err = np.abs(auto - numeric)
    abs_err = float(err[small].max()) if small.any() else 0.0
    rel_err = float((err[~small] / scale[~small]).max()) if (~small).any() else 0.0
    return rel_err, abs_err


def assert_grad_close(auto: np.ndarray, numeric: np.ndarray, rel: float = 1e-4, abs_small: float = 1e-6):
    """rel. error <= ``rel``; entries whose magnitude is < 1e-3 use an absolute bound instead."""
    rel_err, abs_err = grad_errors(auto, numeric)
    assert abs_err <= abs_small, f"abs err {abs_err}"
    assert rel_err <= rel, f"max rel err {rel_err:.3e}"


def lstm_reference(arrays: dict, x: np.ndarray) -> np.ndarray:
    """Straight-line LSTM forward for one sequence [s, d] -> logits [N]."""

    def sig(z):
        return 1.0 / (1.0 + np.exp(-z))

    n_layers = len([k for k in arrays if k.endswith(".U")])
    seq = x
    for k in range(n_layers):
        W, U, b = arrays[f"lstm{k}.W"], arrays[f"lstm{k}.U"], arrays[f"lstm{k}.b"]
        h_size = U.shape[1]
        h = np.zeros(h_size)
        c = np.zeros(h_size)
        outs = []
        for t in range(seq.shape[0]):
            z = W @ seq[t] + U @ h + b
            i, f, g, o = (z[j * h_size : (j + 1) * h_size] for j in range(4))
            c = sig(f) * c + sig(i) * np.tanh(g)
            h = sig(o) * np.tanh(c)
            outs.append(h)
        seq = np.array(outs)
    return arrays["dense.W"] @ seq[-1] + arrays["dense.b"]


def linear_sequence_model(w, b):
    """Two-class model with logits (-s/2, s/2), s = w . mean_t(x) + b."""
    W = Tensor._wrap(np.asarray(w, dtype=np.float64)[:, None])

    def model(x):
        s = dm.reshape(dm.mean(x, axis=1) @ W + b, (x.shape[0], 1))
        return dm.concatenate([s * -0.5, s * 0.5], axis=1)

    return model


def linear_linf_oracle(x, w, b, y, step=1e-4):
    """Smallest eps on a grid for which the uniform sign perturbation flips ``y``.

    For a linear score the optimal L-inf perturbation pushes every coordinate
    by eps against the class, clipped to the unit box.
    """
    direction = np.sign(w) if y == 0 else -np.sign(w)
    for eps in np.arange(0.0, 1.0 + step, step):
        s = np.clip(x + eps * direction, 0.0, 1.0).mean(axis=0) @ w + b
        # argmax ties go to class 0
        if (y == 0 and s > 0) or (y == 1 and s <= 0):
            return float(eps)
    return float("inf")


def naive_candles(X, c):
    """Per-window scan, one feature at a time."""
    n, d = X.shape
    rows = []
    for start in range(0, n - c + 1, c):
        if start + c > n:
            break
        row = []
        for j in range(d):
            seg = [X[t, j] for t in range(start, start + c)]
            row += [seg[0], seg[-1], max(seg), min(seg)]
        rows.append(row)
    return np.array(rows)


def naive_ema(X, alpha):
    out = np.zeros_like(X)
    for j in range(X.shape[1]):
        prev = X[0, j]
        out[0, j] = prev
        for t in range(1, X.shape[0]):
            prev = alpha * X[t, j] + (1 - alpha) * prev
            out[t, j] = prev
    return out
